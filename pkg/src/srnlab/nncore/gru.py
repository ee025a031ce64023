"""Gated recurrent unit with a masked, batched unroll and its exact backward pass."""

from __future__ import annotations

import numpy as np

from .layers import DTYPE, ConfigurationError, Param, glorot_uniform, sigmoid


class GruCell:
    """GRU cell with update gate z, reset gate r and candidate state.

    Weights are stored fused along the last axis in (z, r, candidate) order:
    ``W`` is input_dim x 3H, ``U`` is H x 3H and ``b`` has length 3H.

        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        c = tanh(x W_h + (r * h) U_h + b_h)
        h' = (1 - z) * h + z * c
    """

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        if input_dim <= 0 or hidden_dim <= 0:
            raise ConfigurationError(f"{name}: dims must be positive")
        self.name = name
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        H = hidden_dim
        if rng is None:
            w = np.zeros((input_dim, 3 * H))
            u = np.zeros((H, 3 * H))
        else:
            w = np.concatenate([glorot_uniform(rng, input_dim, H) for _ in range(3)], axis=1)
            u = np.concatenate([glorot_uniform(rng, H, H) for _ in range(3)], axis=1)
        self.W = Param(f"{name}.W", w)
        self.U = Param(f"{name}.U", u)
        self.b = Param(f"{name}.b", np.zeros(3 * H))

    def params(self) -> list[Param]:
        return [self.W, self.U, self.b]

    def gate(self, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W, U, b) slices for gate ``'z'``, ``'r'`` or ``'h'``."""
        k = "zrh".index(which)
        sl = slice(k * self.hidden_dim, (k + 1) * self.hidden_dim)
        return self.W.value[:, sl], self.U.value[:, sl], self.b.value[sl]

    def step(self, h: np.ndarray, x: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=DTYPE)
        x = np.asarray(x, dtype=DTYPE)
        if h.shape[-1] != self.hidden_dim or x.shape[-1] != self.input_dim:
            raise ConfigurationError(
                f"{self.name}: expected input {self.input_dim}/hidden {self.hidden_dim}, "
                f"got {x.shape[-1]}/{h.shape[-1]}")
        H = self.hidden_dim
        a = x @ self.W.value + self.b.value
        zr = sigmoid(a[..., :2 * H] + h @ self.U.value[:, :2 * H])
        z, r = zr[..., :H], zr[..., H:]
        c = np.tanh(a[..., 2 * H:] + (r * h) @ self.U.value[:, 2 * H:])
        return (1.0 - z) * h + z * c

    def forward_seq(self, x: np.ndarray, mask: np.ndarray | None = None, h0: np.ndarray | None = None):
        """Unroll over ``x`` of shape (B, L, input_dim).

        Positions where ``mask`` is 0 leave the hidden state unchanged, so a
        right-padded batch ends on each row's last real step. Returns the
        hidden states (B, L, H) and a cache for :meth:`backward_seq`.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ConfigurationError(f"{self.name}: expected (B, L, {self.input_dim}) input, got {x.shape}")
        B, L, _ = x.shape
        H = self.hidden_dim
        m = np.ones((B, L), dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
        h = np.zeros((B, H), dtype=DTYPE) if h0 is None else np.array(h0, dtype=DTYPE).reshape(B, H)
        # Right-padded masks: sort rows by length so the live rows at step t
        # are a prefix and padded rows are skipped instead of masked.
        lengths = m.sum(axis=1).astype(np.int64)
        prefix = bool(np.all(m == (np.arange(L)[None, :] < lengths[:, None])))
        order = np.argsort(-lengths, kind="stable") if prefix else np.arange(B)
        live = (lengths[order][None, :] > np.arange(L)[:, None]).sum(axis=1) if prefix else np.full(L, B)
        mt = None if prefix else np.ascontiguousarray(m[order].T)[:, :, None]
        h = h[order]
        h_init = h.copy()
        xt = np.ascontiguousarray(x[order].transpose(1, 0, 2))
        a = xt @ self.W.value + self.b.value
        U_zr = self.U.value[:, :2 * H]
        U_h = self.U.value[:, 2 * H:]
        hs = np.empty((L, B, H), dtype=DTYPE)
        zs = np.zeros((L, B, H), dtype=DTYPE)
        rs = np.zeros((L, B, H), dtype=DTYPE)
        cs = np.zeros((L, B, H), dtype=DTYPE)
        for t in range(L):
            n = live[t]
            if n:
                hp = h[:n]
                zr = sigmoid(a[t, :n, :2 * H] + hp @ U_zr)
                z, r = zr[:, :H], zr[:, H:]
                c = np.tanh(a[t, :n, 2 * H:] + (r * hp) @ U_h)
                step = z * (c - hp)
                if mt is not None:
                    step *= mt[t]
                h[:n] = hp + step
                zs[t, :n], rs[t, :n], cs[t, :n] = z, r, c
            hs[t] = h
        inverse = np.argsort(order)
        out = hs.transpose(1, 0, 2)[inverse]
        return out, (xt, mt, live, order, inverse, h_init, hs, zs, rs, cs)

    def backward_seq(self, dhs: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        """Backprop hidden-state gradients (B, L, H); returns (dx, dh0)."""
        xt, mt, live, order, inverse, h_init, hs, zs, rs, cs = cache
        L, B, _ = xt.shape
        H = self.hidden_dim
        U_zr = self.U.value[:, :2 * H]
        U_h = self.U.value[:, 2 * H:]
        g = np.ascontiguousarray(np.asarray(dhs, dtype=DTYPE)[order].transpose(1, 0, 2))
        da = np.zeros((L, B, 3 * H), dtype=DTYPE)
        dU = np.zeros_like(self.U.value)
        dh = np.zeros((B, H), dtype=DTYPE)
        for t in range(L - 1, -1, -1):
            dh += g[t]
            n = live[t]
            if not n:
                continue
            hp = hs[t - 1, :n] if t > 0 else h_init[:n]
            z, r, c = zs[t, :n], rs[t, :n], cs[t, :n]
            dn = dh[:n] if mt is None else dh[:n] * mt[t]
            dz = dn * (c - hp)
            dc = dn * z
            dac = dc * (1.0 - c * c)
            drh = dac @ U_h.T
            dazr = np.concatenate([dz * z * (1.0 - z), drh * hp * r * (1.0 - r)], axis=1)
            dh[:n] = dh[:n] - dn * z + drh * r + dazr @ U_zr.T
            dU[:, 2 * H:] += (r * hp).T @ dac
            dU[:, :2 * H] += hp.T @ dazr
            da[t, :n, :2 * H] = dazr
            da[t, :n, 2 * H:] = dac
        self.U.grad += dU
        da2 = da.reshape(-1, 3 * H)
        self.W.grad += xt.reshape(-1, self.input_dim).T @ da2
        self.b.grad += da2.sum(axis=0)
        dx = (da @ self.W.value.T).transpose(1, 0, 2)[inverse]
        return dx, dh[inverse]

    def backward_last(self, dh_last: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        L, B, H = cache[6].shape
        dhs = np.zeros((B, L, H), dtype=DTYPE)
        dhs[:, -1] = dh_last
        return self.backward_seq(dhs, cache)


def gru_forward(cell: GruCell, inputs, h0) -> list[np.ndarray]:
    """Run ``cell`` over a sequence of input vectors; returns every hidden state.

    An empty input sequence returns an empty list (the final state is then h0).
    """
    h0 = np.asarray(h0, dtype=DTYPE)
    if h0.shape != (cell.hidden_dim,):
        raise ConfigurationError(f"{cell.name}: h0 must have length {cell.hidden_dim}, got {h0.shape}")
    inputs = [np.asarray(v, dtype=DTYPE) for v in inputs]
    if not inputs:
        return []
    for v in inputs:
        if v.shape != (cell.input_dim,):
            raise ConfigurationError(f"{cell.name}: inputs must have length {cell.input_dim}, got {v.shape}")
    hs, _ = cell.forward_seq(np.stack(inputs)[None], None, h0[None])
    return list(hs[0])
