"""Parameters, embedding tables, dense layers and elementwise functions.

Layers follow a forward/backward convention: ``forward`` returns the output
and a cache, ``backward`` takes the upstream gradient and the cache,
accumulates parameter gradients in place and returns the input gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

DTYPE = np.float64
LOG_LOSS_EPS = 1e-7

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")


class ConfigurationError(ValueError):
    """Raised on dimension or option mismatches when wiring layers."""


def sigmoid(x):
    """Logistic function; scalars in, scalars out."""
    out = expit(np.asarray(x, dtype=DTYPE))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return -np.logaddexp(0.0, -x)


def log_loss(p, y, eps: float = LOG_LOSS_EPS):
    """Per-sample binary log-loss with the probability clipped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=DTYPE), eps, 1.0 - eps)
    y = np.asarray(y, dtype=DTYPE)
    out = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    return out if out.ndim else float(out)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log-loss computed from logits and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    n = max(logits.size, 1)
    loss = np.sum(np.logaddexp(0.0, logits) - labels * logits) / n
    grad = (sigmoid(logits) - labels) / n
    return float(loss), np.asarray(grad)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)).astype(DTYPE)


class Param:
    """A dense trainable tensor with its gradient buffer and Adagrad accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.grad_accum = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class EmbeddingTable:
    """Row-indexed embedding matrix with sparse gradient accumulation.

    Gradients are collected as (ids, rows) pairs by :meth:`accumulate` and
    reduced per unique id by :meth:`sparse_grad`, so the optimizer can touch
    only the rows a batch actually used.
    """

    def __init__(self, name: str, rows: int, dim: int, rng: np.random.Generator | None = None,
                 values: np.ndarray | None = None, trainable: bool = True):
        if rows <= 0 or dim <= 0:
            raise ConfigurationError(f"embedding table {name!r} needs positive shape, got ({rows}, {dim})")
        self.name = name
        self.rows = rows
        self.dim = dim
        self.trainable = trainable
        if values is not None:
            values = np.array(values, dtype=DTYPE)
            if values.shape != (rows, dim):
                raise ConfigurationError(f"{name}: values shape {values.shape} != ({rows}, {dim})")
            self.values = values
        elif rng is None:
            self.values = np.zeros((rows, dim), dtype=DTYPE)
        else:
            limit = 0.05 / np.sqrt(dim)
            self.values = rng.uniform(-limit, limit, size=(rows, dim)).astype(DTYPE)
        self.grad_accum = np.zeros_like(self.values)
        self._pending_ids: list[np.ndarray] = []
        self._pending_rows: list[np.ndarray] = []

    @property
    def size(self) -> int:
        return self.values.size

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise IndexError(f"{self.name}: id out of range [0, {self.rows})")
        return self.values[ids]

    def accumulate(self, ids, grad_rows) -> None:
        if not self.trainable:
            return
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        grad_rows = np.asarray(grad_rows, dtype=DTYPE).reshape(-1, self.dim)
        self._pending_ids.append(ids)
        self._pending_rows.append(grad_rows)

    def sparse_grad(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique touched ids (sorted) and their summed gradient rows."""
        if not self._pending_ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.dim), dtype=DTYPE)
        ids = np.concatenate(self._pending_ids)
        rows = np.concatenate(self._pending_rows)
        uniq, inverse = np.unique(ids, return_inverse=True)
        summed = np.zeros((uniq.size, self.dim), dtype=DTYPE)
        np.add.at(summed, inverse, rows)
        return uniq, summed

    def dense_grad(self) -> np.ndarray:
        ids, rows = self.sparse_grad()
        out = np.zeros_like(self.values)
        out[ids] = rows
        return out

    def zero_grad(self) -> None:
        self._pending_ids.clear()
        self._pending_rows.clear()

    def __repr__(self) -> str:
        return f"EmbeddingTable({self.name!r}, rows={self.rows}, dim={self.dim})"


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return np.tanh(z)


def _activation_grad(a: np.ndarray, activation: str) -> np.ndarray:
    # expressed through the activation output
    if activation == "identity":
        return np.ones_like(a)
    if activation == "relu":
        return (a > 0).astype(DTYPE)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


class DenseLayer:
    def __init__(self, name: str, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}; allowed: {ACTIVATIONS}")
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigurationError(f"{name}: dims must be positive, got {in_dim}->{out_dim}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        w = glorot_uniform(rng, in_dim, out_dim) if rng is not None else np.zeros((in_dim, out_dim))
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"{self.name}: expected input dim {self.in_dim}, got {x.shape[-1]}")
        a = _activate(x @ self.weight.value + self.bias.value, self.activation)
        return a, (x, a)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        x, a = cache
        dz = dout * _activation_grad(a, self.activation)
        x2 = x.reshape(-1, self.in_dim)
        dz2 = dz.reshape(-1, self.out_dim)
        self.weight.grad += x2.T @ dz2
        self.bias.grad += dz2.sum(axis=0)
        return dz @ self.weight.value.T


class Mlp:
    """Stack of relu dense layers ending in a single linear logit unit."""

    def __init__(self, name: str, in_dim: int, hidden: list[int] | tuple[int, ...],
                 rng: np.random.Generator | None = None):
        dims = [in_dim, *hidden]
        self.layers = [DenseLayer(f"{name}.{i}", dims[i], dims[i + 1], "relu", rng)
                       for i in range(len(hidden))]
        self.layers.append(DenseLayer(f"{name}.out", dims[-1], 1, "identity", rng))

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x[..., 0], caches

    def backward(self, dlogit: np.ndarray, caches) -> np.ndarray:
        d = dlogit[..., None]
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            d = layer.backward(d, c)
        return d
