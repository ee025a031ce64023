"""Hard and soft retargeting units.

The hard variant counts exact id matches between the target and the user's
history. The soft variant replaces the match indicator with a gated cosine
between frozen graph embeddings, embeds each position's binned cosine (its
"ripple" id), and summarises the sequence two ways: a similarity-weighted sum
of ripple embeddings and the final state of a GRU run over them.

Single-sample functions mirror the textbook definitions and serve as oracles;
:class:`SrnLayer` is the batched, differentiable version used by the models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import bin_index, binning
from .nncore import DTYPE, ConfigurationError, EmbeddingTable, GruCell, Param, log_sigmoid, sigmoid

RIPPLE_WIDTH = 0.01
RIPPLE_MIN_BIN = -99
RIPPLE_MAX_BIN = 101
RIPPLE_ROWS = RIPPLE_MAX_BIN - RIPPLE_MIN_BIN + 1
NORM_FLOOR = 1e-12
RETARGET_THRESHOLD = 0.5

GATE_MODES = ("learned", "constant_one")
AGGREGATIONS = ("weighted", "sum_binning")
EMBEDDING_SOURCES = ("graph", "ctr")


@dataclass
class SimilaritySequence:
    weights: np.ndarray
    cosines: np.ndarray
    ripple_ids: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.cosines) == len(self.ripple_ids)):
            raise ValueError("weights, cosines and ripple_ids must have equal length")

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class RetargetOutput:
    s_max: float
    I_S: np.ndarray
    G_S: np.ndarray
    n_s: float = 0.0
    hrn_feature_id: str = "1"
    similarity: SimilaritySequence | None = None

    @property
    def I_SRN(self) -> np.ndarray:
        return np.concatenate([self.I_S, self.G_S])


# ------------------------------------------------------------------------ hard

def hrn_similarity(target_id: int, sequence_ids) -> SimilaritySequence:
    """Exact-match indicator per history position."""
    seq = np.asarray(sequence_ids, dtype=np.int64).reshape(-1)
    w = (seq == int(target_id)).astype(DTYPE)
    return SimilaritySequence(w, w.copy(), ripple_ids(w))


def hrn_aggregate(weights, cap: int | None = None) -> tuple[float, str, float]:
    """(match count, count bin id, max weight); an empty sequence gives (0, "1", 0).

    ``cap`` bounds the bin id, so counts of ``cap`` or more share the top bin.
    """
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    n_s = float(w.sum())
    s_max = float(w.max()) if w.size else 0.0
    fid = binning(n_s, 1.0)
    if cap is not None and int(fid) > cap:
        fid = str(cap)
    return n_s, fid, s_max


def hrn_counts(target: np.ndarray, seq: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Batched match counts for (B,) targets against (B, L) histories."""
    hit = (seq == target[:, None]) & mask & (target[:, None] > 0)
    return hit.sum(axis=1)


def hrn_bins(counts: np.ndarray, cap: int) -> np.ndarray:
    return np.minimum(bin_index(counts, 1.0), cap)


# ------------------------------------------------------------------------ soft

def cosine_similarity(a, b) -> float:
    """Cosine of two vectors, or 0 when either has (near) zero norm."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Unit rows; rows with norm below the floor become zero."""
    x = np.asarray(x, dtype=DTYPE)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n < NORM_FLOOR, 0.0, x / np.maximum(n, NORM_FLOOR))


class SimilarityGateParams:
    """Positive (w, b) for one sequence type, stored as logs of free parameters."""

    def __init__(self, name: str, w: float = 10.0, b: float = 9.0):
        if not (w > 0 and b > 0):
            raise ConfigurationError(f"{name}: gate w and b must be positive, got ({w}, {b})")
        self.name = name
        self.log_w = Param(f"{name}.log_w", np.log(w))
        self.log_b = Param(f"{name}.log_b", np.log(b))

    @property
    def w(self) -> float:
        return float(np.exp(self.log_w.value))

    @property
    def b(self) -> float:
        return float(np.exp(self.log_b.value))

    def params(self) -> list[Param]:
        return [self.log_w, self.log_b]

    def crossing(self, level: float = RETARGET_THRESHOLD) -> float:
        """Cosine at which the gate output equals ``level``."""
        w, b = self.w, self.b
        v = level * sigmoid(w - b)
        return float((b + np.log(v / (1.0 - v))) / w)


def gate_forward(cos, w: float, b: float):
    """F(c) = sigmoid(w c - b) / sigmoid(w - b) with its partial derivatives.

    Returns (F, dF/dc, dF/dw, dF/db). F(1) is exactly 1 because numerator and
    denominator are then evaluated on the same float.
    """
    c = np.asarray(cos, dtype=DTYPE)
    u = w * c - b
    v = w - b
    f = np.exp(log_sigmoid(u) - log_sigmoid(v))
    gu = 1.0 - sigmoid(u)
    gv = 1.0 - sigmoid(v)
    return f, f * gu * w, f * (gu * c - gv), f * (gv - gu)


def similarity_gate(cosine, params: SimilarityGateParams):
    f = gate_forward(cosine, params.w, params.b)[0]
    return f if np.ndim(f) else float(f)


def ripple_index(cosines) -> np.ndarray:
    """Row of the ripple table for each cosine (bin id shifted to start at 0)."""
    c = np.clip(np.asarray(cosines, dtype=DTYPE), -1.0, 1.0)
    return bin_index(c, RIPPLE_WIDTH) - RIPPLE_MIN_BIN


def ripple_ids(cosines) -> list[str]:
    return [binning(float(c), RIPPLE_WIDTH) for c in np.asarray(cosines, dtype=DTYPE).reshape(-1)]


def weight_aggregation(weights, ripple_embeddings) -> np.ndarray:
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    e = np.asarray(ripple_embeddings, dtype=DTYPE)
    if w.size == 0:
        return np.zeros(e.shape[-1] if e.ndim == 2 else 0, dtype=DTYPE)
    return w @ e


def retarget_evolution(ripple_embeddings, cell: GruCell) -> np.ndarray:
    e = np.asarray(ripple_embeddings, dtype=DTYPE)
    if e.size == 0:
        return np.zeros(cell.hidden_dim, dtype=DTYPE)
    hs, _ = cell.forward_seq(e[None], None, None)
    return hs[0, -1]


def srn_forward(target_vectors: dict[str, np.ndarray], sequence_vectors: dict[str, np.ndarray],
                layers: dict, target_ids: dict[str, int] | None = None,
                sequence_ids: dict[str, np.ndarray] | None = None) -> dict[str, RetargetOutput]:
    """Per-type soft retargeting for one sample.

    ``target_vectors[t]`` is the target's graph vector, ``sequence_vectors[t]``
    the (n, D) vectors of its history, ``layers[t]`` an :class:`SrnLayer`.
    When ids are given, positions holding the target id itself get cosine 1.
    """
    out = {}
    for t, layer in layers.items():
        tv = np.asarray(target_vectors[t], dtype=DTYPE)
        sv = np.asarray(sequence_vectors[t], dtype=DTYPE).reshape(-1, tv.size)
        cos = np.array([cosine_similarity(tv, v) for v in sv], dtype=DTYPE)
        if target_ids is not None and sequence_ids is not None:
            cos[np.asarray(sequence_ids[t]) == target_ids[t]] = 1.0
        n = cos.size
        I, _, G, diag = layer.forward(cos.reshape(1, n), np.ones((1, n), bool))
        weights = diag["weights"][0]
        sim = SimilaritySequence(weights, cos, ripple_ids(cos))
        n_s = float(weights.sum())
        out[t] = RetargetOutput(s_max=float(weights.max()) if n else 0.0, I_S=I[0],
                                G_S=G[0] if G is not None else np.zeros(0),
                                n_s=n_s, hrn_feature_id=binning(n_s, 1.0), similarity=sim)
    return out


# --------------------------------------------------------------------- batched

@dataclass
class SrnOptions:
    gate_mode: str = "learned"
    aggregation: str = "weighted"
    use_gru: bool = True
    bin_cap: int = 101
    extras: dict = field(default_factory=dict)

    def validate(self) -> list[str]:
        errors = []
        if self.gate_mode not in GATE_MODES:
            errors.append(f"gate_mode={self.gate_mode!r}; allowed: {', '.join(GATE_MODES)}")
        if self.aggregation not in AGGREGATIONS:
            errors.append(f"aggregation={self.aggregation!r}; allowed: {', '.join(AGGREGATIONS)}")
        if self.bin_cap < 1:
            errors.append("bin_cap must be at least 1")
        return errors


class SrnLayer:
    """Soft retargeting for one sequence type over a right-padded batch.

    Input is a (B, L) cosine matrix and a validity mask; output is the
    aggregated vector (B, dim) and, with the GRU enabled, the evolution
    state (B, hidden). Backward returns the cosine gradient so callers whose
    cosines come from trainable embeddings can continue the chain.
    """

    def __init__(self, name: str, dim: int, hidden: int, gate_init: tuple[float, float],
                 rng: np.random.Generator | None, options: SrnOptions | None = None):
        self.name = name
        self.options = options or SrnOptions()
        errors = self.options.validate()
        if errors:
            raise ConfigurationError(f"{name}: " + "; ".join(errors))
        self.dim = dim
        self.hidden = hidden
        self.gate = SimilarityGateParams(f"{name}.gate", *gate_init)
        self.ripple = EmbeddingTable(f"{name}.ripple", RIPPLE_ROWS, dim, rng)
        self.sum_bins = None
        if self.options.aggregation == "sum_binning":
            self.sum_bins = EmbeddingTable(f"{name}.sum_bins", self.options.bin_cap + 1, dim, rng)
        self.cell = GruCell(f"{name}.gru", dim, hidden, rng) if self.options.use_gru else None

    @property
    def out_dim(self) -> int:
        return self.dim + (self.hidden if self.cell is not None else 0)

    def params(self) -> list[Param]:
        ps = list(self.gate.params()) if self.options.gate_mode == "learned" else []
        if self.cell is not None:
            ps += self.cell.params()
        return ps

    def all_params(self) -> list[Param]:
        return self.gate.params() + (self.cell.params() if self.cell is not None else [])

    def tables(self) -> list[EmbeddingTable]:
        return [self.ripple] + ([self.sum_bins] if self.sum_bins is not None else [])

    def weights(self, cos: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if self.options.gate_mode == "constant_one":
            return mask.astype(DTYPE)
        return gate_forward(cos, self.gate.w, self.gate.b)[0] * mask

    def forward(self, cos: np.ndarray, mask: np.ndarray):
        """Returns (I_S, cache, G_S or None, diagnostics)."""
        cos = np.clip(np.asarray(cos, dtype=DTYPE), -1.0, 1.0)
        mask = np.asarray(mask, dtype=bool)
        m = mask.astype(DTYPE)
        if self.options.gate_mode == "constant_one":
            s, ds_dc, ds_dw, ds_db = m, None, None, None
        else:
            f, ds_dc, ds_dw, ds_db = gate_forward(cos, self.gate.w, self.gate.b)
            s = f * m
        idx = ripple_index(cos)
        e = self.ripple.lookup(idx)
        if self.options.aggregation == "weighted":
            I = np.einsum("bl,bld->bd", s, e)
            bins = None
        else:
            bins = np.minimum(bin_index(s.sum(axis=1), 1.0), self.options.bin_cap)
            I = self.sum_bins.lookup(bins)
        G, gcache = None, None
        if self.cell is not None:
            hs, gcache = self.cell.forward_seq(e, m)
            G = hs[:, -1] if hs.shape[1] else np.zeros((cos.shape[0], self.hidden))
        s_max = np.where(mask.any(axis=1), s.max(axis=1, initial=0.0), 0.0) if s.size else np.zeros(len(s))
        diag = {"weights": s, "s_max": s_max}
        cache = (cos, m, s, ds_dc, ds_dw, ds_db, idx, e, bins, gcache)
        return I, cache, G, diag

    def backward(self, dI: np.ndarray, dG: np.ndarray | None, cache) -> np.ndarray:
        """Accumulate parameter gradients; return d loss / d cosine (B, L)."""
        cos, m, s, ds_dc, ds_dw, ds_db, idx, e, bins, gcache = cache
        de = np.zeros_like(e)
        dcos = np.zeros_like(cos)
        if self.options.aggregation == "weighted":
            de += s[:, :, None] * dI[:, None, :]
            ds = np.einsum("bd,bld->bl", dI, e) * m
            if ds_dc is not None:
                self.gate.log_w.grad += np.sum(ds * ds_dw) * self.gate.w
                self.gate.log_b.grad += np.sum(ds * ds_db) * self.gate.b
                dcos = ds * ds_dc
        else:
            self.sum_bins.accumulate(bins, dI)
        if self.cell is not None and dG is not None and e.shape[1]:
            dx, _ = self.cell.backward_last(dG, gcache)
            de += dx
        keep = m.astype(bool)
        self.ripple.accumulate(idx[keep], de[keep])
        return dcos
