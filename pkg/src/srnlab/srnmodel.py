"""CTR models (DNN base, +HRN, +SRN and its ablations), training and configuration.

Every model shares the same base feature vector::

    [user | target entity per type | mean-pooled history per type]

HRN appends one count-bin embedding per type and SRN appends the soft
retargeting output per type, so the base features are always a prefix of
the richer models' input.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImpressionSet
from .graphembed import GraphEmbeddingDict
from .nncore import (
    DTYPE,
    Adagrad,
    ConfigurationError,
    EmbeddingTable,
    Mlp,
    Param,
    bce_with_logits,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .retarget import (
    AGGREGATIONS,
    EMBEDDING_SOURCES,
    GATE_MODES,
    NORM_FLOOR,
    SrnLayer,
    SrnOptions,
    hrn_bins,
    hrn_counts,
    normalize_rows,
)

log = logging.getLogger(__name__)

MODELS = ("dnn", "hrn", "srn")
VARIANTS = {
    "none": {},
    "wo_gru": {"use_gru": False},
    "wo_ge": {"embedding_source": "ctr"},
    "wo_sim_gate": {"gate_mode": "constant_one"},
    "binning": {"aggregation": "sum_binning"},
}


class TrainingError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class SrnConfig:
    model: str = "srn"
    types: tuple[str, ...] | None = None
    max_len: int = 100
    ctr_dim: int = 8
    graph_dim: int = 32
    gru_hidden: int = 8
    mlp_layers: tuple[int, ...] = (64, 32)
    lr: float = 0.01
    gate_item: tuple[float, float] = (10.0, 9.0)
    gate_side: tuple[float, float] = (10.0, 8.0)
    use_gru: bool = True
    embedding_source: str = "graph"
    gate_mode: str = "learned"
    aggregation: str = "weighted"
    hrn_cap: int | None = None
    freeze_graph: bool = True
    seed: int = 0
    epochs: int = 2
    batch_size: int = 256
    clip_norm: float | None = None

    def errors(self) -> list[str]:
        errs = []
        if self.model not in MODELS:
            errs.append(f"model={self.model!r}; allowed: {', '.join(MODELS)}")
        for name in ("max_len", "ctr_dim", "graph_dim", "gru_hidden", "batch_size"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            errs.append(f"epochs must be non-negative, got {self.epochs}")
        if any(w <= 0 for w in self.mlp_layers):
            errs.append(f"mlp_layers widths must be positive, got {list(self.mlp_layers)}")
        if not self.lr >= 0:
            errs.append(f"lr must be non-negative, got {self.lr}")
        for name in ("gate_item", "gate_side"):
            pair = getattr(self, name)
            if len(pair) != 2 or min(pair) <= 0:
                errs.append(f"{name} must be two positive numbers (w, b), got {pair}")
        if self.embedding_source not in EMBEDDING_SOURCES:
            errs.append(f"embedding_source={self.embedding_source!r}; allowed: {', '.join(EMBEDDING_SOURCES)}")
        if self.gate_mode not in GATE_MODES:
            errs.append(f"gate_mode={self.gate_mode!r}; allowed: {', '.join(GATE_MODES)}")
        if self.aggregation not in AGGREGATIONS:
            errs.append(f"aggregation={self.aggregation!r}; allowed: {', '.join(AGGREGATIONS)}")
        if self.hrn_cap is not None and self.hrn_cap < 1:
            errs.append(f"hrn_cap must be at least 1, got {self.hrn_cap}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            errs.append(f"clip_norm must be positive, got {self.clip_norm}")
        return errs

    def validate(self) -> SrnConfig:
        errs = self.errors()
        if errs:
            raise ConfigurationError("invalid model config:\n  " + "\n  ".join(errs))
        return self

    @property
    def bin_cap(self) -> int:
        return self.hrn_cap if self.hrn_cap is not None else self.max_len + 1

    def gate_init(self, seq_type: str) -> tuple[float, float]:
        return tuple(self.gate_item if seq_type == "item" else self.gate_side)

    def replace(self, **changes) -> SrnConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> SrnConfig:
        kwargs, errs = coerce_fields(cls, mapping, "model")
        if errs:
            raise ConfigurationError("invalid model config:\n  " + "\n  ".join(errs))
        return cls(**kwargs).validate()


def ablation_config(base: SrnConfig, variant: str) -> SrnConfig:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; allowed: {', '.join(VARIANTS)}")
    if variant != "none" and base.model != "srn":
        raise ConfigurationError(f"variant {variant!r} only applies to model=srn")
    return base.replace(**VARIANTS[variant]) if VARIANTS[variant] else base


def _parse_value(text: str, default, annotation: str):
    text = text.strip()
    if text.lower() in ("none", "null", "") and ("None" in annotation or default is None):
        return None
    probe = default
    if probe is None:
        probe = 0.0 if "float" in annotation else 0 if "int" in annotation else ""
    if isinstance(probe, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(probe, int) and "float" not in annotation:
        return int(text)
    if isinstance(probe, float):
        return float(text)
    if isinstance(probe, tuple) or "tuple" in annotation:
        parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
        elem = "float" if "float" in annotation else "int" if "int" in annotation else "str"
        conv = {"float": float, "int": int, "str": str}[elem]
        return tuple(conv(p) for p in parts)
    return text


def coerce_fields(cls, mapping: dict, section: str) -> tuple[dict, list[str]]:
    """Convert string or native values to the dataclass field types.

    Returns the kwargs and a list of every problem found, naming each bad key
    and the allowed keys.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs, errs = {}, []
    for key, raw in mapping.items():
        if key not in fields:
            errs.append(f"[{section}] unknown key {key!r}; allowed: {', '.join(sorted(fields))}")
            continue
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if not isinstance(raw, str):
            kwargs[key] = tuple(raw) if isinstance(raw, list) else raw
            continue
        try:
            kwargs[key] = _parse_value(raw, default, str(f.type))
        except ValueError as exc:
            errs.append(f"[{section}] {key}: {exc}")
    return kwargs, errs


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    return {s: dict(parser.items(s)) for s in parser.sections()}


# ------------------------------------------------------------------------- model

def _component_rng(seed: int, name: str) -> np.random.Generator:
    # a stream per component keeps shared components identical across model kinds
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def resolve_types(config: SrnConfig, available) -> tuple[str, ...]:
    types = tuple(config.types) if config.types else tuple(available)
    missing = [t for t in types if t not in available]
    if missing:
        raise ConfigurationError(f"sequence types {missing} not present in data; available: {list(available)}")
    return types


def feature_dim(config: SrnConfig, n_types: int) -> int:
    d = config.ctr_dim
    base = d + 2 * n_types * d
    if config.model == "hrn":
        return base + n_types * d
    if config.model == "srn":
        per = d + (config.gru_hidden if config.use_gru else 0)
        return base + n_types * per
    return base


def param_count(config: SrnConfig, vocab_sizes: dict[str, int], types) -> int:
    """Number of trainable scalars a :class:`CtrModel` will allocate."""
    d, H = config.ctr_dim, config.gru_hidden
    n = len(types)
    total = vocab_sizes["user"] * d + sum(vocab_sizes[t] * d for t in types)
    if config.model == "hrn":
        total += n * (config.bin_cap + 1) * d
    if config.model == "srn":
        per = 2 + 201 * d
        if config.aggregation == "sum_binning":
            per += (config.bin_cap + 1) * d
        if config.use_gru:
            per += d * 3 * H + H * 3 * H + 3 * H
        total += n * per
        if config.embedding_source == "graph" and not config.freeze_graph:
            total += sum(vocab_sizes[t] * config.graph_dim for t in types)
    dims = [feature_dim(config, n), *config.mlp_layers, 1]
    total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return int(total)


@dataclass
class Batch:
    user: np.ndarray
    label: np.ndarray
    target: dict[str, np.ndarray]
    seq: dict[str, np.ndarray]
    mask: np.ndarray
    cos: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user)


class EncodedSet:
    """Impressions with ids clamped to the model vocabulary and cosines precomputed."""

    def __init__(self, data: ImpressionSet, types, rows: dict[str, int], cos: dict[str, np.ndarray]):
        self.data = data
        self.types = types
        self.user = np.where(data.user < rows["user"], data.user, 0)
        self.target = {t: np.where(data.target[t] < rows[t], data.target[t], 0) for t in types}
        self.seq = {t: np.where(data.seq[t] < rows[t], data.seq[t], 0) for t in types}
        self.length = data.length
        self.label = data.label.astype(DTYPE)
        self.cos = cos

    def __len__(self) -> int:
        return len(self.user)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        width = max(1, int(self.length[idx].max()) if idx.size else 1)
        mask = np.arange(width)[None, :] < self.length[idx, None]
        return Batch(self.user[idx], self.label[idx], {t: v[idx] for t, v in self.target.items()},
                     {t: v[idx, :width] for t, v in self.seq.items()}, mask,
                     {t: v[idx, :width] for t, v in self.cos.items()})


def graph_cosines(vectors: np.ndarray, target: np.ndarray, seq: np.ndarray, mask: np.ndarray,
                  chunk: int = 8192) -> np.ndarray:
    """(N, L) cosines between each target row and its history rows.

    Positions holding the target id itself are set to exactly 1; padding and
    zero vectors give 0.
    """
    unit = normalize_rows(vectors)
    out = np.zeros(seq.shape, dtype=DTYPE)
    for s in range(0, len(target), chunk):
        t = target[s:s + chunk]
        q = seq[s:s + chunk]
        c = np.einsum("nd,nld->nl", unit[t], unit[q])
        c = np.clip(c, -1.0, 1.0)
        c[(q == t[:, None]) & (t[:, None] > 0)] = 1.0
        out[s:s + chunk] = c * mask[s:s + chunk]
    return out


class CtrModel:
    def __init__(self, config: SrnConfig, vocab_sizes: dict[str, int], types,
                 graph: GraphEmbeddingDict | None = None, zero_init: bool = False):
        config.validate()
        self.config = config
        self.types = tuple(types)
        self.vocab_sizes = {k: int(v) for k, v in vocab_sizes.items()}
        self.rows = {k: max(1, v) for k, v in self.vocab_sizes.items()}
        d = config.ctr_dim
        rng = (lambda name: None) if zero_init else (lambda name: _component_rng(config.seed, name))
        self.user = EmbeddingTable("emb.user", self.rows["user"], d, rng("emb.user"))
        self.entity = {t: EmbeddingTable(f"emb.{t}", self.rows[t], d, rng(f"emb.{t}")) for t in self.types}
        self.hrn = {}
        self.srn = {}
        self.graph = graph
        self.graph_tables = {}
        if config.model == "hrn":
            self.hrn = {t: EmbeddingTable(f"hrn.{t}", config.bin_cap + 1, d, rng(f"hrn.{t}")) for t in self.types}
        if config.model == "srn":
            opts = SrnOptions(config.gate_mode, config.aggregation, config.use_gru, config.bin_cap)
            self.srn = {t: SrnLayer(f"srn.{t}", d, config.gru_hidden, config.gate_init(t), rng(f"srn.{t}"), opts)
                        for t in self.types}
            if config.embedding_source == "graph":
                if graph is None:
                    raise ConfigurationError("model=srn with embedding_source=graph needs graph embeddings")
                if graph.dim != config.graph_dim:
                    raise ConfigurationError(f"graph embeddings have dim {graph.dim}, config says {config.graph_dim}")
                if not config.freeze_graph:
                    self.graph_tables = {
                        t: EmbeddingTable(f"ge.{t}", self.rows[t], graph.dim,
                                          values=graph.lookup(t, np.arange(self.rows[t])))
                        for t in self.types}
        self.in_dim = feature_dim(config, len(self.types))
        self.mlp = Mlp("mlp", self.in_dim, list(config.mlp_layers), rng("mlp"))

    # parameters -------------------------------------------------------------
    def params(self) -> list[Param]:
        ps = self.mlp.params()
        for layer in self.srn.values():
            ps += layer.params()
        return ps

    def all_params(self) -> list[Param]:
        ps = self.mlp.params()
        for layer in self.srn.values():
            ps += layer.all_params()
        return ps

    def tables(self) -> list[EmbeddingTable]:
        ts = [self.user, *self.entity.values(), *self.hrn.values(), *self.graph_tables.values()]
        for layer in self.srn.values():
            ts += layer.tables()
        return ts

    def num_parameters(self) -> int:
        return sum(p.size for p in self.all_params()) + sum(t.size for t in self.tables())

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.all_params()}
        out.update({t.name: t.values for t in self.tables()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for p in self.all_params():
            state[p.name] = p.value
            state[p.name + ".accum"] = p.grad_accum
        for t in self.tables():
            state[t.name] = t.values
            state[t.name + ".accum"] = t.grad_accum
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for obj in [*self.all_params(), *self.tables()]:
            target = obj.value if isinstance(obj, Param) else obj.values
            target[...] = state[obj.name]
            obj.grad_accum[...] = state[obj.name + ".accum"]

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()
        for t in self.tables():
            t.zero_grad()

    # data -------------------------------------------------------------------
    def encode(self, data: ImpressionSet) -> EncodedSet:
        missing = [t for t in self.types if t not in data.types]
        if missing:
            raise ConfigurationError(f"impressions lack sequence types {missing}")
        enc = EncodedSet(data, self.types, self.rows, {})
        if self.srn and self.config.embedding_source == "graph" and self.config.freeze_graph:
            mask = data.mask
            for t in self.types:
                vectors = self.graph.lookup(t, np.arange(self.rows[t]))
                enc.cos[t] = graph_cosines(vectors, enc.target[t], enc.seq[t], mask)
        return enc

    # forward / backward -----------------------------------------------------
    def _cosine_source(self, t: str) -> EmbeddingTable | None:
        if self.config.embedding_source == "ctr":
            return self.entity[t]
        return self.graph_tables.get(t)

    def _dynamic_cos(self, table: EmbeddingTable, target, seq, mask):
        a = table.lookup(target)
        b = table.lookup(seq)
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        ah = a / np.maximum(na, NORM_FLOOR)[:, None]
        bh = b / np.maximum(nb, NORM_FLOOR)[..., None]
        cos = np.einsum("bd,bld->bl", ah, bh)
        live = mask & (na[:, None] >= NORM_FLOOR) & (nb >= NORM_FLOOR)
        same = (seq == target[:, None]) & (target[:, None] > 0) & mask
        live &= ~same & (np.abs(cos) < 1.0)
        cos = np.where(live, np.clip(cos, -1.0, 1.0), 0.0)
        cos[same] = 1.0
        return cos, (table, target, seq, ah, bh, na, nb, cos, live)

    @staticmethod
    def _dynamic_cos_backward(dcos, cache) -> None:
        table, target, seq, ah, bh, na, nb, cos, live = cache
        g = np.where(live, dcos, 0.0)
        da = np.einsum("bl,bld->bd", g, bh - cos[..., None] * ah[:, None, :]) / np.maximum(na, NORM_FLOOR)[:, None]
        db = g[..., None] * (ah[:, None, :] - cos[..., None] * bh) / np.maximum(nb, NORM_FLOOR)[..., None]
        table.accumulate(target, da)
        table.accumulate(seq[live], db[live])

    def forward(self, batch: Batch):
        """Logits (B,) and a cache for :meth:`backward`."""
        mask = batch.mask
        m = mask.astype(DTYPE)
        length = np.maximum(m.sum(axis=1), 1.0)
        feats = [self.user.lookup(batch.user)]
        for t in self.types:
            feats.append(self.entity[t].lookup(batch.target[t]))
        for t in self.types:
            se = self.entity[t].lookup(batch.seq[t])
            feats.append(np.einsum("bld,bl->bd", se, m) / length[:, None])
        hrn_ids = {}
        for t in self.hrn:
            hrn_ids[t] = hrn_bins(hrn_counts(batch.target[t], batch.seq[t], mask), self.config.bin_cap)
            feats.append(self.hrn[t].lookup(hrn_ids[t]))
        srn_cache = {}
        diag = {}
        for t, layer in self.srn.items():
            source = self._cosine_source(t)
            if source is None:
                cos, ccache = batch.cos[t], None
            else:
                cos, ccache = self._dynamic_cos(source, batch.target[t], batch.seq[t], mask)
            I, lcache, G, d = layer.forward(cos, mask)
            feats.append(I)
            if G is not None:
                feats.append(G)
            srn_cache[t] = (lcache, ccache)
            diag[t] = {"s_max": d["s_max"], "weights": d["weights"], "cos": cos}
        x = np.concatenate(feats, axis=1)
        logits, mcache = self.mlp.forward(x)
        return logits, (batch, m, length, hrn_ids, srn_cache, mcache, diag)

    def backward(self, dlogits: np.ndarray, cache) -> None:
        batch, m, length, hrn_ids, srn_cache, mcache, _ = cache
        dx = self.mlp.backward(dlogits, mcache)
        d = self.config.ctr_dim
        pos = 0

        def take(width):
            nonlocal pos
            out = dx[:, pos:pos + width]
            pos += width
            return out

        self.user.accumulate(batch.user, take(d))
        for t in self.types:
            self.entity[t].accumulate(batch.target[t], take(d))
        for t in self.types:
            g = take(d) / length[:, None]
            keep = m.astype(bool)
            rows = np.broadcast_to(g[:, None, :], (*m.shape, d))
            self.entity[t].accumulate(batch.seq[t][keep], rows[keep])
        for t in self.hrn:
            self.hrn[t].accumulate(hrn_ids[t], take(d))
        for t, layer in self.srn.items():
            dI = take(layer.dim)
            dG = take(layer.hidden) if layer.cell is not None else None
            lcache, ccache = srn_cache[t]
            dcos = layer.backward(dI, dG, lcache)
            if ccache is not None:
                self._dynamic_cos_backward(dcos, ccache)

    def loss_and_backward(self, batch: Batch) -> float:
        logits, cache = self.forward(batch)
        loss, dlogits = bce_with_logits(logits, batch.label)
        self.backward(dlogits, cache)
        return loss

    def loss_and_grads(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        """Loss and dense gradients keyed like :meth:`param_arrays` (for checks)."""
        self.zero_grad()
        loss = self.loss_and_backward(batch)
        grads = {p.name: p.grad.copy() for p in self.all_params()}
        grads.update({t.name: t.dense_grad() for t in self.tables()})
        self.zero_grad()
        return loss, grads

    def predict_batch(self, batch: Batch):
        logits, cache = self.forward(batch)
        return sigmoid(logits), cache[-1]


# ----------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CtrModel
    history: list[dict]
    checkpoints: list[Path]


def build_model(config: SrnConfig, data: ImpressionSet, graph: GraphEmbeddingDict | None = None) -> CtrModel:
    types = resolve_types(config, data.types)
    return CtrModel(config, data.vocab_sizes, types, graph)


def _batches(n: int, size: int, order: np.ndarray):
    for s in range(0, n, size):
        yield order[s:s + size]


def train(config: SrnConfig, train_set: ImpressionSet, graph: GraphEmbeddingDict | None = None,
          run_dir=None, model: CtrModel | None = None) -> TrainResult:
    """Mini-batch Adagrad on log-loss.

    Batch order comes from ``(seed, epoch)`` so reruns are bitwise identical.
    With ``run_dir`` a checkpoint is written after every epoch and one line
    per epoch is appended to ``metrics.jsonl``.
    """
    config.validate()
    model = model or build_model(config, train_set, graph)
    enc = model.encode(train_set)
    opt = Adagrad(config.lr, clip_norm=config.clip_norm)
    params = model.params()
    tables = model.tables()
    history, checkpoints = [], []
    run_dir = Path(run_dir) if run_dir is not None else None
    last_ckpt = None
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(enc))
        total, count = 0.0, 0
        for idx in _batches(len(enc), config.batch_size, order):
            batch = enc.batch(idx)
            loss = model.loss_and_backward(batch)
            if not math.isfinite(loss):
                model.zero_grad()
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}", last_ckpt)
            opt.step(params, tables)
            total += loss * len(idx)
            count += len(idx)
            step += 1
        entry = {"epoch": epoch + 1, "train_loss": total / max(count, 1), "steps": step}
        history.append(entry)
        log.info("epoch %d train_loss %.6f", epoch + 1, entry["train_loss"])
        if run_dir is not None:
            last_ckpt = save_model(model, run_dir / f"checkpoint_epoch{epoch + 1}.ckpt",
                                   {"epoch": epoch + 1, "step": step})
            checkpoints.append(last_ckpt)
            with open(run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(model, history, checkpoints)


def save_model(model: CtrModel, path, extra: dict | None = None) -> Path:
    meta = {"seed": model.config.seed, "config_hash": model.config.config_hash(),
            "config": model.config.to_dict(), "types": list(model.types),
            "vocab_sizes": model.vocab_sizes, **(extra or {})}
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path, graph: GraphEmbeddingDict | None = None) -> CtrModel:
    state, meta = load_checkpoint(path)
    cfg = dict(meta["config"])
    config = SrnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    model = CtrModel(config, meta["vocab_sizes"], meta["types"], graph, zero_init=True)
    model.load_state(state)
    return model


@dataclass
class Prediction:
    probs: np.ndarray
    labels: np.ndarray
    s_max: dict[str, np.ndarray]
    hrn_s_max: dict[str, np.ndarray]


def predict(model: CtrModel, data: ImpressionSet, batch_size: int = 4096, keep_details: bool = False):
    """Probabilities plus per-type max similarity (model's and exact-match)."""
    enc = model.encode(data)
    n = len(enc)
    probs = np.zeros(n, dtype=DTYPE)
    s_max = {t: np.zeros(n, dtype=DTYPE) for t in model.srn}
    details = []
    for idx in _batches(n, batch_size, np.arange(n)):
        batch = enc.batch(idx)
        p, diag = model.predict_batch(batch)
        probs[idx] = p
        for t in model.srn:
            s_max[t][idx] = diag[t]["s_max"]
        if keep_details:
            details.append((idx, batch, diag))
    hrn = {t: (hrn_counts(enc.target[t], enc.seq[t], data.mask) > 0).astype(DTYPE) for t in model.types}
    out = Prediction(probs, data.label.astype(np.int64), s_max, hrn)
    return (out, details) if keep_details else out


def evaluate_model(model: CtrModel, data: ImpressionSet, name: str | None = None):
    from .evaluation import evaluate_predictions

    pred = predict(model, data)
    return evaluate_predictions(name or model.config.model, pred.probs, pred.labels, pred.s_max,
                                pred.hrn_s_max, data.timestamp, model.config.config_hash())


def run_ablation(base: SrnConfig, variant: str, train_set: ImpressionSet, test_set: ImpressionSet,
                 graph: GraphEmbeddingDict | None = None, run_dir=None) -> dict:
    """Train and evaluate one ablation variant of an SRN config."""
    config = ablation_config(base.replace(model="srn") if base.model != "srn" else base, variant)
    result = train(config, train_set, graph, run_dir)
    report = evaluate_model(result.model, test_set, "srn" if variant == "none" else f"srn_{variant}")
    return {"variant": variant, "auc": report.auc, "logloss": report.logloss,
            "config_hash": config.config_hash(), "report": report, "history": result.history}
