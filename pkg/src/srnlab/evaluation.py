"""Metrics and analyses: AUC, log-loss, retargeting ratio, stratified AUC,
intra/inter-category embedding similarity, plus report/table rendering."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .nncore import log_loss
from .retarget import RETARGET_THRESHOLD, normalize_rows


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Undefined:
    """Marker for a metric that has no value on the given data."""

    reason: str

    def to_json(self) -> dict:
        return {"undefined": self.reason}


def auc(scores, labels) -> float:
    """Rank-sum AUC with ties credited one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in length: {s.size} vs {y.size}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise MetricError("log-loss of an empty set")
    return float(np.mean(log_loss(p, np.asarray(labels).reshape(-1))))


def retargeting_ratio(diagnostics, seq_type: str | None = None, threshold: float = RETARGET_THRESHOLD) -> float:
    """Fraction of samples whose max similarity exceeds ``threshold``.

    ``diagnostics`` is either an array of per-sample max similarities or a
    mapping from sequence type to such arrays (then ``seq_type`` picks one).
    """
    s_max = diagnostics[seq_type] if isinstance(diagnostics, Mapping) else diagnostics
    s_max = np.asarray(s_max, dtype=np.float64).reshape(-1)
    if s_max.size == 0:
        return 0.0
    return float(np.mean(s_max > threshold))


@dataclass
class StratifiedAuc:
    retargeted: float | Undefined
    others: float | Undefined
    n_retargeted: int
    n_others: int

    def to_json(self) -> dict:
        enc = lambda v: v.to_json() if isinstance(v, Undefined) else v
        return {"retargeted": {"auc": enc(self.retargeted), "n": self.n_retargeted},
                "others": {"auc": enc(self.others), "n": self.n_others}}


def _auc_or_marker(scores, labels, name) -> float | Undefined:
    try:
        return auc(scores, labels)
    except MetricError as exc:
        return Undefined(f"{name}: {exc}")


def stratified_auc(scores, labels, s_max, threshold: float = RETARGET_THRESHOLD) -> StratifiedAuc:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    hit = np.asarray(s_max, dtype=np.float64) > threshold
    return StratifiedAuc(_auc_or_marker(scores[hit], labels[hit], "retargeted"),
                         _auc_or_marker(scores[~hit], labels[~hit], "others"),
                         int(hit.sum()), int((~hit).sum()))


def embedding_quality(embeddings: np.ndarray, item_category: np.ndarray, top_k_categories: int = 100,
                      items_per_category: int = 100, seed: int = 0,
                      popularity: np.ndarray | None = None) -> tuple[float, float]:
    """Mean intra- and inter-category cosine over a per-category item sample.

    ``embeddings`` and ``item_category`` are indexed by item id; id 0 and
    items without a category are ignored. Categories are ranked by
    ``popularity`` (per-item click counts, summed per category) or by item
    count when it is not given.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    cat = np.asarray(item_category, dtype=np.int64)
    ids = np.flatnonzero(cat > 0)
    ids = ids[ids > 0]
    weight = np.ones(cat.size) if popularity is None else np.asarray(popularity, dtype=np.float64)
    cats = np.unique(cat[ids])
    score = np.array([weight[ids[cat[ids] == c]].sum() for c in cats])
    order = np.lexsort((cats, -score))
    chosen = cats[order[:top_k_categories]]
    rng = np.random.default_rng(seed)
    groups = []
    for c in chosen:
        members = ids[cat[ids] == c]
        if members.size > items_per_category:
            members = np.sort(rng.choice(members, items_per_category, replace=False))
        if members.size >= 2:
            groups.append(members)
    if len(groups) < 2:
        sizes = {int(c): int(np.sum(cat[ids] == c)) for c in chosen}
        raise MetricError(f"need at least 2 categories with 2+ items, got sizes {sizes}")
    sample = np.concatenate(groups)
    label = np.concatenate([np.full(g.size, k) for k, g in enumerate(groups)])
    unit = normalize_rows(emb[sample])
    sim = unit @ unit.T
    same = label[:, None] == label[None, :]
    np.fill_diagonal(same, False)
    other = label[:, None] != label[None, :]
    intra = (sim * same).sum(axis=1) / same.sum(axis=1)
    inter = (sim * other).sum(axis=1) / other.sum(axis=1)
    return float(intra.mean()), float(inter.mean())


# ------------------------------------------------------------------------ reports

@dataclass
class EvalReport:
    model: str
    auc: float
    logloss: float
    n_samples: int
    strata: dict = field(default_factory=dict)
    retargeting_ratios: dict = field(default_factory=dict)
    hrn_retargeting_ratios: dict = field(default_factory=dict)
    config_hash: str = ""
    timestamp: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def evaluate_predictions(model_name: str, probs, labels, s_max: Mapping[str, np.ndarray],
                         hrn_s_max: Mapping[str, np.ndarray], timestamps, config_hash: str = "",
                         threshold: float = RETARGET_THRESHOLD, primary_type: str = "item") -> EvalReport:
    """Build a report; strata use the model's own max similarity when it has one."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    strat_source = s_max if s_max else hrn_s_max
    strata = {}
    for t, values in strat_source.items():
        strata[t] = stratified_auc(probs, labels, values, threshold).to_json()
    timestamps = np.asarray(timestamps)
    return EvalReport(
        model=model_name,
        auc=auc(probs, labels),
        logloss=logloss(probs, labels),
        n_samples=int(labels.size),
        strata=strata,
        retargeting_ratios={t: retargeting_ratio(v, threshold=threshold) for t, v in s_max.items()},
        hrn_retargeting_ratios={t: retargeting_ratio(v, threshold=threshold) for t, v in hrn_s_max.items()},
        config_hash=config_hash,
        timestamp=int(timestamps.max()) if timestamps.size else 0,
        extra={"threshold": threshold},
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, dict) and "undefined" in v:
        return "undefined"
    return str(v)


def format_table(rows: Sequence[Mapping], columns: Sequence[str], title: str | None = None) -> str:
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    line = lambda row: "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = ([title] if title else []) + [line(cells[0]), rule] + [line(r) for r in cells[1:]]
    return "\n".join(out) + "\n"


def to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()
