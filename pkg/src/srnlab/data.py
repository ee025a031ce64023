"""Click logs, behavior sequences, labeled impressions and the planted-signal generator.

Entity ids are dense integers starting at 1; id 0 is reserved for missing
or out-of-vocabulary values in every table. Events and impressions are
stored column-wise but behave like sequences of :class:`ClickEvent` /
:class:`ImpressionRecord`.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SEQ_TYPES = ("item", "brand", "shop", "category")
SIDE_TYPES = ("brand", "shop", "category")
BEHAVIORS = ("click", "display")
SECONDS_PER_DAY = 86400


class DataError(ValueError):
    pass


def binning(x: float, z: float) -> str:
    """Equal-width bin id ``floor(x / z) + 1`` rendered as a string.

    No epsilon nudging is applied, so values sitting exactly on a bin edge
    after floating-point division land wherever the division rounds.
    """
    if not z > 0:
        raise ValueError(f"bin width must be positive, got {z}")
    return str(math.floor(x / z) + 1)


def bin_index(x, z: float) -> np.ndarray:
    """Vectorized :func:`binning` returning integer bin ids."""
    if not z > 0:
        raise ValueError(f"bin width must be positive, got {z}")
    return np.floor(np.asarray(x, dtype=np.float64) / z).astype(np.int64) + 1


# --------------------------------------------------------------------------- events

@dataclass(frozen=True)
class ClickEvent:
    user_id: int
    item_id: int
    timestamp: int
    behavior: str = "click"
    brand_id: int | None = None
    shop_id: int | None = None
    category_id: int | None = None

    def __post_init__(self):
        if not self.timestamp > 0:
            raise DataError(f"timestamp must be positive, got {self.timestamp}")
        if self.behavior not in BEHAVIORS:
            raise DataError(f"behavior must be one of {BEHAVIORS}, got {self.behavior!r}")


class Vocab:
    """Raw id -> dense id mapping; dense ids are assigned from 1 in first-seen order."""

    def __init__(self, raw_ids=()):
        self.to_dense: dict[str, int] = {}
        self.to_raw: list[str] = [""]
        for raw in raw_ids:
            self.add(raw)

    def add(self, raw) -> int:
        raw = str(raw)
        dense = self.to_dense.get(raw)
        if dense is None:
            dense = len(self.to_raw)
            self.to_dense[raw] = dense
            self.to_raw.append(raw)
        return dense

    def __len__(self) -> int:
        return len(self.to_raw) - 1

    def raw(self, dense: int) -> str:
        return self.to_raw[dense]

    def save(self, path) -> None:
        lines = [f"{raw}\t{dense}" for dense, raw in enumerate(self.to_raw) if dense]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path) -> Vocab:
        vocab = cls()
        for line in Path(path).read_text().splitlines():
            if not line:
                continue
            raw, dense = line.split("\t")
            if int(dense) != vocab.add(raw):
                raise DataError(f"{path}: dense ids must be contiguous from 1")
        return vocab


class EventTable:
    """Column store of click/display events; iterating yields :class:`ClickEvent`."""

    def __init__(self, user, item, timestamp, click, brand=None, shop=None, category=None,
                 vocabs: dict[str, Vocab] | None = None):
        n = len(user)
        self.user = np.asarray(user, dtype=np.int64)
        self.item = np.asarray(item, dtype=np.int64)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.click = np.asarray(click, dtype=bool)
        zeros = np.zeros(n, dtype=np.int64)
        self.side = {
            "brand": zeros.copy() if brand is None else np.asarray(brand, dtype=np.int64),
            "shop": zeros.copy() if shop is None else np.asarray(shop, dtype=np.int64),
            "category": zeros.copy() if category is None else np.asarray(category, dtype=np.int64),
        }
        self.vocabs = vocabs or {}
        for name, col in [("item", self.item), ("timestamp", self.timestamp), ("click", self.click),
                          *self.side.items()]:
            if len(col) != n:
                raise DataError(f"column {name} has length {len(col)}, expected {n}")
        if n and self.timestamp.min() <= 0:
            raise DataError("timestamps must be strictly positive")

    @classmethod
    def from_events(cls, events) -> EventTable:
        events = list(events)
        col = lambda attr: [getattr(e, attr) or 0 for e in events]
        return cls([e.user_id for e in events], [e.item_id for e in events],
                   [e.timestamp for e in events], [e.behavior == "click" for e in events],
                   brand=col("brand_id"), shop=col("shop_id"), category=col("category_id"))

    def __len__(self) -> int:
        return len(self.user)

    def __getitem__(self, i: int) -> ClickEvent:
        side = {f"{t}_id": (int(v[i]) or None) for t, v in self.side.items()}
        return ClickEvent(int(self.user[i]), int(self.item[i]), int(self.timestamp[i]),
                          "click" if self.click[i] else "display", **side)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def side_types(self) -> tuple[str, ...]:
        return tuple(t for t in SIDE_TYPES if np.any(self.side[t] > 0))

    @property
    def seq_types(self) -> tuple[str, ...]:
        return ("item", *self.side_types)

    @property
    def click_only(self) -> bool:
        return bool(np.all(self.click))

    def entity(self, kind: str) -> np.ndarray:
        return self.item if kind == "item" else self.side[kind]

    def subset(self, mask_or_index) -> EventTable:
        idx = np.asarray(mask_or_index)
        return EventTable(self.user[idx], self.item[idx], self.timestamp[idx], self.click[idx],
                          **{t: v[idx] for t, v in self.side.items()}, vocabs=self.vocabs)

    def sorted(self) -> EventTable:
        order = np.lexsort((self.item, self.timestamp, self.user))
        return self.subset(order)

    def clicks(self) -> EventTable:
        return self.subset(self.click)

    def vocab_sizes(self) -> dict[str, int]:
        """Rows needed per entity table (max dense id + 1, at least 2)."""
        sizes = {}
        for kind in ("user", *SEQ_TYPES):
            col = self.user if kind == "user" else self.entity(kind)
            size = int(col.max()) if len(col) else 0
            if kind in self.vocabs:
                size = max(size, len(self.vocabs[kind]))
            sizes[kind] = max(size, 1) + 1
        return sizes

    def item_side_info(self) -> dict[str, np.ndarray]:
        """Per side type, an array mapping item id -> side id (first occurrence wins)."""
        n = int(self.item.max()) + 1 if len(self) else 1
        out = {}
        _, first = np.unique(self.item, return_index=True)
        for t, col in self.side.items():
            arr = np.zeros(n, dtype=np.int64)
            arr[self.item[first]] = col[first]
            out[t] = arr
        return out

    def to_tsv(self, path) -> None:
        header = "user_id\titem_id\tbrand_id\tshop_id\tcategory_id\ttimestamp\tbehavior"
        cols = np.stack([self.user, self.item, self.side["brand"], self.side["shop"],
                         self.side["category"], self.timestamp], axis=1)
        beh = np.where(self.click, "click", "display")
        lines = [header] + ["\t".join(map(str, row)) + "\t" + b for row, b in zip(cols.tolist(), beh)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_tsv(cls, path) -> EventTable:
        lines = Path(path).read_text().splitlines()[1:]
        rows = [ln.split("\t") for ln in lines if ln]
        if not rows:
            return cls([], [], [], [])
        ints = np.array([r[:6] for r in rows], dtype=np.int64)
        click = np.array([r[6] == "click" for r in rows])
        return cls(ints[:, 0], ints[:, 1], ints[:, 5], click,
                   brand=ints[:, 2], shop=ints[:, 3], category=ints[:, 4])


class IngestError(DataError):
    pass


def ingest_taobao(path, out_dir=None, click_only: bool = True, click_types=("pv",),
                  max_reject_rate: float = 0.01) -> EventTable:
    """Read ``user_id,item_id,category_id,behavior_type,timestamp`` lines.

    Ids are remapped to dense vocabularies. Malformed lines go to
    ``rejects.tsv`` (line number, reason, raw text); more than
    ``max_reject_rate`` of all lines rejected is fatal. With ``click_only``
    only rows whose behavior is in ``click_types`` survive. When ``out_dir``
    is given, vocab TSVs and the rejects file are written there.
    """
    vocabs = {k: Vocab() for k in ("user", "item", "category")}
    cols = {k: [] for k in ("user", "item", "category", "timestamp")}
    rejects = []
    n_lines = 0
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            n_lines += 1
            parts = line.split(",")
            if len(parts) != 5:
                rejects.append((line_no, f"expected 5 fields, got {len(parts)}", line))
                continue
            user, item, cat, behavior, ts = (p.strip() for p in parts)
            try:
                ts_val = int(ts)
            except ValueError:
                rejects.append((line_no, "non-integer timestamp", line))
                continue
            if ts_val <= 0:
                rejects.append((line_no, "non-positive timestamp", line))
                continue
            if not (user and item and cat and behavior):
                rejects.append((line_no, "empty field", line))
                continue
            if click_only and behavior not in click_types:
                dropped += 1
                continue
            cols["user"].append(vocabs["user"].add(user))
            cols["item"].append(vocabs["item"].add(item))
            cols["category"].append(vocabs["category"].add(cat))
            cols["timestamp"].append(ts_val)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for kind, vocab in vocabs.items():
            vocab.save(out / f"vocab_{kind}.tsv")
        body = "".join(f"{no}\t{reason}\t{raw}\n" for no, reason, raw in rejects)
        (out / "rejects.tsv").write_text("line\treason\traw\n" + body)
    if n_lines and len(rejects) / n_lines > max_reject_rate:
        raise IngestError(f"{len(rejects)} of {n_lines} lines rejected "
                          f"(> {max_reject_rate:.1%}); see rejects file")
    log.info("ingested %d events (%d non-click dropped, %d rejected)",
             len(cols["user"]), dropped, len(rejects))
    n = len(cols["user"])
    events = EventTable(cols["user"], cols["item"], cols["timestamp"], np.ones(n, dtype=bool),
                        category=cols["category"], vocabs=vocabs)
    events.rejects = rejects
    return events


# ---------------------------------------------------------------------- impressions

@dataclass
class BehaviorSequence:
    entity_ids: list[int] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.entity_ids) != len(self.timestamps):
            raise DataError("entity_ids and timestamps must be parallel")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise DataError("behavior sequence timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.entity_ids)


@dataclass
class ImpressionRecord:
    user_id: int
    target: dict[str, int]
    label: int
    timestamp: int
    sequences: dict[str, BehaviorSequence]


class ImpressionSet:
    """Column store of labeled impressions with right-padded behavior sequences.

    ``seq[t]`` is (N, width) with width <= max_len, the oldest click first and zeros after
    ``length``; all types share ``seq_ts`` because they come from the same
    clicks.
    """

    def __init__(self, types, user, label, timestamp, target, seq, seq_ts, length,
                 vocab_sizes: dict[str, int], max_len: int):
        self.types = tuple(types)
        self.user = np.asarray(user, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int8)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.target = {t: np.asarray(target[t], dtype=np.int64) for t in self.types}
        self.seq = {t: np.asarray(seq[t], dtype=np.int64) for t in self.types}
        self.seq_ts = np.asarray(seq_ts, dtype=np.int64)
        self.length = np.asarray(length, dtype=np.int64)
        self.vocab_sizes = dict(vocab_sizes)
        self.max_len = int(max_len)

    def __len__(self) -> int:
        return len(self.user)

    def __getitem__(self, i: int) -> ImpressionRecord:
        k = int(self.length[i])
        ts = self.seq_ts[i, :k].tolist()
        return ImpressionRecord(
            user_id=int(self.user[i]),
            target={t: int(self.target[t][i]) for t in self.types},
            label=int(self.label[i]),
            timestamp=int(self.timestamp[i]),
            sequences={t: BehaviorSequence(self.seq[t][i, :k].tolist(), list(ts)) for t in self.types},
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.seq_ts.shape[1])[None, :] < self.length[:, None]

    def subset(self, idx) -> ImpressionSet:
        idx = np.asarray(idx)
        return ImpressionSet(self.types, self.user[idx], self.label[idx], self.timestamp[idx],
                             {t: v[idx] for t, v in self.target.items()},
                             {t: v[idx] for t, v in self.seq.items()}, self.seq_ts[idx],
                             self.length[idx], self.vocab_sizes, self.max_len)

    def leakage_violations(self) -> int:
        """Count sequence positions whose timestamp is not strictly before the impression."""
        return int(np.sum(self.mask & (self.seq_ts >= self.timestamp[:, None])))

    # binary record format ------------------------------------------------------
    def write(self, path) -> None:
        path = Path(path)
        T = len(self.types)
        head = struct.Struct(f"<qqb{T}qI")
        with open(path, "wb") as fh:
            for i in range(len(self)):
                k = int(self.length[i])
                payload = head.pack(int(self.user[i]), int(self.timestamp[i]), int(self.label[i]),
                                    *(int(self.target[t][i]) for t in self.types), k)
                payload += b"".join(self.seq[t][i, :k].astype("<i8").tobytes() for t in self.types)
                payload += self.seq_ts[i, :k].astype("<i8").tobytes()
                fh.write(struct.pack("<I", len(payload)))
                fh.write(payload)
        schema = {
            "format": "srnlab-impressions",
            "version": 1,
            "count": len(self),
            "types": list(self.types),
            "max_len": self.max_len,
            "width": int(self.seq_ts.shape[1]),
            "vocab_sizes": self.vocab_sizes,
            "record": {
                "prefix": "uint32 little-endian payload length",
                "payload": ["int64 user_id", "int64 timestamp", "int8 label",
                            *(f"int64 target_{t}" for t in self.types), "uint32 seq_len",
                            *(f"int64[seq_len] seq_{t}" for t in self.types), "int64[seq_len] seq_timestamps"],
            },
        }
        path.with_name(path.name + ".schema.json").write_text(json.dumps(schema, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> ImpressionSet:
        path = Path(path)
        schema = json.loads(path.with_name(path.name + ".schema.json").read_text())
        types = tuple(schema["types"])
        T, L, n = len(types), schema.get("width", schema["max_len"]), schema["count"]
        head = struct.Struct(f"<qqb{T}qI")
        raw = path.read_bytes()
        user = np.zeros(n, np.int64)
        ts = np.zeros(n, np.int64)
        label = np.zeros(n, np.int8)
        target = {t: np.zeros(n, np.int64) for t in types}
        seq = {t: np.zeros((n, L), np.int64) for t in types}
        seq_ts = np.zeros((n, L), np.int64)
        length = np.zeros(n, np.int64)
        pos = 0
        for i in range(n):
            (size,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            vals = head.unpack_from(raw, pos)
            user[i], ts[i], label[i] = vals[0], vals[1], vals[2]
            for j, t in enumerate(types):
                target[t][i] = vals[3 + j]
            k = vals[-1]
            length[i] = k
            off = pos + head.size
            for t in types:
                seq[t][i, :k] = np.frombuffer(raw, "<i8", k, off)
                off += 8 * k
            seq_ts[i, :k] = np.frombuffer(raw, "<i8", k, off)
            pos += size
        if pos != len(raw):
            raise DataError(f"{path}: trailing bytes after {n} records")
        return cls(types, user, label, ts, target, seq, seq_ts, length, schema["vocab_sizes"], schema["max_len"])


def build_impressions(events: EventTable, max_len: int = 100, negative_ratio: int = 4,
                      seed: int = 0, types=None) -> ImpressionSet:
    """Turn an event log into labeled impressions with leakage-free histories.

    Each impression's sequences hold the user's clicks strictly before the
    impression timestamp, truncated to the most recent ``max_len``. For
    click-only logs every click is a positive and ``negative_ratio``
    uniformly drawn other items (with their side info) become negatives
    sharing its history; otherwise labels come from the log.
    """
    if max_len <= 0:
        raise DataError("max_len must be positive")
    types = tuple(types or events.seq_types)
    events = events.sorted()
    click_only = events.click_only
    sizes = events.vocab_sizes()
    n_items = sizes["item"] - 1
    if click_only and negative_ratio > 0 and n_items < 2:
        raise DataError("negative sampling needs at least two items")
    side_of = events.item_side_info()
    reps = 1 + negative_ratio if click_only else 1
    N = len(events) * reps
    # columns beyond the longest possible history would always be padding
    clicks_per_user = np.bincount(events.user[events.click]) if events.click.any() else np.zeros(1, np.int64)
    width = max(1, min(max_len, int(clicks_per_user.max())))
    user = np.repeat(events.user, reps)
    ts = np.repeat(events.timestamp, reps)
    label = np.zeros(N, np.int8)
    target = {t: np.zeros(N, np.int64) for t in types}
    seq = {t: np.zeros((N, width), np.int64) for t in types}
    seq_ts = np.zeros((N, width), np.int64)
    length = np.zeros(N, np.int64)

    bounds = np.flatnonzero(np.diff(events.user)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(events)]])
    for s, e in zip(starts, ends):
        u = int(events.user[s])
        ev_ts = events.timestamp[s:e]
        cmask = events.click[s:e]
        c_ts = ev_ts[cmask]
        c_ids = {t: events.entity(t)[s:e][cmask] for t in types}
        n_prior = np.searchsorted(c_ts, ev_ts, side="left")
        if click_only:
            rng = np.random.default_rng([seed, u])
            pos_items = events.item[s:e]
            neg = rng.integers(1, n_items, size=(e - s, negative_ratio))
            neg = neg + (neg >= pos_items[:, None])
            items = np.concatenate([pos_items[:, None], neg], axis=1).reshape(-1)
            lab = np.zeros((e - s, reps), np.int8)
            lab[:, 0] = 1
            rows = slice(s * reps, e * reps)
            label[rows] = lab.reshape(-1)
            for t in types:
                target[t][rows] = items if t == "item" else side_of[t][np.minimum(items, len(side_of[t]) - 1)]
        else:
            rows = slice(s, e)
            label[rows] = cmask
            for t in types:
                target[t][rows] = events.entity(t)[s:e]
        for j in range(e - s):
            hi = int(n_prior[j])
            lo = max(0, hi - max_len)
            k = hi - lo
            if k == 0:
                continue
            r0 = (s + j) * reps
            r1 = r0 + reps
            length[r0:r1] = k
            seq_ts[r0:r1, :k] = c_ts[lo:hi]
            for t in types:
                seq[t][r0:r1, :k] = c_ids[t][lo:hi]
    return ImpressionSet(types, user, label, ts, target, seq, seq_ts, length, sizes, max_len)


class SplitError(DataError):
    pass


def time_split(impressions: ImpressionSet, boundary: int) -> tuple[ImpressionSet, ImpressionSet]:
    """Records strictly before ``boundary`` train, the rest test."""
    before = impressions.timestamp < boundary
    n_train, n_test = int(before.sum()), int((~before).sum())
    if n_train == 0 or n_test == 0:
        raise SplitError(f"empty split at boundary {boundary}: train={n_train}, test={n_test}")
    return impressions.subset(np.flatnonzero(before)), impressions.subset(np.flatnonzero(~before))


def split_events(events: EventTable, boundary: int) -> tuple[EventTable, EventTable]:
    before = events.timestamp < boundary
    return events.subset(before), events.subset(~before)


# ------------------------------------------------------------------------ synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    """Planted retargeting signal.

    Latent item vectors form a hierarchy: groups of related categories,
    categories, products within a category, items within a product.
    Impressions favour items related to one of the user's recent clicks, and a
    displayed item is clicked with probability
    ``base_ctr * retarget_boost ** max_cos`` where ``max_cos`` is the largest
    latent cosine between the target and the last ``recent_k`` clicks.
    """

    n_users: int = 800
    n_items: int = 1000
    n_categories: int = 40
    latent_dim: int = 32
    retarget_boost: float = 8.0
    base_ctr: float = 0.05
    events_per_user: int = 150
    seed: int = 0
    categories_per_group: int = 2
    products_per_category: int = 5
    category_spread: float = 0.6
    product_spread: float = 0.7
    item_spread: float = 0.33
    recent_k: int = 20
    anchor_window: int = 20
    retarget_rate: float = 0.5
    # exact item, same product, same category, related category
    anchor_mix: tuple[float, float, float, float] = (0.15, 0.3, 0.25, 0.3)
    session_continue: float = 0.8
    days: int = 8
    start_ts: int = 1_494_000_000

    def validate(self) -> None:
        errors = []
        for name in ("n_users", "n_items", "n_categories", "latent_dim", "events_per_user",
                     "categories_per_group", "products_per_category", "recent_k", "anchor_window", "days"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if self.recent_k > self.anchor_window:
            errors.append("recent_k must not exceed anchor_window")
        if self.retarget_boost < 1:
            errors.append("retarget_boost must be >= 1")
        if not 0 < self.base_ctr < 1:
            errors.append("base_ctr must lie in (0, 1)")
        if not 0 <= self.retarget_rate <= 1:
            errors.append("retarget_rate must lie in [0, 1]")
        if len(self.anchor_mix) != 4 or min(self.anchor_mix) < 0 or not math.isclose(sum(self.anchor_mix), 1.0):
            errors.append("anchor_mix must be four non-negative weights summing to 1")
        if self.n_items < self.n_categories * self.products_per_category:
            errors.append("need at least one item per product")
        if errors:
            raise DataError("; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_mix"] = list(self.anchor_mix)
        return d

    @property
    def test_boundary(self) -> int:
        """Start of the final day, the natural train/test boundary."""
        return self.start_ts + (self.days - 1) * SECONDS_PER_DAY


@dataclass
class SyntheticData:
    events: EventTable
    latents: np.ndarray        # (n_items + 1, latent_dim), unit rows, row 0 zero
    item_category: np.ndarray  # (n_items + 1,)
    item_product: np.ndarray   # (n_items + 1,)
    category_group: np.ndarray  # (n_categories + 1,)
    click_prob: np.ndarray     # per event, aligned with ``events``
    spec: SyntheticSpec


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def simulate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, P, d = spec.n_categories, spec.products_per_category, spec.latent_dim
    G = -(-C // spec.categories_per_group)
    n_items = spec.n_items

    cat = rng.permutation(np.arange(n_items) % C)
    prod = np.zeros(n_items, np.int64)
    for c in range(C):
        members = np.flatnonzero(cat == c)
        prod[members] = c * P + np.arange(members.size) % P
    cat_group = np.arange(C) // spec.categories_per_group
    noise = lambda n: rng.normal(size=(n, d)) / np.sqrt(d)
    group_centers = _unit(rng.normal(size=(G, d)))
    cat_centers = _unit(group_centers[cat_group] + spec.category_spread * noise(C))
    prod_centers = _unit(cat_centers[np.arange(C * P) // P] + spec.product_spread * noise(C * P))
    latents = _unit(prod_centers[prod] + spec.item_spread * noise(n_items))
    item_category = np.concatenate([[0], cat + 1])
    item_product = np.concatenate([[0], prod + 1])
    latents = np.vstack([np.zeros(d), latents])

    members_of_cat = [np.flatnonzero(item_category == c + 1) for c in range(C)]
    members_of_prod = [np.flatnonzero(item_product == p + 1) for p in range(C * P)]
    related_of_cat = []
    for c in range(C):
        peers = np.flatnonzero((cat_group == cat_group[c]) & (np.arange(C) != c))
        pool = np.concatenate([members_of_cat[q] for q in peers]) if peers.size else members_of_cat[c]
        related_of_cat.append(pool)

    U, E, W, K = spec.n_users, spec.events_per_user, spec.anchor_window, spec.recent_k
    hist = np.zeros((U, W), np.int64)  # newest click last
    count = np.zeros(U, np.int64)
    users = np.arange(U)
    targets = np.zeros((U, E), np.int64)
    clicks = np.zeros((U, E), bool)
    probs = np.zeros((U, E))
    for step in range(E):
        target = rng.integers(1, n_items + 1, size=U)
        has = count > 0
        retarget = has & (rng.random(U) < spec.retarget_rate)
        window = np.minimum(count, W)
        pick = W - 1 - np.floor(rng.random(U) * np.maximum(window, 1)).astype(np.int64)
        anchor = hist[users, pick]
        mode = rng.choice(4, size=U, p=spec.anchor_mix)
        u_pick = rng.random(U)
        for u in np.flatnonzero(retarget):
            a = anchor[u]
            if mode[u] == 0:
                target[u] = a
                continue
            if mode[u] == 1:
                pool = members_of_prod[item_product[a] - 1]
            elif mode[u] == 2:
                pool = members_of_cat[item_category[a] - 1]
            else:
                pool = related_of_cat[item_category[a] - 1]
            target[u] = pool[int(u_pick[u] * pool.size)]
        recent = hist[:, W - K:]
        rmask = np.arange(K)[None, :] >= (K - np.minimum(count, K))[:, None]
        cos = np.einsum("ud,ukd->uk", latents[target], latents[recent])
        max_cos = np.where(rmask, cos, -np.inf).max(axis=1)
        max_cos = np.where(has, max_cos, 0.0)
        p = np.clip(spec.base_ctr * spec.retarget_boost ** max_cos, 0.0, 1.0)
        clicked = rng.random(U) < p
        targets[:, step], clicks[:, step], probs[:, step] = target, clicked, p
        c = np.flatnonzero(clicked)
        hist[c, :-1] = hist[c, 1:]
        hist[c, -1] = target[c]
        count[c] += 1

    # timelines: short in-session gaps, long breaks rescaled to fill the window
    in_session = rng.random((U, E)) < spec.session_continue
    in_session[:, 0] = False
    short = rng.integers(2, 16, size=(U, E))
    brk = rng.exponential(1.0, size=(U, E))
    brk[:, 0] = 0.0
    start = spec.start_ts + rng.integers(0, SECONDS_PER_DAY // 4, size=U)
    span = spec.days * SECONDS_PER_DAY - SECONDS_PER_DAY // 4 - 3600
    short_total = np.where(in_session, short, 0).sum(axis=1)
    brk_total = np.where(in_session, 0.0, brk).sum(axis=1)
    scale = (span - short_total) / np.maximum(brk_total, 1e-12)
    gaps = np.where(in_session, short, np.maximum(np.round(brk * scale[:, None]), 61))
    gaps[:, 0] = 0
    ts = start[:, None] + np.cumsum(gaps, axis=1).astype(np.int64)

    user_ids = np.repeat(users + 1, E)
    item_ids = targets.reshape(-1)
    events = EventTable(user_ids, item_ids, ts.reshape(-1), clicks.reshape(-1),
                        category=item_category[item_ids])
    category_group = np.concatenate([[0], cat_group + 1])
    return SyntheticData(events, latents, item_category, item_product, category_group,
                         probs.reshape(-1), spec)


def gen_synthetic(spec: SyntheticSpec) -> tuple[EventTable, np.ndarray]:
    """Planted-signal event log and the ground-truth latent item vectors."""
    data = simulate_synthetic(spec)
    return data.events, data.latents
