"""Heterogeneous click graph, metapath neighborhoods and HAN-style link-prediction pretraining.

Node types are ``user``, ``item`` and the side-info types present in the
log. Edges are undirected, unweighted and deduplicated:

* user-item      user clicked item (the link-prediction label, never a metapath hop)
* user-<side>    user clicked an item carrying that side value
* item-item      consecutive clicks of one user at most 60 s apart
* item-<side>    item carries that side value

Every metapath ends at an item, so node-level attention always aggregates
projected item base embeddings.
"""

from __future__ import annotations

import logging
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SIDE_TYPES, EventTable
from .nncore import Adagrad, EmbeddingTable, Param, glorot_uniform, sigmoid
from .nncore.checkpoint import load_checkpoint, save_checkpoint
from .nncore.layers import DTYPE, ConfigurationError

log = logging.getLogger(__name__)

ITEM_ITEM_GAP = 60
NODE_TYPES = ("user", "item", *SIDE_TYPES)
LEAKY_SLOPE = 0.2


class LeakageError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def _kind(a: str, b: str) -> str:
    return f"{a}-{b}"


class HeteroGraph:
    def __init__(self, edges: dict[str, np.ndarray], side_types: tuple[str, ...]):
        self.side_types = tuple(side_types)
        self.node_types = ("user", "item", *self.side_types)
        self.edges = {k: np.asarray(v, dtype=np.int64).reshape(-1, 2) for k, v in edges.items()}
        nodes: dict[str, set] = {t: set() for t in self.node_types}
        for kind, pairs in self.edges.items():
            a, b = kind.split("-")
            nodes[a].update(pairs[:, 0].tolist())
            nodes[b].update(pairs[:, 1].tolist())
        self.nodes = {t: np.array(sorted(v), dtype=np.int64) for t, v in nodes.items()}
        self.size = {t: (int(ids.max()) + 1 if ids.size else 1) for t, ids in self.nodes.items()}
        self._adj: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        for kind, pairs in self.edges.items():
            a, b = kind.split("-")
            if a == b:
                both = np.vstack([pairs, pairs[:, ::-1]])
                self._adj[(a, a)] = self._csr(both, self.size[a])
            else:
                self._adj[(a, b)] = self._csr(pairs, self.size[a])
                self._adj[(b, a)] = self._csr(pairs[:, ::-1], self.size[b])

    @staticmethod
    def _csr(pairs: np.ndarray, n: int):
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        src, dst = pairs[order, 0], pairs[order, 1]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return np.cumsum(indptr), dst

    def connected(self, a: str, b: str) -> bool:
        return (a, b) in self._adj

    def neighbors(self, src_type: str, node: int, dst_type: str) -> np.ndarray:
        adj = self._adj.get((src_type, dst_type))
        if adj is None or node < 0 or node >= len(adj[0]) - 1:
            return np.zeros(0, dtype=np.int64)
        indptr, indices = adj
        return indices[indptr[node]:indptr[node + 1]]

    def has_edge(self, a: str, u: int, b: str, v: int) -> bool:
        return bool(np.any(self.neighbors(a, u, b) == v))

    @property
    def node_count(self) -> int:
        return int(sum(ids.size for ids in self.nodes.values()))

    def stats(self) -> dict:
        return {
            "nodes": {t: int(ids.size) for t, ids in self.nodes.items()},
            "edges": {k: int(v.shape[0]) for k, v in sorted(self.edges.items())},
        }


def _unique_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    keep = (a > 0) & (b > 0)
    pairs = np.stack([a[keep], b[keep]], axis=1)
    if not pairs.size:
        return pairs.reshape(0, 2)
    return np.unique(pairs, axis=0)


def build_graph(events: EventTable, boundary: int | None = None) -> HeteroGraph:
    """Graph from training clicks; display rows are ignored.

    With ``boundary`` set, any event at or after it raises :class:`LeakageError`.
    """
    if boundary is not None and len(events) and int(events.timestamp.max()) >= boundary:
        n_bad = int(np.sum(events.timestamp >= boundary))
        raise LeakageError(f"{n_bad} events at or after the test boundary {boundary}; "
                           "graph construction only accepts training-period clicks")
    clicks = events.clicks().sorted()
    sides = clicks.side_types
    edges = {_kind("user", "item"): _unique_pairs(clicks.user, clicks.item)}
    for s in sides:
        edges[_kind("user", s)] = _unique_pairs(clicks.user, clicks.side[s])
        edges[_kind("item", s)] = _unique_pairs(clicks.item, clicks.side[s])
    same_user = clicks.user[1:] == clicks.user[:-1]
    close = (clicks.timestamp[1:] - clicks.timestamp[:-1]) <= ITEM_ITEM_GAP
    a, b = clicks.item[:-1], clicks.item[1:]
    keep = same_user & close & (a != b)
    lo, hi = np.minimum(a[keep], b[keep]), np.maximum(a[keep], b[keep])
    edges[_kind("item", "item")] = _unique_pairs(lo, hi)
    return HeteroGraph(edges, sides)


# ------------------------------------------------------------------------ metapaths

@dataclass(frozen=True)
class MetaPath:
    types: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> MetaPath:
        return cls(tuple(t.strip() for t in text.replace("->", "-").split("-") if t.strip()))

    @property
    def name(self) -> str:
        return "-".join(self.types)

    @property
    def start(self) -> str:
        return self.types[0]

    @property
    def terminal(self) -> str:
        return self.types[-1]

    def validate(self, graph: HeteroGraph | None = None) -> None:
        if not 2 <= len(self.types) <= 3:
            raise ConfigurationError(f"metapath {self.name!r} must have 2 or 3 node types")
        for t in self.types:
            if t not in NODE_TYPES:
                raise ConfigurationError(f"metapath {self.name!r}: unknown node type {t!r}")
        if self.terminal != "item":
            raise ConfigurationError(f"metapath {self.name!r} must end at item")
        if self.types[:2] == ("user", "item"):
            raise ConfigurationError("user-item edges are link-prediction labels, not metapath hops")
        for a, b in zip(self.types, self.types[1:]):
            if not _hop_ok(a, b):
                raise ConfigurationError(f"metapath {self.name!r}: no edge kind between {a} and {b}")
            if graph is not None and not graph.connected(a, b):
                raise ConfigurationError(f"metapath {self.name!r}: graph has no {a}-{b} edges")


def _hop_ok(a: str, b: str) -> bool:
    pair = {a, b}
    if pair == {"item"}:
        return True
    return len(pair) == 2 and bool(pair & set(SIDE_TYPES)) and bool(pair & {"user", "item"})


def default_metapaths(side_types) -> tuple[MetaPath, ...]:
    paths = [MetaPath(("user", s, "item")) for s in side_types]
    paths.append(MetaPath(("item", "item")))
    paths += [MetaPath(("item", s, "item")) for s in side_types]
    paths += [MetaPath((s, "item")) for s in side_types]
    return tuple(paths)


def _node_rng(seed: int, node_type: str, node: int, metapath: MetaPath, refresh: int) -> np.random.Generator:
    key = zlib.crc32(f"{node_type}|{metapath.name}".encode())
    return np.random.default_rng([seed, refresh, key, int(node)])


def sample_neighbors(graph: HeteroGraph, node: int, metapath: MetaPath, fanout: int, seed: int,
                     refresh: int = 0) -> np.ndarray:
    """Terminal nodes reached along ``metapath`` from ``node``.

    At each hop up to ``fanout`` neighbors per frontier node are drawn
    uniformly without replacement; the result is sorted and deduplicated.
    """
    rng = _node_rng(seed, metapath.start, node, metapath, refresh)
    frontier = np.array([node], dtype=np.int64)
    for a, b in zip(metapath.types, metapath.types[1:]):
        nxt = []
        for v in frontier:
            neigh = graph.neighbors(a, int(v), b)
            if neigh.size > fanout:
                neigh = rng.choice(neigh, size=fanout, replace=False)
            nxt.append(neigh)
        frontier = np.unique(np.concatenate(nxt)) if nxt else np.zeros(0, dtype=np.int64)
        if not frontier.size:
            break
    return frontier


@dataclass
class Neighborhood:
    """Padded terminal ids for every node of one center type along one metapath."""
    metapath: MetaPath
    ids: np.ndarray   # (n_rows, K), row = node id
    mask: np.ndarray  # (n_rows, K) bool


def sample_neighborhood(graph: HeteroGraph, metapath: MetaPath, fanout: int, seed: int,
                        refresh: int = 0) -> Neighborhood:
    ctype = metapath.start
    n_rows = graph.size[ctype]
    lists = {int(v): sample_neighbors(graph, int(v), metapath, fanout, seed, refresh)
             for v in graph.nodes[ctype]}
    K = max([x.size for x in lists.values()] + [1])
    ids = np.zeros((n_rows, K), dtype=np.int64)
    mask = np.zeros((n_rows, K), dtype=bool)
    for v, x in lists.items():
        ids[v, :x.size] = x
        mask[v, :x.size] = True
    return Neighborhood(metapath, ids, mask)


# ------------------------------------------------------------------------------ HAN

def _masked_softmax(e: np.ndarray, mask: np.ndarray) -> np.ndarray:
    e = np.where(mask, e, -np.inf)
    top = np.max(e, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ex = np.where(mask, np.exp(e - top), 0.0)
    tot = ex.sum(axis=-1, keepdims=True)
    return ex / np.where(tot > 0, tot, 1.0)


class HanModel:
    """Base embeddings per node type plus node- and semantic-level attention.

    For center node c and metapath p with neighbors j:
      node level:     e_j = leaky(a_p . [P_p h_c || P_p h_j]),  alpha = softmax(e),
                      z_p = sum_j alpha_j P_p h_j
      semantic level: g_p = q_T . tanh(W_T z_p + b_T),  beta = softmax over non-empty p,
                      out = sum_p beta_p z_p
    With ``include_self`` the center's own projection P_p h_c is one more
    candidate in every non-empty neighborhood. A node with no neighbors on
    any metapath falls back to its base embedding.
    """

    def __init__(self, sizes: dict[str, int], metapaths, dim: int = 32, attn_dim: int = 32,
                 rng: np.random.Generator | None = None, zero_init: bool = False,
                 include_self: bool = True):
        self.dim = dim
        self.include_self = include_self
        self.attn_dim = attn_dim
        self.metapaths = tuple(metapaths)
        self.tables = {
            t: EmbeddingTable(f"ge.{t}", n, dim, None if zero_init else rng) for t, n in sizes.items()
        }
        self.proj: dict[str, Param] = {}
        self.att: dict[str, Param] = {}
        for mp in self.metapaths:
            self.proj[mp.name] = Param(f"han.{mp.name}.proj", glorot_uniform(rng, dim, dim))
            self.att[mp.name] = Param(f"han.{mp.name}.att", glorot_uniform(rng, 2 * dim, 1).reshape(-1))
        self.sem_w: dict[str, Param] = {}
        self.sem_b: dict[str, Param] = {}
        self.sem_q: dict[str, Param] = {}
        for t in {mp.start for mp in self.metapaths}:
            self.sem_w[t] = Param(f"han.{t}.sem_w", glorot_uniform(rng, dim, attn_dim))
            self.sem_b[t] = Param(f"han.{t}.sem_b", np.zeros(attn_dim))
            self.sem_q[t] = Param(f"han.{t}.sem_q", glorot_uniform(rng, attn_dim, 1).reshape(-1))

    def paths_for(self, node_type: str) -> list[MetaPath]:
        return [mp for mp in self.metapaths if mp.start == node_type]

    def params(self) -> list[Param]:
        out = [*self.proj.values(), *self.att.values()]
        for t in sorted(self.sem_w):
            out += [self.sem_w[t], self.sem_b[t], self.sem_q[t]]
        return out

    def forward(self, node_type: str, centers: np.ndarray, hoods: list[tuple[MetaPath, np.ndarray, np.ndarray]]):
        """Fused embeddings (B, dim) for ``centers`` given per-metapath (ids, mask)."""
        D = self.dim
        centers = np.asarray(centers, dtype=np.int64)
        B = centers.size
        hc = self.tables[node_type].values[centers]
        zs, node_caches, avail = [], [], []
        for mp, N, M in hoods:
            if mp.start != node_type:
                raise ConfigurationError(f"metapath {mp.name} does not start at {node_type}")
            P = self.proj[mp.name].value
            a = self.att[mp.name].value
            hn = self.tables[mp.terminal].values[N]
            pc = hc @ P
            pn = hn @ P
            nonempty = M.any(axis=1)
            if self.include_self:
                # the center joins its own neighborhood (only where it has one)
                pn = np.concatenate([pc[:, None, :], pn], axis=1)
                Mx = np.concatenate([nonempty[:, None], M], axis=1)
            else:
                Mx = M
            pre = (pc @ a[:D])[:, None] + pn @ a[D:]
            e = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
            alpha = _masked_softmax(e, Mx)
            zs.append(np.einsum("bk,bkd->bd", alpha, pn))
            avail.append(nonempty)
            node_caches.append((mp, N, M, Mx, hn, pc, pn, pre, alpha))
        if not hoods:
            return hc.copy(), (node_type, centers, hc, [], None)
        Z = np.stack(zs, axis=1)
        A = np.stack(avail, axis=1)
        if node_type in self.sem_w:
            u = np.tanh(Z @ self.sem_w[node_type].value + self.sem_b[node_type].value)
            g = u @ self.sem_q[node_type].value
        else:
            u = np.zeros(Z.shape[:2] + (self.attn_dim,))
            g = np.zeros(Z.shape[:2])
        beta = _masked_softmax(g, A)
        out = np.einsum("bp,bpd->bd", beta, Z)
        empty = ~A.any(axis=1)
        out[empty] = hc[empty]
        return out, (node_type, centers, hc, node_caches, (Z, A, u, beta, empty))

    def backward(self, dout: np.ndarray, cache) -> None:
        node_type, centers, hc, node_caches, sem = cache
        D = self.dim
        table = self.tables[node_type]
        if sem is None:
            table.accumulate(centers, dout)
            return
        Z, A, u, beta, empty = sem
        dhc = np.zeros_like(hc)
        dhc[empty] = dout[empty]
        dout = np.where(empty[:, None], 0.0, dout)
        dZ = beta[:, :, None] * dout[:, None, :]
        dbeta = np.einsum("bd,bpd->bp", dout, Z)
        dg = beta * (dbeta - np.sum(beta * dbeta, axis=1, keepdims=True))
        if node_type in self.sem_w:
            W, q = self.sem_w[node_type], self.sem_q[node_type]
            self.sem_q[node_type].grad += np.einsum("bp,bpa->a", dg, u)
            dpre = dg[:, :, None] * q.value * (1.0 - u * u)
            W.grad += np.einsum("bpd,bpa->da", Z, dpre)
            self.sem_b[node_type].grad += dpre.sum(axis=(0, 1))
            dZ += dpre @ W.value.T
        for p, (mp, N, M, Mx, hn, pc, pn, pre, alpha) in enumerate(node_caches):
            P = self.proj[mp.name]
            a = self.att[mp.name]
            dz = dZ[:, p]
            dpn = alpha[:, :, None] * dz[:, None, :]
            dalpha = np.einsum("bd,bkd->bk", dz, pn)
            de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
            dpre = np.where(Mx, de * np.where(pre > 0, 1.0, LEAKY_SLOPE), 0.0)
            s = dpre.sum(axis=1)
            a.grad[:D] += s @ pc
            a.grad[D:] += np.einsum("bk,bkd->d", dpre, pn)
            dpc = s[:, None] * a.value[:D]
            dpn += dpre[:, :, None] * a.value[D:]
            if self.include_self:
                dpc = dpc + dpn[:, 0]
                dpn = dpn[:, 1:]
            P.grad += hc.T @ dpc + np.einsum("bkd,bke->de", hn, dpn)
            dhc += dpc @ P.value.T
            dhn = dpn @ P.value.T
            Mf = M.reshape(-1)
            self.tables[mp.terminal].accumulate(N.reshape(-1)[Mf], dhn.reshape(-1, D)[Mf])
        table.accumulate(centers, dhc)


def han_aggregate(node: int, node_type: str, neighbor_sets: dict[MetaPath, np.ndarray], model: HanModel) -> np.ndarray:
    """Fused embedding of one node from explicit per-metapath neighbor sets."""
    hoods = []
    for mp, neigh in neighbor_sets.items():
        neigh = np.asarray(neigh, dtype=np.int64).reshape(1, -1)
        mask = np.ones_like(neigh, dtype=bool)
        if neigh.size == 0:
            neigh = np.zeros((1, 1), dtype=np.int64)
            mask = np.zeros((1, 1), dtype=bool)
        hoods.append((mp, neigh, mask))
    out, _ = model.forward(node_type, np.array([node]), hoods)
    return out[0]


# ---------------------------------------------------------------- embedding dictionary

class GraphEmbeddingDict:
    """Frozen fused embeddings per node type; unknown ids map to a zero vector."""

    def __init__(self, tables: dict[str, tuple[np.ndarray, np.ndarray]], dim: int):
        self.dim = dim
        self.tables = {t: (np.asarray(ids, np.int64), np.asarray(vec, DTYPE)) for t, (ids, vec) in tables.items()}
        self._rows = {}
        for t, (ids, _) in self.tables.items():
            pos = np.full(int(ids.max()) + 1 if ids.size else 1, -1, dtype=np.int64)
            pos[ids] = np.arange(ids.size)
            self._rows[t] = pos
        self.missing: Counter = Counter()

    @property
    def node_count(self) -> int:
        return int(sum(ids.size for ids, _ in self.tables.values()))

    def lookup(self, node_type: str, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.zeros(ids.shape + (self.dim,), dtype=DTYPE)
        if node_type not in self.tables:
            self.missing[node_type] += int(ids.size)
            return out
        pos_map = self._rows[node_type]
        vec = self.tables[node_type][1]
        inside = (ids >= 0) & (ids < pos_map.size)
        pos = np.where(inside, pos_map[np.where(inside, ids, 0)], -1)
        found = pos >= 0
        out[found] = vec[pos[found]]
        self.missing[node_type] += int((~found).sum())
        return out

    def matrix(self, node_type: str, rows: int) -> np.ndarray:
        """Dense (rows, dim) matrix indexed by dense id; absent ids are zero rows."""
        out = np.zeros((rows, self.dim), dtype=DTYPE)
        if node_type in self.tables:
            ids, vec = self.tables[node_type]
            keep = ids < rows
            out[ids[keep]] = vec[keep]
        return out


def export_embeddings(embeddings: GraphEmbeddingDict, out_dir, vocabs=None, metadata=None) -> Path:
    """Write fused embeddings as a checkpoint plus ``graph_index.tsv``.

    Vectors are stored unnormalized.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    lines = ["node_type\tdense_id\traw_id"]
    for t in sorted(embeddings.tables):
        ids, vec = embeddings.tables[t]
        tensors[f"{t}.ids"] = ids
        tensors[f"{t}.vectors"] = vec
        vocab = (vocabs or {}).get(t)
        lines += [f"{t}\t{i}\t{vocab.raw(i) if vocab is not None and i <= len(vocab) else i}" for i in ids.tolist()]
    meta = {"dim": embeddings.dim, "node_count": embeddings.node_count, **(metadata or {})}
    save_checkpoint(out / "graph_embeddings.ckpt", tensors, meta)
    (out / "graph_index.tsv").write_text("\n".join(lines) + "\n")
    return out


def load_embeddings(path) -> GraphEmbeddingDict:
    path = Path(path)
    if path.is_dir():
        path = path / "graph_embeddings.ckpt"
    tensors, meta = load_checkpoint(path)
    types = sorted({k.split(".")[0] for k in tensors})
    tables = {t: (tensors[f"{t}.ids"], tensors[f"{t}.vectors"]) for t in types}
    return GraphEmbeddingDict(tables, int(meta["dim"]))


# ---------------------------------------------------------------------- pretraining

@dataclass
class GraphConfig:
    dim: int = 32
    attn_dim: int = 32
    metapaths: tuple[str, ...] | None = None
    fanout: int = 10
    epochs: int = 5
    neg_per_pos: int = 5
    learning_rate: float = 0.05
    batch_size: int = 256
    clip_norm: float | None = None
    seed: int = 0
    zero_init: bool = False
    include_self: bool = True

    def resolve_metapaths(self, graph: HeteroGraph) -> tuple[MetaPath, ...]:
        if self.metapaths:
            paths = tuple(MetaPath.parse(p) for p in self.metapaths)
        else:
            paths = default_metapaths(graph.side_types)
        for mp in paths:
            mp.validate(graph)
        return paths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metapaths"] = list(self.metapaths) if self.metapaths else None
        return d


@dataclass
class PretrainResult:
    embeddings: GraphEmbeddingDict
    model: HanModel
    history: list[dict] = field(default_factory=list)


class LinkPredictor:
    """Scores user-item pairs as sigmoid(han(user) . han(item))."""

    def __init__(self, graph: HeteroGraph, config: GraphConfig):
        self.graph = graph
        self.config = config
        self.metapaths = config.resolve_metapaths(graph)
        rng = np.random.default_rng([config.seed, 1])
        self.model = HanModel(graph.size, self.metapaths, config.dim, config.attn_dim, rng,
                              zero_init=config.zero_init, include_self=config.include_self)
        self.hoods: dict[str, Neighborhood] = {}

    def refresh(self, refresh: int) -> None:
        cfg = self.config
        self.hoods = {mp.name: sample_neighborhood(self.graph, mp, cfg.fanout, cfg.seed, refresh)
                      for mp in self.metapaths}

    def _hoods_for(self, node_type: str, nodes: np.ndarray):
        out = []
        for mp in self.model.paths_for(node_type):
            nb = self.hoods[mp.name]
            out.append((mp, nb.ids[nodes], nb.mask[nodes]))
        return out

    def embed(self, node_type: str, nodes: np.ndarray):
        return self.model.forward(node_type, nodes, self._hoods_for(node_type, nodes))

    def loss_and_backward(self, users: np.ndarray, items: np.ndarray, labels: np.ndarray) -> float:
        uu, pu = np.unique(users, return_inverse=True)
        ui, pi = np.unique(items, return_inverse=True)
        eu, cu = self.embed("user", uu)
        ei, ci = self.embed("item", ui)
        score = np.sum(eu[pu] * ei[pi], axis=1)
        n = labels.size
        loss = float(np.sum(np.logaddexp(0.0, score) - labels * score) / n)
        ds = (sigmoid(score) - labels) / n
        deu = np.zeros_like(eu)
        dei = np.zeros_like(ei)
        np.add.at(deu, pu, ds[:, None] * ei[pi])
        np.add.at(dei, pi, ds[:, None] * eu[pu])
        self.model.backward(deu, cu)
        self.model.backward(dei, ci)
        return loss

    def export(self) -> GraphEmbeddingDict:
        tables = {}
        for t in self.graph.node_types:
            nodes = self.graph.nodes[t]
            if not nodes.size:
                continue
            vec, _ = self.embed(t, nodes)
            tables[t] = (nodes.copy(), vec)
        return GraphEmbeddingDict(tables, self.config.dim)


def sample_negatives(graph: HeteroGraph, users: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` items per user drawn uniformly from items the user is not linked to."""
    items = graph.nodes["item"]
    n_items = graph.size["item"]
    linked = graph.edges["user-item"]
    codes = np.sort(linked[:, 0] * n_items + linked[:, 1])
    out = items[rng.integers(0, items.size, size=(users.size, k))]
    for _ in range(20):
        c = users[:, None] * n_items + out
        pos = np.searchsorted(codes, c)
        bad = codes[np.minimum(pos, codes.size - 1)] == c
        if not bad.any():
            break
        out[bad] = items[rng.integers(0, items.size, size=int(bad.sum()))]
    return out


def train_link_prediction(graph: HeteroGraph, config: GraphConfig | None = None) -> PretrainResult:
    """Pretrain graph embeddings on user-item link prediction and export the fused vectors."""
    config = config or GraphConfig()
    lp = LinkPredictor(graph, config)
    pos = graph.edges["user-item"]
    if not pos.shape[0]:
        raise ValueError("graph has no user-item edges to train on")
    opt = Adagrad(config.learning_rate, clip_norm=config.clip_norm)
    history = []
    last_good = None
    for epoch in range(config.epochs):
        lp.refresh(epoch)
        rng = np.random.default_rng([config.seed, 2, epoch])
        order = rng.permutation(pos.shape[0])
        total, count = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            batch = pos[order[start:start + config.batch_size]]
            u = batch[:, 0]
            neg = sample_negatives(graph, u, config.neg_per_pos, rng)
            users = np.concatenate([u, np.repeat(u, config.neg_per_pos)])
            items = np.concatenate([batch[:, 1], neg.reshape(-1)])
            labels = np.concatenate([np.ones(u.size), np.zeros(neg.size)])
            loss = lp.loss_and_backward(users, items, labels)
            if not np.isfinite(loss):
                raise DivergenceError(f"link-prediction loss became non-finite in epoch {epoch}", last_good)
            opt.step(lp.model.params(), lp.model.tables.values())
            total += loss * labels.size
            count += labels.size
        history.append({"epoch": epoch, "loss": total / count})
        last_good = {k: v.copy() for k, v in han_state(lp.model).items()}
        log.info("graph epoch %d loss %.5f", epoch, total / count)
    lp.refresh(config.epochs)
    return PretrainResult(lp.export(), lp.model, history)


def han_state(model: HanModel) -> dict[str, np.ndarray]:
    state = {p.name: p.value for p in model.params()}
    state.update({t.name: t.values for t in model.tables.values()})
    return state
