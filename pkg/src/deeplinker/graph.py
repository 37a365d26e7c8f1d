"""Graph loading, edge splitting and frozen neighborhood sampling.

Everything random in dataset preparation happens here, seeded explicitly, so
the training and evaluation stages downstream are deterministic functions of
their inputs.  Graphs are undirected, stored in CSR form with densely
re-indexed node ids (the original string ids are kept for output).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp


class EdgeFileError(ValueError):
    """Malformed edge or feature file; message carries the line number."""


ONE_HOT = "one-hot-adjacency"
SPARSE_ATTRS = "sparse-attributes"


class FeatureMatrix:
    """Per-node sparse feature rows in CSR form.

    In one-hot-adjacency mode the dimension equals the node count and row i is
    row i of the adjacency matrix.
    """

    def __init__(self, mode: str, dim: int, indptr, indices, data):
        if mode not in (ONE_HOT, SPARSE_ATTRS):
            raise ValueError(f"unknown feature mode {mode!r}")
        self.mode = mode
        self.dim = int(dim)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.indices.size and self.indices.max() >= self.dim:
            raise ValueError("feature index out of range")
        self._csr: Optional[sp.csr_matrix] = None

    @property
    def num_rows(self) -> int:
        return self.indptr.size - 1

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.data, self.indices, self.indptr), shape=(self.num_rows, self.dim)
            )
        return self._csr

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]


class Graph:
    """Immutable undirected graph: CSR adjacency plus node features.

    Both directions of every edge are stored; ``targets`` slices per node are
    sorted ascending, there are no self-loops and no duplicates.
    """

    def __init__(self, offsets, targets, features: FeatureMatrix, node_ids: list[str]):
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.targets = np.ascontiguousarray(targets, dtype=np.int64)
        self.features = features
        self.node_ids = list(node_ids)
        self.num_nodes = self.offsets.size - 1
        if len(self.node_ids) != self.num_nodes:
            raise ValueError("node id list does not match offsets")

    @property
    def num_edges(self) -> int:
        return self.targets.size // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.targets[self.offsets[i]:self.offsets[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        row = self.neighbors(i)
        pos = np.searchsorted(row, j)
        return pos < row.size and row[pos] == j

    def edges(self) -> np.ndarray:
        """All undirected edges once, as an (E, 2) array with src < dst."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        mask = src < self.targets
        return np.column_stack((src[mask], self.targets[mask]))

    def index_of(self, original_id: str) -> int:
        if not hasattr(self, "_id_lookup"):
            self._id_lookup = {s: i for i, s in enumerate(self.node_ids)}
        try:
            return self._id_lookup[original_id]
        except KeyError:
            raise KeyError(f"unknown node id {original_id!r}") from None


def _csr_from_pairs(pairs: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize + dedup an (E, 2) dense-id pair array into CSR arrays."""
    if pairs.size == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    both = np.concatenate((pairs, pairs[:, ::-1]))
    keys = both[:, 0] * num_nodes + both[:, 1]
    keys = np.unique(keys)
    src = keys // num_nodes
    dst = keys % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    np.cumsum(offsets, out=offsets)
    return offsets, dst


def _one_hot_features(offsets: np.ndarray, targets: np.ndarray) -> FeatureMatrix:
    n = offsets.size - 1
    return FeatureMatrix(ONE_HOT, n, offsets, targets, np.ones(targets.size))


def parse_feature_file(path: Union[str, Path], id_to_index: dict[str, int]) -> FeatureMatrix:
    """Read "node_id idx:val idx:val ..." lines into a FeatureMatrix."""
    rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    max_idx = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            node_id = tokens[0]
            if node_id not in id_to_index:
                raise EdgeFileError(f"{path}:{lineno}: feature row for unknown node {node_id!r}")
            idxs, vals = [], []
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise EdgeFileError(f"{path}:{lineno}: bad feature entry {tok!r}") from None
                if idx < 0:
                    raise EdgeFileError(f"{path}:{lineno}: negative feature index")
                idxs.append(idx)
                vals.append(val)
            order = np.argsort(idxs, kind="stable")
            idx_arr = np.asarray(idxs, dtype=np.int64)[order]
            if idx_arr.size and (np.diff(idx_arr) == 0).any():
                raise EdgeFileError(f"{path}:{lineno}: duplicate feature index")
            dense = id_to_index[node_id]
            if dense in rows:
                raise EdgeFileError(f"{path}:{lineno}: duplicate feature row for node {node_id!r}")
            rows[dense] = (idx_arr, np.asarray(vals)[order])
            if idx_arr.size:
                max_idx = max(max_idx, int(idx_arr[-1]))
    n = len(id_to_index)
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + (rows[i][0].size if i in rows else 0)
    indices = np.concatenate([rows[i][0] for i in range(n) if i in rows]) if rows else np.zeros(0, np.int64)
    data = np.concatenate([rows[i][1] for i in range(n) if i in rows]) if rows else np.zeros(0)
    return FeatureMatrix(SPARSE_ATTRS, max(max_idx + 1, 1), indptr, indices, data)


def load_graph(edge_list_path: Union[str, Path], feature_source: Union[str, Path] = "onehot") -> Graph:
    """Load an undirected graph from a whitespace-separated edge list.

    Node ids may be arbitrary strings; they are densely re-indexed in first
    appearance order and kept on the graph for output.  Self-loops are dropped
    with a warning, reverse duplicates collapse into one undirected edge.

    ``feature_source`` is either the literal "onehot" (adjacency rows become
    the input attributes) or the path of a feature file.
    """
    id_to_index: dict[str, int] = {}
    pair_list: list[tuple[int, int]] = []
    with open(edge_list_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise EdgeFileError(
                    f"{edge_list_path}:{lineno}: expected two node ids, got {len(tokens)} tokens"
                )
            a, b = tokens
            if a == b:
                warnings.warn(f"{edge_list_path}:{lineno}: dropping self-loop on {a!r}")
                continue
            for s in (a, b):
                if s not in id_to_index:
                    id_to_index[s] = len(id_to_index)
            pair_list.append((id_to_index[a], id_to_index[b]))
    if not pair_list:
        raise EdgeFileError(f"{edge_list_path}: no edges found")
    num_nodes = len(id_to_index)
    offsets, targets = _csr_from_pairs(np.asarray(pair_list, dtype=np.int64), num_nodes)
    if str(feature_source) == "onehot":
        features = _one_hot_features(offsets, targets)
    else:
        features = parse_feature_file(feature_source, id_to_index)
    node_ids = [None] * num_nodes
    for s, i in id_to_index.items():
        node_ids[i] = s
    return Graph(offsets, targets, features, node_ids)


@dataclass
class EdgeSplit:
    """Disjoint positive train/val/test edge sets plus matched negatives."""

    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    train_neg: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray
    seed: int
    test_frac: float
    val_frac: float

    def all_negative_pairs(self) -> set[tuple[int, int]]:
        out = set()
        for arr in (self.train_neg, self.val_neg, self.test_neg):
            for i, j in arr:
                out.add((min(i, j), max(i, j)))
        return out


def _count_pool_edges(g: Graph, pool: np.ndarray) -> int:
    """Number of graph edges with both endpoints inside the pool."""
    member = np.zeros(g.num_nodes, dtype=bool)
    member[pool] = True
    edges = g.edges()
    return int((member[edges[:, 0]] & member[edges[:, 1]]).sum())


def _draw_negatives(
    g: Graph,
    pool: np.ndarray,
    count: int,
    used: set[tuple[int, int]],
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform non-edges with both endpoints in the pool, avoiding ``used``."""
    m = pool.size
    max_pairs = m * (m - 1) // 2 - _count_pool_edges(g, pool)
    if count > max_pairs:
        raise ValueError(
            f"graph too dense: need {count} negative pairs but only {max_pairs} non-edges exist"
        )
    out = np.empty((count, 2), dtype=np.int64)
    found = 0
    attempts = 0
    limit = max(10_000, 200 * count)
    while found < count:
        attempts += 1
        if attempts > limit:
            raise ValueError("negative sampling did not converge; graph too dense")
        i, z = pool[rng.integers(0, m, size=2)]
        if i == z:
            continue
        key = (min(i, z), max(i, z))
        if key in used or g.has_edge(i, z):
            continue
        used.add(key)
        out[found, 0], out[found, 1] = i, z
        found += 1
    return out


def split_edges(g: Graph, test_frac: float, val_frac: float, seed: int) -> EdgeSplit:
    """Uniform random partition of the undirected edges, with negatives.

    Positive sets are disjoint and cover E (one direction per edge); each
    validation/test set gets an equal number of negatives drawn uniformly from
    non-edges among the nodes of its positive set, and a same-sized initial
    training negative set is drawn the same way.  Deterministic per seed.
    """
    if not (test_frac >= 0 and val_frac >= 0 and 0 < test_frac + val_frac < 1):
        raise ValueError("need test_frac, val_frac >= 0 with 0 < test_frac + val_frac < 1")
    edges = g.edges()
    n_edges = edges.shape[0]
    n_test = int(np.floor(test_frac * n_edges))
    n_val = int(np.floor(val_frac * n_edges))
    if test_frac > 0 and n_test == 0:
        raise ValueError(f"test_frac={test_frac} yields an empty test set on {n_edges} edges")
    if val_frac > 0 and n_val == 0:
        raise ValueError(f"val_frac={val_frac} yields an empty validation set on {n_edges} edges")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_edges)
    test_pos = edges[perm[:n_test]]
    val_pos = edges[perm[n_test:n_test + n_val]]
    train_pos = edges[perm[n_test + n_val:]]

    used: set[tuple[int, int]] = set()
    test_neg = _draw_negatives(g, np.unique(test_pos), n_test, used, rng)
    val_neg = _draw_negatives(g, np.unique(val_pos), n_val, used, rng)
    train_neg = _draw_negatives(g, np.unique(train_pos), train_pos.shape[0], used, rng)
    return EdgeSplit(
        train_pos=train_pos, val_pos=val_pos, test_pos=test_pos,
        train_neg=train_neg, val_neg=val_neg, test_neg=test_neg,
        seed=seed, test_frac=test_frac, val_frac=val_frac,
    )


def save_split(split: EdgeSplit, g: Graph, path: Union[str, Path]) -> None:
    """Write a split as JSON keyed by the original node ids."""
    def pairs(arr: np.ndarray) -> list[list[str]]:
        return [[g.node_ids[i], g.node_ids[j]] for i, j in arr]

    payload = {
        "seed": split.seed,
        "test_frac": split.test_frac,
        "val_frac": split.val_frac,
        "train_pos": pairs(split.train_pos),
        "train_neg": pairs(split.train_neg),
        "val_pos": pairs(split.val_pos),
        "val_neg": pairs(split.val_neg),
        "test_pos": pairs(split.test_pos),
        "test_neg": pairs(split.test_neg),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_split(path: Union[str, Path], g: Graph) -> EdgeSplit:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)

    def arr(key: str) -> np.ndarray:
        pairs = payload[key]
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray([[g.index_of(a), g.index_of(b)] for a, b in pairs], dtype=np.int64)

    return EdgeSplit(
        train_pos=arr("train_pos"), val_pos=arr("val_pos"), test_pos=arr("test_pos"),
        train_neg=arr("train_neg"), val_neg=arr("val_neg"), test_neg=arr("test_neg"),
        seed=int(payload["seed"]),
        test_frac=float(payload["test_frac"]),
        val_frac=float(payload["val_frac"]),
    )


class NeighborTable:
    """Frozen fixed-size neighbor samples, one row per node.

    Rows are drawn once from the training-edge graph and never redrawn.  A
    node's second-order sample is, by construction, the first-order row of
    each sampled neighbor, so `hop2[i][k]` lists training-graph neighbors of
    `hop1[i][k]`.  A compressed (unique neighbor, multiplicity) view is kept
    alongside for batched aggregation.
    """

    def __init__(self, hop1: np.ndarray, seed: int):
        self.hop1 = np.ascontiguousarray(hop1, dtype=np.int64)
        self.seed = seed
        self.num_nodes, self.sample_size = self.hop1.shape
        offsets = [0]
        ids: list[np.ndarray] = []
        counts: list[np.ndarray] = []
        for row in self.hop1:
            u, c = np.unique(row, return_counts=True)
            ids.append(u)
            counts.append(c)
            offsets.append(offsets[-1] + u.size)
        self.unique_offsets = np.asarray(offsets, dtype=np.int64)
        self.unique_ids = np.concatenate(ids)
        self.unique_counts = np.concatenate(counts).astype(np.float64)
        self._hop2: Optional[np.ndarray] = None

    @property
    def hop2(self) -> np.ndarray:
        """Second-order view, shape (num_nodes, S, S); built on first use."""
        if self._hop2 is None:
            self._hop2 = self.hop1[self.hop1]
        return self._hop2


def build_neighbor_table(g: Graph, train_edges: np.ndarray, sample_size: int, seed: int) -> NeighborTable:
    """Sample S training-graph neighbors per node, once, deterministically.

    Nodes with fewer than S training neighbors are sampled with replacement;
    nodes with at least S are sampled without.  Nodes isolated by the split
    fall back to rows of their own id.  Hidden validation/test edges never
    appear, so message passing cannot leak them.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    train_edges = np.ascontiguousarray(train_edges, dtype=np.int64)
    for i, j in train_edges:
        if not g.has_edge(i, j):
            raise ValueError(f"train edge ({i}, {j}) is not an edge of the graph")
    n = g.num_nodes
    deg = np.zeros(n, dtype=np.int64)
    np.add.at(deg, train_edges[:, 0], 1)
    np.add.at(deg, train_edges[:, 1], 1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    nbrs = np.empty(indptr[-1], dtype=np.int64)
    cursor = indptr[:-1].copy()
    for i, j in train_edges:
        nbrs[cursor[i]] = j
        cursor[i] += 1
        nbrs[cursor[j]] = i
        cursor[j] += 1

    rng = np.random.default_rng(seed)
    hop1 = np.empty((n, sample_size), dtype=np.int64)
    for v in range(n):
        pool = nbrs[indptr[v]:indptr[v + 1]]
        if pool.size == 0:
            hop1[v] = v
        elif pool.size >= sample_size:
            hop1[v] = rng.choice(pool, size=sample_size, replace=False)
        else:
            hop1[v] = pool[rng.integers(0, pool.size, size=sample_size)]
    return NeighborTable(hop1, seed)


def remove_edges(g: Graph, fraction: float, seed: int) -> Graph:
    """New graph with floor(fraction * E) undirected edges uniformly removed.

    The input graph is untouched.  Features carry over, except in one-hot
    adjacency mode where they are rebuilt from the surviving adjacency so the
    row-equals-adjacency invariant keeps holding.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    edges = g.edges()
    n_remove = int(np.floor(fraction * edges.shape[0]))
    if n_remove == 0:
        kept = edges
    else:
        rng = np.random.default_rng(seed)
        drop = rng.choice(edges.shape[0], size=n_remove, replace=False)
        keep_mask = np.ones(edges.shape[0], dtype=bool)
        keep_mask[drop] = False
        kept = edges[keep_mask]
    offsets, targets = _csr_from_pairs(kept, g.num_nodes)
    if g.features.mode == ONE_HOT:
        features = _one_hot_features(offsets, targets)
    else:
        features = g.features
    return Graph(offsets, targets, features, g.node_ids)


def save_id_map(g: Graph, path: Union[str, Path]) -> None:
    """Sidecar mapping dense index -> original node id."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"node_ids": g.node_ids}, fh)
        fh.write("\n")
