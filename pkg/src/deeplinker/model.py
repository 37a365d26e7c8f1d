"""Two-layer multi-head attention encoder with a Hadamard edge decoder.

Layer 1 transforms raw (sparse) node attributes per head and aggregates each
node's frozen neighbor sample, merging heads by concatenation behind an ELU.
Layer 2 aggregates the first-layer outputs into the final node embedding
(heads averaged, no nonlinearity - the logistic scorer downstream supplies
it).  An edge is scored as sigmoid(theta . (emb_i * emb_j)).

Attention comes in two modes: "learned" (softmax of LeakyReLU(a.[Wh_i||Wh_j])
per neighbor segment) and "all_ones" (every coefficient is exactly 1, no
normalization, no attention parameters).

Per-head weight matrices are stored as side-by-side column blocks of one
tensor, so a layer is a single sparse-dense product plus fused multi-head
segment ops rather than a python loop over heads.  Forward passes run over
unique-node index plans: each distinct node's first-layer embedding is
computed once per batch, and repeated entries in a sampled row collapse to
(neighbor, multiplicity) pairs, which is algebraically identical to summing
the raw fixed-size row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import engine
from .engine import ScatterPlan, SegmentIndex, Tensor
from .graph import FeatureMatrix, NeighborTable

LEARNED = "learned"
ALL_ONES = "all_ones"

LEAKY_SLOPE = 0.2


@dataclass
class ModelConfig:
    in_dim: int
    hidden: int = 32
    heads1: int = 8
    heads2: int = 1
    embed_dim: int = 128
    sample_size: int = 20
    attention: str = LEARNED
    dropout: float = 0.0

    def __post_init__(self):
        if self.attention not in (LEARNED, ALL_ONES):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if min(self.in_dim, self.hidden, self.heads1, self.heads2,
               self.embed_dim, self.sample_size) < 1:
            raise ValueError("model dimensions must be >= 1")


@dataclass
class LayerWeights:
    """One attention layer: per-head transforms as column blocks.

    ``w`` is (in_dim, heads*out_dim); head k owns columns [k*out_dim,
    (k+1)*out_dim).  ``attn`` is (2*out_dim, heads) with head k's attention
    vector in column k (source half on top, neighbor half below); absent in
    all_ones mode.
    """

    w: Tensor
    attn: Optional[Tensor]
    heads: int
    out_dim: int
    merge: str  # "concat" | "average"
    attention: str

    def head_w(self, k: int) -> np.ndarray:
        return self.w.values[:, k * self.out_dim:(k + 1) * self.out_dim]

    def head_attn(self, k: int) -> np.ndarray:
        return self.attn.values[:, k]


@dataclass
class ModelParams:
    config: ModelConfig
    layer1: LayerWeights
    layer2: LayerWeights
    theta: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            out.append((f"{name}.W", layer.w))
            if layer.attn is not None:
                out.append((f"{name}.a", layer.attn))
        out.append(("theta", self.theta))
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grads(self) -> None:
        for t in self.trainable():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_tensors()}

    def load_values(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            t.values[...] = snapshot[name]


def _ragged_ranges(starts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Concatenate arange(start, start+size) for every (start, size) pair."""
    total = int(sizes.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    out = np.ones(total, dtype=np.int64)
    out[0] = starts[0]
    cuts = np.cumsum(sizes)[:-1]
    out[cuts] = starts[1:] - starts[:-1] - sizes[:-1] + 1
    np.cumsum(out, out=out)
    return out


@dataclass
class _Level:
    """Index bookkeeping for one aggregation level of a forward pass."""

    seg: SegmentIndex
    src_pos: Optional[np.ndarray]  # position of the aggregating node, per edge row
    dst_pos: np.ndarray            # position of the sampled neighbor, per edge row
    counts: np.ndarray             # multiplicity of each compressed edge row
    _plan_src: Optional[ScatterPlan] = field(init=False, default=None)
    _plan_dst: Optional[ScatterPlan] = field(init=False, default=None)
    _cache: dict = field(init=False, default_factory=dict)

    @property
    def plan_src(self) -> ScatterPlan:
        if self._plan_src is None:
            self._plan_src = ScatterPlan(self.src_pos)
        return self._plan_src

    @property
    def plan_dst(self) -> ScatterPlan:
        if self._plan_dst is None:
            self._plan_dst = ScatterPlan(self.dst_pos)
        return self._plan_dst

    def counts_column(self) -> Tensor:
        if "counts" not in self._cache:
            self._cache["counts"] = Tensor(self.counts[:, None])
        return self._cache["counts"]

    def tiled_log_counts(self, heads: int) -> Tensor:
        key = ("log", heads)
        if key not in self._cache:
            self._cache[key] = Tensor(np.repeat(np.log(self.counts)[:, None], heads, axis=1))
        return self._cache[key]


class BatchPlan:
    """Unique-node index plan for encoding a set of center nodes.

    level2 aggregates first-layer embeddings of each center's sampled row;
    level1 produces those first-layer embeddings for every node (u1) that
    appears inside a center's row (plus the centers themselves, whose own
    first-layer rows feed the learned attention logits), from the raw features
    of every node (u0) one hop further out.  In all_ones mode there are no
    logits, so center rows and source positions are skipped entirely.
    """

    def __init__(self, table: NeighborTable, center_ids: np.ndarray, features: FeatureMatrix,
                 attention: str = LEARNED):
        centers = np.unique(np.ascontiguousarray(center_ids, dtype=np.int64))
        if centers.size == 0:
            raise ValueError("empty center set")
        if centers[0] < 0 or centers[-1] >= table.num_nodes:
            raise ValueError("node id out of range")
        self.centers = centers
        learned = attention == LEARNED

        dst2_ids, counts2, sizes2 = self._rows(table, centers)
        self.u1 = np.union1d(centers, dst2_ids) if learned else np.unique(dst2_ids)
        self.level2 = _Level(
            seg=SegmentIndex(np.concatenate(([0], np.cumsum(sizes2)))),
            src_pos=np.repeat(np.searchsorted(self.u1, centers), sizes2) if learned else None,
            dst_pos=np.searchsorted(self.u1, dst2_ids),
            counts=counts2,
        )

        dst1_ids, counts1, sizes1 = self._rows(table, self.u1)
        self.u0 = np.union1d(self.u1, dst1_ids) if learned else np.unique(dst1_ids)
        self.level1 = _Level(
            seg=SegmentIndex(np.concatenate(([0], np.cumsum(sizes1)))),
            src_pos=np.repeat(np.searchsorted(self.u0, self.u1), sizes1) if learned else None,
            dst_pos=np.searchsorted(self.u0, dst1_ids),
            counts=counts1,
        )

        self.x0 = features.csr()[self.u0]

    @staticmethod
    def _rows(table: NeighborTable, nodes: np.ndarray):
        starts = table.unique_offsets[nodes]
        sizes = table.unique_offsets[nodes + 1] - starts
        take = _ragged_ranges(starts, sizes)
        return table.unique_ids[take], table.unique_counts[take], sizes

    def center_positions(self, ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.centers, ids)


def _attend_and_aggregate(layer: LayerWeights, wh_all: Tensor, level: _Level,
                          dropout: float = 0.0,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    """All heads' neighborhood aggregation over compressed segments.

    Sampled rows are compressed to (unique neighbor, multiplicity); learned
    mode folds the multiplicity into the logits (softmax(l + log c) equals the
    softmax over the raw repeated entries), all_ones mode uses it directly as
    the weight.
    """
    if layer.attention == ALL_ONES:
        weights = level.counts_column()  # one column broadcasts over all heads
    else:
        a_src = engine.slice_rows(layer.attn, 0, layer.out_dim)
        a_dst = engine.slice_rows(layer.attn, layer.out_dim, 2 * layer.out_dim)
        score_src = engine.gather_rows(engine.block_dot(wh_all, a_src),
                                       level.src_pos, level.plan_src)
        score_dst = engine.gather_rows(engine.block_dot(wh_all, a_dst),
                                       level.dst_pos, level.plan_dst)
        logits = engine.leaky_relu(engine.add(score_src, score_dst), LEAKY_SLOPE)
        weights = engine.segment_softmax(
            engine.add(logits, level.tiled_log_counts(layer.heads)), level.seg)
        if dropout > 0.0 and rng is not None:
            weights = engine.dropout(weights, dropout, rng)
    messages = engine.gather_rows(wh_all, level.dst_pos, level.plan_dst)
    return engine.segment_weighted_sum(messages, weights, level.seg)


def encode_batch(params: ModelParams, plan: BatchPlan,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Embeddings for plan.centers (one row per center, ascending id order)."""
    cfg = params.config
    if plan.x0.shape[1] != cfg.in_dim:
        raise ValueError(f"feature dim {plan.x0.shape[1]} does not match model in_dim {cfg.in_dim}")
    drop = cfg.dropout

    wh = engine.feature_matmul(plan.x0, params.layer1.w)
    if drop > 0.0 and rng is not None:
        wh = engine.dropout(wh, drop, rng)
    h1 = engine.elu(_attend_and_aggregate(params.layer1, wh, plan.level1, drop, rng))

    wh2 = engine.matmul(h1, params.layer2.w)
    if drop > 0.0 and rng is not None:
        wh2 = engine.dropout(wh2, drop, rng)
    emb = _attend_and_aggregate(params.layer2, wh2, plan.level2, drop, rng)
    return engine.mean_head_blocks(emb, cfg.heads2)


def edge_probabilities(params: ModelParams, embeddings: Tensor,
                       pos_i: np.ndarray, pos_j: np.ndarray) -> Tensor:
    """sigmoid(theta . (emb_i * emb_j)) for each (i, j) position pair."""
    emb_i = engine.gather_rows(embeddings, pos_i)
    emb_j = engine.gather_rows(embeddings, pos_j)
    edge_vec = engine.hadamard(emb_i, emb_j)
    return engine.sigmoid(engine.matmul(edge_vec, params.theta))


def edge_score(params: ModelParams, emb_i: np.ndarray, emb_j: np.ndarray) -> float:
    """Score a single pair from precomputed embeddings (symmetric in i, j)."""
    emb_i = np.asarray(emb_i, dtype=np.float64).ravel()
    emb_j = np.asarray(emb_j, dtype=np.float64).ravel()
    if emb_i.shape != emb_j.shape or emb_i.size != params.theta.rows:
        raise ValueError("embedding dimension mismatch")
    z = float((emb_i * emb_j) @ params.theta.values.ravel())
    return float(engine.sigmoid(Tensor([[z]])).values[0, 0])


def batch_loss(probabilities: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over an edge batch (labels are 0/1)."""
    return engine.bce_mean(probabilities, labels)


def encode(params: ModelParams, node_ids, table: NeighborTable,
           features: FeatureMatrix, chunk_size: int = 2048) -> np.ndarray:
    """Deterministic embeddings for the given node ids (duplicates allowed).

    Runs without a tape; large id sets are processed in chunks to bound
    memory.
    """
    ids = np.ascontiguousarray(np.atleast_1d(node_ids), dtype=np.int64)
    if ids.size == 0:
        return np.zeros((0, params.config.embed_dim))
    if ids.min() < 0 or ids.max() >= table.num_nodes:
        raise ValueError("node id out of range")
    uniq = np.unique(ids)
    out = np.empty((uniq.size, params.config.embed_dim))
    for lo in range(0, uniq.size, chunk_size):
        sub = uniq[lo:lo + chunk_size]
        plan = BatchPlan(table, sub, features, params.config.attention)
        out[lo:lo + sub.size] = encode_batch(params, plan).values
    return out[np.searchsorted(uniq, ids)]


def attention_coefficients(layer: LayerWeights, center_features: np.ndarray,
                           neighbor_features: np.ndarray, head: int = 0) -> np.ndarray:
    """Coefficients one node assigns its neighbor segment, already transformed.

    ``center_features`` is the node's own W-transformed feature row and
    ``neighbor_features`` the (n, out_dim) transformed rows of its segment.
    Learned mode returns the segment softmax; all_ones returns exact ones.
    """
    nbr = np.atleast_2d(np.asarray(neighbor_features, dtype=np.float64))
    if nbr.shape[0] == 0:
        raise ValueError("empty neighbor segment")
    if layer.attention == ALL_ONES:
        return np.ones(nbr.shape[0])
    a = layer.head_attn(head)
    d = nbr.shape[1]
    center = np.asarray(center_features, dtype=np.float64).ravel()
    logits = center @ a[:d] + nbr @ a[d:]
    logits = np.where(logits > 0, logits, LEAKY_SLOPE * logits)
    logits -= logits.max()
    expl = np.exp(logits)
    return expl / expl.sum()


CHECKPOINT_MAGIC = b"DLNK"
CHECKPOINT_VERSION = 1
_MODE_CODES = {LEARNED: 0, ALL_ONES: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    """Binary checkpoint: magic, version, config block, named f64 tensors."""
    cfg = params.config
    named = params.named_tensors()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<6I", cfg.heads1, cfg.heads2, cfg.in_dim,
                             cfg.hidden, cfg.embed_dim, cfg.sample_size))
        fh.write(struct.pack("<B", _MODE_CODES[cfg.attention]))
        fh.write(struct.pack("<d", cfg.dropout))
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", t.rows, t.cols))
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        heads1, heads2, in_dim, hidden, embed_dim, sample_size = struct.unpack("<6I", fh.read(24))
        (mode_code,) = struct.unpack("<B", fh.read(1))
        (dropout,) = struct.unpack("<d", fh.read(8))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        cfg = ModelConfig(in_dim=in_dim, hidden=hidden, heads1=heads1, heads2=heads2,
                          embed_dim=embed_dim, sample_size=sample_size,
                          attention=_MODE_NAMES[mode_code], dropout=dropout)
        tensors: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            buf = fh.read(rows * cols * 8)
            values = np.frombuffer(buf, dtype="<f8").reshape(rows, cols)
            tensors[name] = Tensor(values.copy(), requires_grad=True)
    return assemble_params(cfg, tensors)


def assemble_params(cfg: ModelConfig, tensors: dict[str, Tensor]) -> ModelParams:
    """Wire named tensors into a ModelParams, validating every shape."""
    learned = cfg.attention == LEARNED

    def layer(name: str, heads: int, in_dim: int, out_dim: int, merge: str) -> LayerWeights:
        w = tensors[f"{name}.W"]
        if w.shape != (in_dim, heads * out_dim):
            raise ValueError(f"{name}.W has shape {w.shape}, expected ({in_dim}, {heads * out_dim})")
        attn = tensors[f"{name}.a"] if learned else None
        if learned and attn.shape != (2 * out_dim, heads):
            raise ValueError(f"{name}.a has shape {attn.shape}, expected ({2 * out_dim}, {heads})")
        return LayerWeights(w=w, attn=attn, heads=heads, out_dim=out_dim,
                            merge=merge, attention=cfg.attention)

    layer1 = layer("layer1", cfg.heads1, cfg.in_dim, cfg.hidden, "concat")
    layer2 = layer("layer2", cfg.heads2, cfg.heads1 * cfg.hidden, cfg.embed_dim, "average")
    theta = tensors["theta"]
    if theta.shape != (cfg.embed_dim, 1):
        raise ValueError(f"theta has shape {theta.shape}, expected ({cfg.embed_dim}, 1)")
    return ModelParams(config=cfg, layer1=layer1, layer2=layer2, theta=theta)
