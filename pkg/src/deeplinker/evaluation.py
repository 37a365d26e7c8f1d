"""Link-prediction metrics, attention-based node ranking, embedding export
and the node-classification harness.

Every function here is a pure function of immutable inputs; randomness (the
classification train/test resampling) is derived from explicit seeds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .graph import Graph, NeighborTable
from .model import ALL_ONES, LEAKY_SLOPE, ModelParams, encode

try:  # deferred import cost; sklearn is only needed by classify_eval
    from sklearn.linear_model import LogisticRegression
except ImportError:  # pragma: no cover
    LogisticRegression = None


@dataclass
class ScoredEdges:
    """Predicted edge probabilities with their true 0/1 labels."""

    pairs: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probabilities = np.ascontiguousarray(self.probabilities, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if self.probabilities.shape != self.labels.shape:
            raise ValueError("probabilities and labels must align")
        if self.probabilities.size and (
            self.probabilities.min() < 0 or self.probabilities.max() > 1
        ):
            raise ValueError("probabilities must lie in [0, 1]")


def accuracy(scored: ScoredEdges, threshold: float = 0.5) -> float:
    """Fraction of pairs classified correctly; p >= threshold predicts an edge."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if scored.probabilities.size == 0:
        raise ValueError("empty input")
    predicted = scored.probabilities >= threshold
    return float((predicted == (scored.labels == 1.0)).mean())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    boundary = np.flatnonzero(np.diff(sx)) + 1
    starts = np.concatenate(([0], boundary))
    ends = np.concatenate((boundary, [x.size]))
    means = (starts + 1 + ends) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(means, ends - starts)
    return ranks


def auc(scored: ScoredEdges) -> float:
    """Mann-Whitney AUC: P(pos scored above neg) with ties counted half.

    Computed by ranking, which matches exhaustive pairwise comparison exactly
    (rank sums of half-integers are exact in float64).
    """
    pos_mask = scored.labels == 1.0
    n_pos = int(pos_mask.sum())
    n_neg = int(scored.labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scored.probabilities)
    pos_rank_sum = ranks[pos_mask].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def attention_rank(params: ModelParams, g: Graph) -> np.ndarray:
    """Total attention each node receives across second-layer heads.

    Evaluated over the full neighborhoods of ``g`` (not the sampled table):
    for every node j and neighbor i, the trained coefficient of j toward i is
    accumulated onto i.  Isolated nodes neither give nor receive attention and
    score 0.  Requires a learned-attention checkpoint; the all_ones variant
    has constant coefficients and nothing to rank.
    """
    cfg = params.config
    if cfg.attention == ALL_ONES:
        raise ValueError("attention_rank needs a learned-attention checkpoint")
    if g.features.dim != cfg.in_dim:
        raise ValueError("graph features do not match checkpoint input dim")
    n = g.num_nodes
    deg = g.degrees()
    nonempty = deg > 0
    seg_starts = g.offsets[:-1][nonempty]
    seg_sizes = deg[nonempty]
    src = np.repeat(np.arange(n, dtype=np.int64), deg)
    dst = g.targets
    x = g.features.csr()

    def full_attention(wh: np.ndarray, attn: np.ndarray, out_dim: int) -> np.ndarray:
        """Per directed edge (src -> dst): attention of src toward dst."""
        s_src = wh @ attn[:out_dim]
        s_dst = wh @ attn[out_dim:]
        logits = _leaky(s_src[src] + s_dst[dst])
        seg_max = np.maximum.reduceat(logits, seg_starts)
        shifted = np.exp(logits - np.repeat(seg_max, seg_sizes))
        denom = np.add.reduceat(shifted, seg_starts)
        return shifted / np.repeat(denom, seg_sizes)

    h1 = np.zeros((n, cfg.heads1 * cfg.hidden))
    for k in range(cfg.heads1):
        wh = np.asarray(x @ params.layer1.head_w(k))
        alpha = full_attention(wh, params.layer1.head_attn(k), cfg.hidden)
        agg = np.add.reduceat(wh[dst] * alpha[:, None], seg_starts, axis=0)
        block = h1[:, k * cfg.hidden:(k + 1) * cfg.hidden]
        block[nonempty] = np.where(agg > 0, agg, np.exp(np.minimum(agg, 0.0)) - 1.0)

    scores = np.zeros(n)
    for k in range(cfg.heads2):
        wh2 = h1 @ params.layer2.head_w(k)
        alpha = full_attention(wh2, params.layer2.head_attn(k), cfg.embed_dim)
        scores += np.bincount(dst, weights=alpha, minlength=n)
    return scores


def hit_accuracy(scores: np.ndarray, truth_ids: np.ndarray, k: int = None) -> float:
    """|top-k by score ∩ truth| / k, ties broken by ascending node id."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.unique(np.asarray(truth_ids, dtype=np.int64))
    if k is None:
        k = truth.size
    if k > scores.size:
        raise ValueError(f"k={k} exceeds the number of nodes {scores.size}")
    ids = np.arange(scores.size)
    order = np.lexsort((ids, -scores))
    top = set(order[:k].tolist())
    hits = sum(1 for t in truth.tolist() if t in top)
    return hits / k


def spearman(scores: np.ndarray, truth_values: np.ndarray) -> float:
    """Rank correlation with average-rank tie handling, in [-1, 1]."""
    a = np.asarray(scores, dtype=np.float64)
    b = np.asarray(truth_values, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two aligned vectors of length >= 2")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    va = (ra * ra).sum()
    vb = (rb * rb).sum()
    if va == 0 or vb == 0:
        raise ValueError("zero variance in a ranking")
    return float((ra * rb).sum() / np.sqrt(va * vb))


def export_embeddings(params: ModelParams, g: Graph, table: NeighborTable,
                      path: Union[str, Path]) -> None:
    """One line per node: original id then the embedding floats.

    Values are written with round-trip float repr, so two exports of the same
    checkpoint are byte-identical and equal encode() output exactly.
    """
    emb = encode(params, np.arange(g.num_nodes), table, g.features)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(g.num_nodes):
            row = " ".join(repr(float(v)) for v in emb[i])
            fh.write(f"{g.node_ids[i]} {row}\n")


def load_embeddings(path: Union[str, Path]) -> tuple[list[str], np.ndarray]:
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            ids.append(tokens[0])
            rows.append([float(t) for t in tokens[1:]])
    return ids, np.asarray(rows)


def _stratified_indices(labels: np.ndarray, fraction: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Per-class proportional draw; flags whether some class got nothing."""
    picks = []
    complete = True
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        take = int(fraction * members.size + 0.5)
        if take == 0:
            complete = False
            continue
        picks.append(rng.permutation(members)[:take])
    idx = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    return np.sort(idx), complete


def classify_eval(embeddings: np.ndarray, labels: Sequence, train_fractions: Sequence[float],
                  repeats: int = 10, seed: int = 0) -> dict[float, float]:
    """Micro-F1 of logistic regression on embeddings, per training fraction.

    For each fraction: draw a stratified training set, fit an L2-regularized
    multinomial logistic regression (C=1.0, tol=1e-6), score the held-out
    nodes, and average over ``repeats`` draws.  Micro-F1 equals plain accuracy
    in this single-label setting.  A draw that leaves some class without
    training examples is warned about and redrawn, erroring after 10 failures.
    """
    if LogisticRegression is None:  # pragma: no cover
        raise ImportError("classify_eval requires scikit-learn")
    emb = np.asarray(embeddings, dtype=np.float64)
    _, y = np.unique(np.asarray(labels), return_inverse=True)
    if np.unique(y).size < 2:
        raise ValueError("need at least two classes")
    if emb.shape[0] != y.size:
        raise ValueError("embeddings and labels must align")
    results: dict[float, float] = {}
    for fi, frac in enumerate(train_fractions):
        if not 0 < frac < 1:
            raise ValueError("train fractions must be in (0, 1)")
        scores = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, fi, r])
            for attempt in range(10):
                train_idx, complete = _stratified_indices(y, frac, rng)
                if complete:
                    break
                warnings.warn(
                    f"fraction {frac} left a class without training examples; resampling"
                )
            else:
                raise ValueError(
                    f"fraction {frac} cannot cover every class after 10 attempts"
                )
            mask = np.zeros(y.size, dtype=bool)
            mask[train_idx] = True
            clf = LogisticRegression(C=1.0, tol=1e-6, max_iter=2000)
            clf.fit(emb[mask], y[mask])
            predicted = clf.predict(emb[~mask])
            scores.append(float((predicted == y[~mask]).mean()))
        results[float(frac)] = float(np.mean(scores))
    return results


def load_binary_truth(path: Union[str, Path], g: Graph) -> np.ndarray:
    """Elite-set file: one node id per line -> dense node indices."""
    ids = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if tok:
                ids.append(g.index_of(tok[0]))
    return np.asarray(ids, dtype=np.int64)


def load_real_truth(path: Union[str, Path], g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Score file: "node_id value" per line -> (dense indices, values)."""
    ids, vals = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 2:
                raise ValueError(f"{path}: expected 'node_id value' lines")
            ids.append(g.index_of(tok[0]))
            vals.append(float(tok[1]))
    return np.asarray(ids, dtype=np.int64), np.asarray(vals)


def load_labels(path: Union[str, Path]) -> dict[str, str]:
    """Class file: "node_id label" per line, keyed by original node id."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 2:
                raise ValueError(f"{path}: expected 'node_id label' lines")
            out[tok[0]] = tok[1]
    return out
