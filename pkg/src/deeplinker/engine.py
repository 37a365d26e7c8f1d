"""Reverse-mode differentiation over dense float64 matrices.

A deliberately small engine: every tensor is a 2-D float64 array, operations
run eagerly, and an explicit :class:`Tape` records what is needed for the
backward sweep.  The op set is exactly what the two-layer attention encoder,
the Hadamard edge decoder and the cross-entropy loss require; there is no
broadcasting machinery beyond that.

Sparse node features never enter the engine as tensors: they are resolved at
lookup time by :func:`feature_matmul`, which multiplies a constant CSR matrix
into a trainable dense one.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class Tensor:
    """Dense float64 matrix with an optional gradient buffer.

    1-D input is treated as a single row.  ``requires_grad`` marks leaves the
    optimizer owns; tensors produced by ops get it set automatically while a
    tape is active so gradients keep flowing downstream.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"tensors are 2-D matrices, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class SegmentIndex:
    """Contiguous row segments described by an offsets array.

    Rows [offsets[s], offsets[s+1]) form segment ``s``.  Offsets must start at
    zero and be strictly increasing: empty segments are rejected because a
    softmax (or an aggregation) over nothing is undefined.

    Row-sum reductions run through a cached sparse selector matrix, which adds
    members in the same ascending order a per-segment loop would but at one C
    call for the whole batch of segments.
    """

    __slots__ = ("offsets", "sizes", "starts", "_selector")

    def __init__(self, offsets):
        off = np.ascontiguousarray(offsets, dtype=np.int64)
        if off.ndim != 1 or off.size < 2:
            raise ValueError("segment offsets must be a 1-D array of length >= 2")
        if off[0] != 0:
            raise ValueError("segment offsets must start at 0")
        sizes = np.diff(off)
        if (sizes <= 0).any():
            raise ValueError("empty segment")
        self.offsets = off
        self.sizes = sizes
        self.starts = off[:-1]
        self._selector = None

    @classmethod
    def uniform(cls, num_segments: int, size: int) -> "SegmentIndex":
        return cls(np.arange(num_segments + 1, dtype=np.int64) * size)

    @property
    def num_segments(self) -> int:
        return self.offsets.size - 1

    @property
    def total_rows(self) -> int:
        return int(self.offsets[-1])

    def spread(self, per_segment: np.ndarray) -> np.ndarray:
        """Repeat one row per segment out to one row per member."""
        return np.repeat(per_segment, self.sizes, axis=0)

    def reduce(self, per_row: np.ndarray) -> np.ndarray:
        if self._selector is None:
            import scipy.sparse as sp

            total = self.total_rows
            self._selector = sp.csr_matrix(
                (np.ones(total), np.arange(total, dtype=np.int64), self.offsets),
                shape=(self.num_segments, total),
            )
        return self._selector @ per_row

    def max_per_segment(self, per_row: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(per_row, self.starts, axis=0)


class ScatterPlan:
    """Precomputed scatter-add of duplicated row indices.

    Built once per distinct index vector and shared by every gather that uses
    it; the accumulation itself is one sparse selector product, adding
    contributions in ascending source order (deterministic).
    """

    __slots__ = ("index", "unique", "_selector")

    def __init__(self, index: np.ndarray):
        import scipy.sparse as sp

        idx = np.ascontiguousarray(index, dtype=np.int64)
        order = np.argsort(idx, kind="stable")
        sorted_idx = idx[order]
        boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
        starts = np.concatenate(([0], boundaries))
        self.index = idx
        self.unique = sorted_idx[starts]
        indptr = np.concatenate((starts, [idx.size]))
        self._selector = sp.csr_matrix(
            (np.ones(idx.size), order, indptr),
            shape=(self.unique.size, idx.size),
        )

    def scatter_add(self, into: np.ndarray, rows: np.ndarray) -> None:
        into[self.unique] += self._selector @ rows


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one backward pass.

    Use as a context manager around the forward computation; ops executed
    outside any tape run in pure inference mode and record nothing.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor that feeds ``loss``.

        Visits records in exact reverse execution order; gradients of tensors
        consumed several times accumulate additively.  Intermediate gradient
        buffers and the tape itself are freed afterwards.
        """
        if loss.values.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.values.shape}")
        if not self._records:
            raise ValueError("tape is empty")
        loss.grad = np.ones((1, 1))
        for out, backward_fn in reversed(self._records):
            grad = out.grad
            if grad is None:
                continue
            backward_fn(grad)
            out.grad = None  # intermediates are dead once their record ran
        self._records.clear()


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _accumulate(t: Tensor, grad: np.ndarray, fresh: bool = False) -> None:
    """Add into t.grad; ``fresh`` marks a newly allocated array safe to adopt."""
    if t.grad is None:
        t.grad = grad if fresh else np.array(grad, copy=True)
    else:
        t.grad += grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _emit(op: str, values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap op output, enforce finiteness, and record on the active tape."""
    _check_finite(values, op)
    out = Tensor(values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; d(AB) flows as dA = g Bᵀ, dB = Aᵀ g."""
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    values = a.values @ b.values

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.values.T, fresh=True)
        if b.requires_grad:
            _accumulate(b, a.values.T @ g, fresh=True)

    return _emit("matmul", values, (a, b), backward)


def feature_matmul(features, w: Tensor) -> Tensor:
    """Constant sparse (CSR) feature block times a trainable dense matrix.

    ``features`` is a scipy.sparse matrix and never receives gradients; this
    is the single point where sparse node attributes enter the dense engine.
    """
    if features.shape[1] != w.rows:
        raise ValueError(f"feature_matmul shape mismatch: {features.shape} x {w.shape}")
    values = features @ w.values

    def backward(g):
        if w.requires_grad:
            _accumulate(w, features.T @ g, fresh=True)

    return _emit("feature_matmul", np.asarray(values), (w,), backward)


def gather_rows(t: Tensor, index: np.ndarray, plan: Optional[ScatterPlan] = None) -> Tensor:
    """Select rows (duplicates allowed); backward scatter-adds into sources."""
    idx = np.ascontiguousarray(index, dtype=np.int64)
    values = t.values[idx]
    need_plan = t.requires_grad and _active_tape() is not None
    scatter = plan if plan is not None else (ScatterPlan(idx) if need_plan else None)

    def backward(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            scatter.scatter_add(t.grad, g)

    return _emit("gather_rows", values, (t,), backward)


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice; backward pads the complement with zeros."""
    if not (0 <= start < stop <= t.rows):
        raise ValueError(f"slice_rows [{start}:{stop}] out of range for {t.shape}")
    values = t.values[start:stop].copy()

    def backward(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            t.grad[start:stop] += g

    return _emit("slice_rows", values, (t,), backward)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice; backward pads the complement with zeros."""
    if not (0 <= start < stop <= t.cols):
        raise ValueError(f"slice_cols [{start}:{stop}] out of range for {t.shape}")
    values = t.values[:, start:stop].copy()

    def backward(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            t.grad[:, start:stop] += g

    return _emit("slice_cols", values, (t,), backward)


def block_dot(x: Tensor, a: Tensor) -> Tensor:
    """Per-head dot products: column block k of ``x`` against column k of ``a``.

    ``x`` is (n, heads*dim) with per-head blocks side by side, ``a`` is
    (dim, heads); the result is (n, heads).  This is the attention-logit
    contraction for every head at once.
    """
    dim, heads = a.shape
    n, total = x.shape
    if total != dim * heads:
        raise ValueError(f"block_dot: {x.shape} does not split into {heads} blocks of {dim}")
    x3 = x.values.reshape(n, heads, dim)
    values = np.einsum("nhf,fh->nh", x3, a.values, optimize=True)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, (g[:, :, None] * a.values.T[None, :, :]).reshape(n, total), fresh=True)
        if a.requires_grad:
            _accumulate(a, np.einsum("nhf,nh->fh", x3, g, optimize=True), fresh=True)

    return _emit("block_dot", values, (x, a), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along rows (axis 0) or columns (axis 1)."""
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    if not tensors:
        raise ValueError("concat of zero tensors")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]
    edges = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            if t.requires_grad:
                _accumulate(t, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _emit("concat", values, tensors, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    values = a.values + b.values

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _emit("add", values, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    values = a.values * b.values

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.values, fresh=True)
        if b.requires_grad:
            _accumulate(b, g * a.values, fresh=True)

    return _emit("hadamard", values, (a, b), backward)


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the kink at 0 takes the negative-side slope."""
    if slope < 0:
        raise ValueError("slope must be >= 0")
    x = t.values
    positive = x > 0
    values = np.where(positive, x, slope * x)

    def backward(g):
        if t.requires_grad:
            _accumulate(t, g * np.where(positive, 1.0, slope), fresh=True)

    return _emit("leaky_relu", values, (t,), backward)


def elu(t: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise; smooth at 0."""
    x = t.values
    negative = x <= 0
    exp_neg = np.exp(x[negative])
    values = x.copy()
    values[negative] = exp_neg - 1.0

    def backward(g):
        if t.requires_grad:
            slope = np.ones_like(x)
            slope[negative] = exp_neg
            _accumulate(t, g * slope, fresh=True)

    return _emit("elu", values, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    x = t.values
    values = np.empty_like(x)
    pos = x >= 0
    values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    values[~pos] = ex / (1.0 + ex)

    def backward(g):
        if t.requires_grad:
            _accumulate(t, g * values * (1.0 - values), fresh=True)

    return _emit("sigmoid", values, (t,), backward)


def segment_softmax(logits: Tensor, segments: SegmentIndex) -> Tensor:
    """Column-wise softmax within each row segment.

    Stabilized by subtracting the per-segment maximum before exponentiation;
    every segment column sums to exactly the normalized total (1 up to float
    rounding) and the result is invariant to per-segment logit shifts.
    """
    if logits.rows != segments.total_rows:
        raise ValueError(f"segment_softmax: {logits.rows} rows vs offsets ending at {segments.total_rows}")
    x = logits.values
    seg_max = segments.max_per_segment(x)
    shifted = np.exp(x - segments.spread(seg_max))
    denom = segments.reduce(shifted)
    values = shifted / segments.spread(denom)

    def backward(g):
        if logits.requires_grad:
            inner = segments.spread(segments.reduce(values * g))
            _accumulate(logits, values * (g - inner), fresh=True)

    return _emit("segment_softmax", values, (logits,), backward)


def segment_weighted_sum(values_t: Tensor, weights: Tensor, segments: SegmentIndex) -> Tensor:
    """Per-segment sum of rows scaled by a per-row weight column.

    Multi-head form: when ``weights`` has H > 1 columns, ``values_t`` must be
    (rows, H*F) with per-head blocks side by side, and block k is scaled by
    weight column k.
    """
    rows, total = values_t.shape
    if weights.rows != rows:
        raise ValueError(f"weights must have {rows} rows, got {weights.shape}")
    heads = weights.cols
    if total % heads:
        raise ValueError(f"values width {total} does not split into {heads} head blocks")
    if rows != segments.total_rows:
        raise ValueError("segment_weighted_sum: rows do not match segment offsets")
    if heads == 1:
        weighted = values_t.values * weights.values
    else:
        v3 = values_t.values.reshape(rows, heads, total // heads)
        weighted = (v3 * weights.values[:, :, None]).reshape(rows, total)
    out = segments.reduce(weighted)

    def backward(g):
        g_rows = segments.spread(g)
        if heads == 1:
            if values_t.requires_grad:
                _accumulate(values_t, g_rows * weights.values, fresh=True)
            if weights.requires_grad:
                _accumulate(weights, (values_t.values * g_rows).sum(axis=1, keepdims=True), fresh=True)
        else:
            depth = total // heads
            g3 = g_rows.reshape(rows, heads, depth)
            if values_t.requires_grad:
                _accumulate(values_t, (g3 * weights.values[:, :, None]).reshape(rows, total), fresh=True)
            if weights.requires_grad:
                v3b = values_t.values.reshape(rows, heads, depth)
                _accumulate(weights, (v3b * g3).sum(axis=2), fresh=True)

    return _emit("segment_weighted_sum", out, (values_t, weights), backward)


def mean_head_blocks(t: Tensor, heads: int) -> Tensor:
    """Average the H side-by-side column blocks of a (rows, H*F) tensor."""
    rows, total = t.shape
    if total % heads:
        raise ValueError(f"width {total} does not split into {heads} head blocks")
    if heads == 1:
        return t
    depth = total // heads
    values = t.values.reshape(rows, heads, depth).mean(axis=1)

    def backward(g):
        if t.requires_grad:
            spread = np.broadcast_to((g / heads)[:, None, :], (rows, heads, depth))
            _accumulate(t, spread.reshape(rows, total))

    return _emit("mean_head_blocks", values, (t,), backward)


def mean_heads(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise average of same-shaped tensors (multi-head merge)."""
    if not tensors:
        raise ValueError("mean_heads of zero tensors")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError("mean_heads shape mismatch")
    k = float(len(tensors))
    values = tensors[0].values.copy()
    for t in tensors[1:]:
        values += t.values
    values /= k

    def backward(g):
        scaled = g / k
        for t in tensors:
            if t.requires_grad:
                _accumulate(t, scaled)

    return _emit("mean_heads", values, tensors, backward)


def sum_all(t: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    values = np.array([[t.values.sum()]])

    def backward(g):
        if t.requires_grad:
            _accumulate(t, np.full_like(t.values, g[0, 0]), fresh=True)

    return _emit("sum_all", values, (t,), backward)


# Probability clamp keeping log() finite in the cross-entropy loss.
PROB_EPS = 1e-12


def bce_mean(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of a probability column against 0/1 labels.

    Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the log; the
    gradient is evaluated at the clamped value so it stays finite even for
    fully saturated predictions.
    """
    y = np.ascontiguousarray(labels, dtype=np.float64).reshape(-1, 1)
    if probs.shape != y.shape:
        raise ValueError(f"bce_mean shape mismatch: {probs.shape} vs {y.shape}")
    if probs.rows == 0:
        raise ValueError("empty batch")
    p = np.clip(probs.values, PROB_EPS, 1.0 - PROB_EPS)
    n = p.shape[0]
    values = np.array([[-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n]])

    def backward(g):
        if probs.requires_grad:
            _accumulate(probs, g[0, 0] * (p - y) / (p * (1.0 - p) * n), fresh=True)

    return _emit("bce_mean", values, (probs,), backward)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return t
    mask = (rng.random(t.shape) >= rate) / (1.0 - rate)
    values = t.values * mask

    def backward(g):
        if t.requires_grad:
            _accumulate(t, g * mask, fresh=True)

    return _emit("dropout", values, (t,), backward)


def backward(loss: Tensor) -> None:
    """Run the innermost active tape's backward sweep from ``loss``."""
    tape = _active_tape()
    if tape is None:
        raise ValueError("no active tape")
    tape.backward(loss)
