"""Mini-batch training loop with Adam, early stopping and checkpointing.

Per epoch: training negatives are redrawn, positives and negatives are
shuffled into mini-batches, and validation accuracy decides early stopping
(best parameters are kept, not the last ones).  Every random draw derives
from (seed, epoch index), so a run is bitwise reproducible end to end.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import model as model_mod
from .engine import Tape, Tensor
from .evaluation import ScoredEdges, accuracy, auc
from .graph import EdgeSplit, Graph, NeighborTable
from .model import (ALL_ONES, BatchPlan, LayerWeights, ModelConfig, ModelParams,
                    batch_loss, edge_probabilities, encode, encode_batch)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 2000
    patience: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    sample_size: int = 20

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def glorot_init(shape: tuple[int, int], seed) -> Tensor:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)); seeded.

    ``seed`` may be an int or an existing numpy Generator (so a model's
    tensors can be drawn from one sequential stream).
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError("shape entries must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh Glorot-initialized parameters; all_ones mode has no attention vectors.

    Each head's transform and attention vector is drawn with its own per-head
    Glorot bound, then the heads are packed into the stacked column-block
    layout the forward pass uses.
    """
    rng = np.random.default_rng(seed)
    learned = config.attention == model_mod.LEARNED

    def layer(heads: int, in_dim: int, out_dim: int, merge: str) -> LayerWeights:
        w_blocks, a_cols = [], []
        for _ in range(heads):
            w_blocks.append(glorot_init((in_dim, out_dim), rng).values)
            if learned:
                a_cols.append(glorot_init((2 * out_dim, 1), rng).values)
        w = Tensor(np.hstack(w_blocks), requires_grad=True)
        attn = Tensor(np.hstack(a_cols), requires_grad=True) if learned else None
        return LayerWeights(w=w, attn=attn, heads=heads, out_dim=out_dim,
                            merge=merge, attention=config.attention)

    layer1 = layer(config.heads1, config.in_dim, config.hidden, "concat")
    layer2 = layer(config.heads2, config.heads1 * config.hidden,
                   config.embed_dim, "average")
    theta = glorot_init((config.embed_dim, 1), rng)
    return ModelParams(config=config, layer1=layer1, layer2=layer2, theta=theta)


class AdamState:
    """First/second moment buffers per named parameter plus a step counter."""

    def __init__(self, params: ModelParams):
        self.t = 0
        self.moments = {
            name: (np.zeros_like(t.values), np.zeros_like(t.values))
            for name, t in params.named_tensors()
        }
        self._scratch = {name: np.empty_like(t.values)
                         for name, t in params.named_tensors()}


def adam_step(params: ModelParams, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update; every tensor must carry a gradient."""
    state.t += 1
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.eps
    correction1 = 1.0 - b1 ** state.t
    sqrt_correction2 = np.sqrt(1.0 - b2 ** state.t)
    for name, tensor in params.named_tensors():
        g = tensor.grad
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        m, v = state.moments[name]
        scratch = state._scratch[name]
        m *= b1
        np.multiply(g, 1.0 - b1, out=scratch)
        m += scratch
        v *= b2
        np.multiply(g, g, out=scratch)
        scratch *= 1.0 - b2
        v += scratch
        # update = lr * (m / c1) / (sqrt(v) / sqrt(c2) + eps)
        np.sqrt(v, out=scratch)
        scratch /= sqrt_correction2
        scratch += eps
        np.divide(m, scratch, out=scratch)
        scratch *= lr / correction1
        tensor.values -= scratch


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def append(self, epoch: int, train_loss: float, val_acc: float, val_auc: float) -> None:
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "val_acc": val_acc, "val_auc": val_auc})

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.epochs, fh)
            fh.write("\n")


def resample_training_negatives(g: Graph, split: EdgeSplit, rng: np.random.Generator,
                                forbidden: Optional[set] = None) -> np.ndarray:
    """Fresh epoch negatives: uniform non-edge pairs among training nodes.

    Avoids all graph edges and the fixed validation/test negatives, so held
    out pairs never appear as training examples.
    """
    pool = np.unique(split.train_pos)
    count = split.train_pos.shape[0]
    if forbidden is None:
        forbidden = split.all_negative_pairs()
    out = np.empty((count, 2), dtype=np.int64)
    found = 0
    attempts = 0
    limit = max(10_000, 200 * count)
    while found < count:
        attempts += 1
        if attempts > limit:
            raise ValueError("negative resampling did not converge; graph too dense")
        i, z = pool[rng.integers(0, pool.size, size=2)]
        if i == z or g.has_edge(i, z):
            continue
        if (min(i, z), max(i, z)) in forbidden:
            continue
        out[found, 0], out[found, 1] = i, z
        found += 1
    return out


def _score_pairs(params: ModelParams, pairs: np.ndarray, table: NeighborTable,
                 features) -> np.ndarray:
    """Inference-mode probabilities for an (n, 2) id pair array."""
    emb = encode(params, pairs.ravel(), table, features)
    emb_i = emb[0::2]
    emb_j = emb[1::2]
    z = (emb_i * emb_j) @ params.theta.values.ravel()
    probs = np.empty_like(z)
    pos = z >= 0
    probs[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    probs[~pos] = ez / (1.0 + ez)
    return probs


def validation_scores(params: ModelParams, split: EdgeSplit, table: NeighborTable,
                      features) -> ScoredEdges:
    pairs = np.concatenate((split.val_pos, split.val_neg))
    labels = np.concatenate((np.ones(split.val_pos.shape[0]),
                             np.zeros(split.val_neg.shape[0])))
    return ScoredEdges(pairs=pairs, probabilities=_score_pairs(params, pairs, table, features),
                       labels=labels)


def score_test_edges(params: ModelParams, split: EdgeSplit, table: NeighborTable,
                features) -> ScoredEdges:
    pairs = np.concatenate((split.test_pos, split.test_neg))
    labels = np.concatenate((np.ones(split.test_pos.shape[0]),
                             np.zeros(split.test_neg.shape[0])))
    return ScoredEdges(pairs=pairs, probabilities=_score_pairs(params, pairs, table, features),
                       labels=labels)


def train(g: Graph, split: EdgeSplit, table: NeighborTable, model_config: ModelConfig,
          train_config: TrainConfig,
          checkpoint_path: Optional[Union[str, Path]] = None,
          progress: Optional[Callable[[int, float, float, float], None]] = None,
          ) -> tuple[ModelParams, TrainHistory]:
    """Train and return the parameters of the best validation epoch.

    A checkpoint is (re)written at every new validation-accuracy best when
    ``checkpoint_path`` is given.  Divergence (non-finite loss) aborts with a
    diagnostic rather than propagating NaNs.
    """
    if split.train_pos.shape[0] == 0:
        raise ValueError("empty training set")
    if table.sample_size != model_config.sample_size:
        raise ValueError("neighbor table sample size does not match model config")
    params = init_params(model_config, train_config.seed)
    state = AdamState(params)
    history = TrainHistory()
    features = g.features
    forbidden = split.all_negative_pairs()

    best_acc = -np.inf
    best_snapshot = params.copy_values()
    best_epoch = -1
    train_rng_for_dropout = np.random.default_rng([train_config.seed, 0xD0])

    for epoch in range(train_config.max_epochs):
        rng = np.random.default_rng([train_config.seed, epoch])
        negatives = resample_training_negatives(g, split, rng, forbidden)
        pairs = np.concatenate((split.train_pos, negatives))
        labels = np.concatenate((np.ones(split.train_pos.shape[0]),
                                 np.zeros(negatives.shape[0])))
        order = rng.permutation(pairs.shape[0])
        pairs, labels = pairs[order], labels[order]

        loss_sum = 0.0
        n_batches = 0
        for lo in range(0, pairs.shape[0], train_config.batch_size):
            batch = pairs[lo:lo + train_config.batch_size]
            batch_labels = labels[lo:lo + train_config.batch_size]
            plan = BatchPlan(table, batch.ravel(), features, model_config.attention)
            pos_i = plan.center_positions(batch[:, 0])
            pos_j = plan.center_positions(batch[:, 1])
            try:
                with Tape() as tape:
                    emb = encode_batch(params, plan, rng=train_rng_for_dropout)
                    probs = edge_probabilities(params, emb, pos_i, pos_j)
                    loss = batch_loss(probs, batch_labels)
                    tape.backward(loss)
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, batch {n_batches}: {exc}"
                ) from exc
            adam_step(params, state, train_config)
            params.zero_grads()
            loss_sum += float(loss.values[0, 0])
            n_batches += 1

        val = validation_scores(params, split, table, features)
        val_acc = accuracy(val)
        val_auc = auc(val)
        mean_loss = loss_sum / max(n_batches, 1)
        history.append(epoch, mean_loss, val_acc, val_auc)
        if progress is not None:
            progress(epoch, mean_loss, val_acc, val_auc)

        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_snapshot = params.copy_values()
            if checkpoint_path is not None:
                model_mod.save_checkpoint(params, checkpoint_path)
        elif epoch - best_epoch >= train_config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    params.load_values(best_snapshot)
    history.best_epoch = best_epoch
    if checkpoint_path is not None:
        model_mod.save_checkpoint(params, checkpoint_path)
    return params, history
