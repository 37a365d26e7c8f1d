import numpy as np
import pytest

from deeplinker import (ModelConfig, TrainConfig, adam_step, build_neighbor_table,
                        glorot_init, init_params, train)
from deeplinker.graph import EdgeSplit
from deeplinker.model import ALL_ONES, LEARNED
from deeplinker.training import AdamState, resample_training_negatives
from deeplinker import training as training_mod
from deeplinker.evaluation import ScoredEdges

from conftest import TOY_EDGES


class TestGlorotInit:
    def test_bound(self):
        t = glorot_init((3, 3), seed=0)
        assert np.abs(t.values).max() < 1.0  # sqrt(6/6)

    def test_determinism(self):
        a = glorot_init((4, 7), seed=13)
        b = glorot_init((4, 7), seed=13)
        assert np.array_equal(a.values, b.values)

    def test_statistics(self):
        t = glorot_init((100, 100), seed=5)
        bound = np.sqrt(6.0 / 200.0)
        std_err = (bound / np.sqrt(3.0)) / 100.0
        assert abs(t.values.mean()) < 3.0 * std_err
        assert np.abs(t.values).max() <= bound

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            glorot_init((0, 3), seed=0)


def scalar_params(value=1.0):
    cfg = ModelConfig(in_dim=1, hidden=1, heads1=1, heads2=1, embed_dim=1,
                      sample_size=1, attention=ALL_ONES)
    params = init_params(cfg, seed=0)
    for _, t in params.named_tensors():
        t.values[:] = value
    return params


class TestAdamStep:
    def test_first_step_magnitude_is_learning_rate(self):
        params = scalar_params()
        state = AdamState(params)
        cfg = TrainConfig(learning_rate=0.001)
        before = {n: t.values.copy() for n, t in params.named_tensors()}
        for _, t in params.named_tensors():
            t.grad = np.ones_like(t.values)
        adam_step(params, state, cfg)
        # m_hat = v_hat = 1 on the first unit-gradient step
        expected = 0.001 / (1.0 + 1e-8)
        for name, t in params.named_tensors():
            assert abs((before[name] - t.values)[0, 0] - expected) < 1e-18

    def test_zero_gradient_is_fixed_point_but_t_increments(self):
        params = scalar_params()
        state = AdamState(params)
        before = {n: t.values.copy() for n, t in params.named_tensors()}
        for _, t in params.named_tensors():
            t.grad = np.zeros_like(t.values)
        adam_step(params, state, TrainConfig())
        assert state.t == 1
        for name, t in params.named_tensors():
            assert np.array_equal(t.values, before[name])

    def test_missing_gradient_is_an_error(self):
        params = scalar_params()
        state = AdamState(params)
        with pytest.raises(ValueError, match="missing gradient"):
            adam_step(params, state, TrainConfig())

    def test_ten_steps_are_deterministic(self):
        results = []
        for _ in range(2):
            params = scalar_params(0.5)
            state = AdamState(params)
            cfg = TrainConfig(learning_rate=0.01)
            rng = np.random.default_rng(3)
            for _ in range(10):
                for _, t in params.named_tensors():
                    t.grad = rng.normal(size=t.values.shape)
                adam_step(params, state, cfg)
            results.append({n: t.values.copy() for n, t in params.named_tensors()})
        for name in results[0]:
            assert np.array_equal(results[0][name], results[1][name])


def toy_overfit_setup(toy_graph):
    """Single-batch split: every edge trains, one pair monitors validation."""
    edges = toy_graph.edges()
    split = EdgeSplit(
        train_pos=edges,
        val_pos=edges[:1], test_pos=edges[:1],
        train_neg=np.array([[0, 4], [3, 4]]),
        val_neg=np.array([[1, 4]]), test_neg=np.array([[1, 4]]),
        seed=0, test_frac=0.0, val_frac=0.0,
    )
    table = build_neighbor_table(toy_graph, edges, sample_size=3, seed=0)
    return split, table


class TestTrain:
    def test_overfits_single_batch(self, toy_graph):
        split, table = toy_overfit_setup(toy_graph)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=4, heads1=2,
                                heads2=1, embed_dim=6, sample_size=3, attention=LEARNED)
        train_cfg = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=500,
                                patience=500, seed=0, sample_size=3)
        params, history = train(toy_graph, split, table, model_cfg, train_cfg)
        losses = [rec["train_loss"] for rec in history.epochs]
        assert min(losses) < 0.05, f"single-batch loss only reached {min(losses):.4f}"

    def test_loss_nonnegative_and_decreasing_on_overfit_path(self, toy_graph):
        split, table = toy_overfit_setup(toy_graph)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=4, heads1=2,
                                heads2=1, embed_dim=6, sample_size=3, attention=LEARNED)
        train_cfg = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=200,
                                patience=200, seed=0, sample_size=3)
        _, history = train(toy_graph, split, table, model_cfg, train_cfg)
        losses = np.array([rec["train_loss"] for rec in history.epochs])
        assert (losses >= 0.0).all()
        # single-batch optimization trends strictly down (25-step block means)
        blocks = losses[:200].reshape(8, 25).mean(axis=1)
        assert (np.diff(blocks) < 0).all()
        assert losses[199] < losses[0]

    def test_early_stop_returns_first_epoch_params(self, toy_graph, monkeypatch):
        split, table = toy_overfit_setup(toy_graph)
        calls = {"n": 0}

        def fake_validation(params, split_, table_, features):
            # strictly decreasing accuracy: epoch 0 scores 1.0, epoch 1 scores 0.0
            calls["n"] += 1
            good = calls["n"] == 1
            probs = np.array([0.9, 0.1]) if good else np.array([0.1, 0.9])
            return ScoredEdges(pairs=np.zeros((2, 2), dtype=int),
                               probabilities=probs, labels=np.array([1.0, 0.0]))

        monkeypatch.setattr(training_mod, "validation_scores", fake_validation)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=1,
                                heads2=1, embed_dim=2, sample_size=3, attention=ALL_ONES)
        train_cfg = TrainConfig(learning_rate=0.01, batch_size=64, max_epochs=50,
                                patience=1, seed=0, sample_size=3)
        params, history = train(toy_graph, split, table, model_cfg, train_cfg)
        assert len(history.epochs) == 2  # stopped right after the second epoch
        assert history.best_epoch == 0

    def test_returns_best_epoch_not_last(self, toy_graph):
        split, table = toy_overfit_setup(toy_graph)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=1,
                                heads2=1, embed_dim=4, sample_size=3, attention=LEARNED)
        train_cfg = TrainConfig(learning_rate=0.05, batch_size=64, max_epochs=30,
                                patience=30, seed=1, sample_size=3)
        params, history = train(toy_graph, split, table, model_cfg, train_cfg)
        accs = [rec["val_acc"] for rec in history.epochs]
        assert history.best_epoch == int(np.argmax(accs))

    def test_bitwise_reproducible(self, toy_graph, tmp_path):
        split, table = toy_overfit_setup(toy_graph)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=2,
                                heads2=1, embed_dim=4, sample_size=3, attention=LEARNED)
        train_cfg = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=8,
                                patience=8, seed=21, sample_size=3)
        runs = []
        for tag in ("a", "b"):
            params, history = train(toy_graph, split, table, model_cfg, train_cfg,
                                    checkpoint_path=tmp_path / f"{tag}.dlnk")
            runs.append((params, history))
        p1, h1 = runs[0]
        p2, h2 = runs[1]
        for (n1, t1), (n2, t2) in zip(p1.named_tensors(), p2.named_tensors()):
            assert n1 == n2
            assert t1.values.tobytes() == t2.values.tobytes()
        assert h1.epochs == h2.epochs
        assert (tmp_path / "a.dlnk").read_bytes() == (tmp_path / "b.dlnk").read_bytes()

    def test_all_ones_has_strictly_fewer_parameters(self, toy_graph):
        base = dict(in_dim=toy_graph.features.dim, hidden=4, heads1=2, heads2=1,
                    embed_dim=6, sample_size=3)
        learned = init_params(ModelConfig(attention=LEARNED, **base), seed=0)
        allones = init_params(ModelConfig(attention=ALL_ONES, **base), seed=0)
        count = lambda p: sum(t.values.size for _, t in p.named_tensors())
        assert count(allones) < count(learned)
        assert not any(n.endswith(".a") for n, _ in allones.named_tensors())

    def test_empty_training_set_rejected(self, toy_graph):
        split, table = toy_overfit_setup(toy_graph)
        split.train_pos = np.zeros((0, 2), dtype=np.int64)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=1,
                                heads2=1, embed_dim=2, sample_size=3)
        with pytest.raises(ValueError, match="empty training set"):
            train(toy_graph, split, table, model_cfg, TrainConfig(sample_size=3))

    def test_divergence_aborts_with_diagnostic(self, toy_graph, monkeypatch):
        split, table = toy_overfit_setup(toy_graph)

        def explode(probabilities, labels):
            raise FloatingPointError("bce_mean produced non-finite values")

        monkeypatch.setattr(training_mod, "batch_loss", explode)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=1,
                                heads2=1, embed_dim=2, sample_size=3, attention=ALL_ONES)
        with pytest.raises(RuntimeError, match="diverged at epoch 0"):
            train(toy_graph, split, table, model_cfg,
                  TrainConfig(max_epochs=3, sample_size=3))

    def test_max_epochs_zero_returns_initial_params(self, toy_graph, tmp_path):
        split, table = toy_overfit_setup(toy_graph)
        model_cfg = ModelConfig(in_dim=toy_graph.features.dim, hidden=2, heads1=1,
                                heads2=1, embed_dim=2, sample_size=3, attention=ALL_ONES)
        cfg = TrainConfig(max_epochs=0, sample_size=3, seed=4)
        params, history = train(toy_graph, split, table, model_cfg, cfg,
                                checkpoint_path=tmp_path / "init.dlnk")
        fresh = init_params(model_cfg, seed=4)
        for (_, a), (_, b) in zip(params.named_tensors(), fresh.named_tensors()):
            assert np.array_equal(a.values, b.values)
        assert history.epochs == []
        assert (tmp_path / "init.dlnk").is_file()


class TestNegativeResampling:
    def test_reproducible_from_seed_and_epoch(self, medium_setup):
        g, split, table = medium_setup
        draws = [resample_training_negatives(g, split, np.random.default_rng([9, epoch]))
                 for epoch in (0, 1, 0)]
        assert np.array_equal(draws[0], draws[2])
        assert not np.array_equal(draws[0], draws[1])

    def test_avoids_edges_and_heldout_negatives(self, medium_setup):
        g, split, table = medium_setup
        forbidden = split.all_negative_pairs()
        neg = resample_training_negatives(g, split, np.random.default_rng(0))
        pool = set(np.unique(split.train_pos).tolist())
        for i, j in neg.tolist():
            assert not g.has_edge(i, j)
            assert (min(i, j), max(i, j)) not in forbidden
            assert i in pool and j in pool
