import numpy as np
import pytest

from sparsemetric.evaluation import evaluate
from sparsemetric.losses import LossSpec, grad_w_from_dS
from sparsemetric.metric import (MetricConfig, MetricParams, init_identity, materialize_dense,
                                 score_matrix, support_mask)
from sparsemetric.prng import PCG32
from sparsemetric.synth import SynthSpec, split, synth_gen
from sparsemetric.train import (NumericError, TrainConfig, TrainState, apply_update, epoch_batches,
                                sample_batch, train, weight_dropout_mask)

from conftest import unit_rows


@pytest.fixture(scope="module")
def blockmix():
    X, Y, _, _ = synth_gen(SynthSpec(400, 16, "blockmix", 4, sigma=0.1, seed=7))
    return split(X, Y, 300)


class TestSampleBatch:
    def test_full_batch_is_permutation(self):
        X = np.arange(10)
        _, _, idx = sample_batch(X, X, 10, PCG32(3))
        assert sorted(idx.tolist()) == list(range(10))

    def test_deterministic(self):
        X = np.arange(50)
        a = sample_batch(X, X, 8, PCG32(11))[2]
        b = sample_batch(X, X, 8, PCG32(11))[2]
        np.testing.assert_array_equal(a, b)

    def test_golden(self):
        X = np.arange(10)
        assert sample_batch(X, X, 4, PCG32(42))[2].tolist() == [3, 4, 2, 0]

    def test_too_large(self):
        with pytest.raises(ValueError):
            sample_batch(np.arange(3), np.arange(3), 4, PCG32(0))

    def test_epoch_batches_cover_all(self):
        batches = epoch_batches(10, 4, PCG32(1))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
        assert [len(b) for b in epoch_batches(9, 4, PCG32(1))] == [4, 4]


def _state(cfg, dtype=np.float64):
    return TrainState.fresh(init_identity(cfg, dtype), PCG32(0))


class TestApplyUpdate:
    def test_zero_grad(self):
        for opt in ("sgd", "adam"):
            st = _state(MetricConfig("diag", 4))
            apply_update(st, np.zeros(4), TrainConfig(optimizer=opt))
            np.testing.assert_array_equal(st.params.weights, np.ones(4))

    def test_sgd_arithmetic(self):
        st = _state(MetricConfig("diag", 1))
        apply_update(st, np.array([0.5]), TrainConfig(optimizer="sgd", learning_rate=0.1))
        assert st.params.weights[0] == pytest.approx(0.95)

    def test_adam_first_step(self):
        st = _state(MetricConfig("diag", 2))
        apply_update(st, np.array([0.3, -2.0]), TrainConfig(optimizer="adam", learning_rate=0.01))
        # bias-corrected first step moves each weight by lr * sign(g)
        np.testing.assert_allclose(st.params.weights, [0.99, 1.01], atol=1e-7)
        assert st.step == 1

    @pytest.mark.parametrize("opt", ["sgd", "adam"])
    def test_decay_keeps_mask(self, opt):
        cfg = MetricConfig("bdiag", 8, 2)
        st = _state(cfg)
        for _ in range(20):
            apply_update(st, np.zeros(cfg.weight_shape), TrainConfig(optimizer=opt, weight_decay=0.5, learning_rate=0.1))
        M = materialize_dense(st.params)
        assert np.all(M[~support_mask(cfg)] == 0)
        assert np.all(np.abs(st.params.weights) < 1)

    def test_non_finite_rejected(self):
        st = _state(MetricConfig("diag", 2))
        with pytest.raises(NumericError):
            apply_update(st, np.array([np.nan, 0.0]), TrainConfig())
        np.testing.assert_array_equal(st.params.weights, np.ones(2))
        assert st.step == 0


class TestDropout:
    def test_zero_rate(self):
        p = init_identity(MetricConfig("bdiag", 8, 2))
        np.testing.assert_array_equal(weight_dropout_mask(p, 0.0, PCG32(0)), np.ones(p.weights.shape))

    def test_deterministic(self):
        p = init_identity(MetricConfig("dense", 8))
        a = weight_dropout_mask(p, 0.5, PCG32(9))
        b = weight_dropout_mask(p, 0.5, PCG32(9))
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a).tolist()) <= {0.0, 2.0}

    def test_unbiased_score(self):
        rng = np.random.default_rng(0)
        cfg = MetricConfig("bdiag", 8, 4)
        p = MetricParams(cfg, np.abs(rng.standard_normal(cfg.weight_shape)) + 0.5)
        x, y = np.abs(unit_rows(rng, 2, 8))
        target = float(score_matrix(x[None], y[None], p)[0, 0])
        gen = PCG32(1)
        total = 0.0
        n = 10_000
        for _ in range(n):
            keep = weight_dropout_mask(p, 0.3, gen)
            total += float(score_matrix(x[None], y[None], MetricParams(cfg, p.weights * keep))[0, 0])
        assert abs(total / n - target) / abs(target) < 0.02


class TestTrain:
    def test_zero_epochs_is_cosine(self, blockmix):
        (Xtr, Ytr), (Xte, Yte, gt) = blockmix
        res = train(Xtr, Ytr, MetricConfig("bdiag", 16, 4), TrainConfig(epochs=0, eval_every=1), eval_set=(Xte, Yte, gt))
        np.testing.assert_array_equal(materialize_dense(res.params), np.eye(16))
        assert len(res.history) == 1
        cosine = evaluate(score_matrix(Xte, Yte, init_identity(MetricConfig("cosine", 16))), gt)
        assert res.reports[0] == (0, cosine)

    def test_diag_beats_cosine_on_reweighting(self):
        w = np.where(np.arange(16) < 4, 3.0, 0.2)
        w[::2] *= -1
        X, Y, _, _ = synth_gen(SynthSpec(600, 16, "diag", weights=w, sigma=0.3, seed=3))
        (Xtr, Ytr), (Xte, Yte, gt) = split(X, Y, 400)
        cos = evaluate(score_matrix(Xte, Yte, init_identity(MetricConfig("cosine", 16))), gt).forward.recall[1]
        res = train(Xtr, Ytr, MetricConfig("diag", 16), TrainConfig(epochs=30, batch_size=64, learning_rate=5e-3, seed=1))
        learned = evaluate(score_matrix(Xte, Yte, res.params), gt).forward.recall[1]
        assert learned > cos

    def test_identity_init_lower_early_loss(self, blockmix):
        (Xtr, Ytr), _ = blockmix
        cfg = MetricConfig("bdiag", 16, 4)
        h_id = train(Xtr, Ytr, cfg, TrainConfig(epochs=5, batch_size=64, seed=2)).history
        h_rand = train(Xtr, Ytr, cfg, TrainConfig(epochs=5, batch_size=64, seed=2, init="random")).history
        assert h_id[5] < h_rand[5]

    def test_deterministic(self, blockmix):
        (Xtr, Ytr), _ = blockmix
        cfg = MetricConfig("bdiag", 16, 4)
        tc = TrainConfig(epochs=3, batch_size=32, learning_rate=1e-2, weight_dropout=0.2, seed=5)
        a, b = train(Xtr, Ytr, cfg, tc), train(Xtr, Ytr, cfg, tc)
        assert a.params.weights.tobytes() == b.params.weights.tobytes()
        assert a.history == b.history

    @pytest.mark.parametrize("loss", ["triplet", "infonce", "cmpm", "poly"])
    @pytest.mark.parametrize("opt,wd,dp", [("sgd", 0.1, 0.0), ("adam", 0.0, 0.3), ("adam", 0.01, 0.1)])
    def test_mask_preserved(self, blockmix, loss, opt, wd, dp):
        (Xtr, Ytr), _ = blockmix
        cfg = MetricConfig("bdiag", 16, 4)
        tc = TrainConfig(LossSpec(loss), epochs=2, batch_size=32, learning_rate=1e-2, optimizer=opt,
                         weight_decay=wd, weight_dropout=dp, seed=1)
        M = materialize_dense(train(Xtr, Ytr, cfg, tc).params)
        assert np.all(M[~support_mask(cfg)] == 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(weight_dropout=1.0)


def test_convex_probe_monotone():
    rng = np.random.default_rng(4)
    cfg = MetricConfig("dense", 8)
    X, Y = unit_rows(rng, 16, 8), unit_rows(rng, 16, 8)
    target = rng.standard_normal((16, 16))
    st = TrainState.fresh(init_identity(cfg, np.float64), PCG32(0))
    tc = TrainConfig(optimizer="sgd", learning_rate=1e-3)
    prev = np.inf
    for _ in range(200):
        S = score_matrix(X, Y, st.params)
        loss = 0.5 * np.sum((S - target) ** 2)
        assert loss <= prev
        prev = loss
        apply_update(st, grad_w_from_dS(X, Y, S - target, st.params), tc)
