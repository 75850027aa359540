"""Head model tests: forward contract, finite-difference gradient oracle,
AdamW recursion, source training, statistics, checkpoint roundtrip."""

import math

import numpy as np
import pytest

from driftbench.errors import DataFormatError, NumericError
from driftbench.headmodel import (
    BATCH_STATS,
    NORM_EPS,
    PARAM_NAMES,
    SOURCE_STATS,
    FeatureBatch,
    HeadGrads,
    HeadParams,
    OptState,
    SourceStats,
    TrainConfig,
    compute_source_stats,
    forward,
    grad_crossentropy,
    grad_entropy,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train_source,
)
from driftbench.numkit import Rng


def random_instance(seed, d=6, n_classes=4, batch=5):
    rng = np.random.default_rng(seed)
    params = HeadParams(
        norm_scale=rng.normal(1.0, 0.3, size=d),
        norm_shift=rng.normal(0.0, 0.3, size=d),
        weight=rng.normal(0.0, 0.8, size=(n_classes, d)),
        bias=rng.normal(0.0, 0.3, size=n_classes),
        prompt=rng.normal(0.0, 0.2, size=d),
    )
    stats = SourceStats(
        feat_mean=rng.normal(0.0, 1.0, size=d),
        feat_std=np.abs(rng.normal(1.0, 0.2, size=d)),
        norm_running_mean=rng.normal(0.0, 0.5, size=d),
        norm_running_var=np.abs(rng.normal(1.0, 0.2, size=d)) + 0.1,
        count=100,
    )
    emb = rng.normal(0.0, 1.0, size=(batch, d))
    return params, stats, FeatureBatch(emb)


def identity_stats(d):
    # running variance chosen so that var + NORM_EPS == 1 exactly
    return SourceStats(
        feat_mean=np.zeros(d),
        feat_std=np.ones(d),
        norm_running_mean=np.zeros(d),
        norm_running_var=np.full(d, 1.0 - NORM_EPS),
        count=10,
    )


class TestForward:
    def test_identity_normalization(self):
        d, c = 5, 3
        rng = np.random.default_rng(0)
        params = HeadParams.init(d, c, Rng(1))
        params.weight = rng.normal(size=(c, d))
        params.bias = rng.normal(size=c)
        batch = FeatureBatch(rng.normal(size=(4, d)))
        logits, _, _ = forward(params, identity_stats(d), batch, SOURCE_STATS)
        expected = batch.embeddings @ params.weight.T + params.bias
        np.testing.assert_allclose(logits, expected, rtol=1e-12)

    def test_zero_variance_guard_identical_rows(self):
        d, c = 4, 3
        params = HeadParams.init(d, c, Rng(2))
        params.norm_shift = np.arange(d, dtype=float) * 0.1
        row = np.full(d, 2.5)
        batch = FeatureBatch(np.tile(row, (6, 1)))
        _, _, cache = forward(params, identity_stats(d), batch, BATCH_STATS)
        # batch variance is 0, so the pre-affine normalized value is 0
        np.testing.assert_allclose(cache.normalized, 0.0, atol=1e-12)
        np.testing.assert_allclose(cache.features, np.tile(params.norm_shift, (6, 1)), atol=1e-12)

    def test_probs_rows_sum_to_one(self):
        params, stats, batch = random_instance(3, d=6, n_classes=4, batch=7)
        for mode in (SOURCE_STATS, BATCH_STATS):
            _, probs, _ = forward(params, stats, batch, mode)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        params, stats, _ = random_instance(4, d=6)
        bad = FeatureBatch(np.zeros((3, 5)))
        with pytest.raises(ValueError):
            forward(params, stats, bad)

    def test_source_mode_row_independent(self):
        params, stats, batch = random_instance(5, batch=6)
        _, probs, _ = forward(params, stats, batch, SOURCE_STATS)
        perm = np.array([3, 1, 5, 0, 4, 2])
        _, probs_p, _ = forward(params, stats, FeatureBatch(batch.embeddings[perm]), SOURCE_STATS)
        np.testing.assert_array_equal(probs_p, probs[perm])

    def test_batch_mode_permutation_equivariant(self):
        params, stats, batch = random_instance(6, batch=6)
        _, probs, _ = forward(params, stats, batch, BATCH_STATS)
        perm = np.array([2, 0, 5, 1, 4, 3])
        _, probs_p, _ = forward(params, stats, FeatureBatch(batch.embeddings[perm]), BATCH_STATS)
        np.testing.assert_allclose(probs_p, probs[perm], rtol=1e-12)


def fd_grads(loss_fn, params, names, h=1e-5):
    """Central finite differences of loss_fn over the named parameter tensors."""
    out = {}
    for name in names:
        base = getattr(params, name)
        g = np.zeros_like(base)
        for i in range(base.size):
            for sign in (+1.0, -1.0):
                p = params.copy()
                getattr(p, name).ravel()[i] += sign * h
                g.ravel()[i] += sign * loss_fn(p)
            g.ravel()[i] /= 2 * h
        out[name] = g
    return out


def check_grads(analytic, numeric, rel_tol=1e-6, zero_tol=1e-7):
    """Per-tensor check; falls back to absolute when both are ~zero
    (the prompt gradient is structurally zero in batch-stats mode)."""
    for name, g_fd in numeric.items():
        g_an = analytic[name]
        scale = max(np.linalg.norm(g_an), np.linalg.norm(g_fd))
        err = np.linalg.norm(g_an - g_fd)
        if scale < zero_tol:
            assert err < zero_tol, f"{name}: absolute error {err}"
        else:
            assert err / scale < rel_tol, f"{name}: relative error {err / scale}"


class TestGradEntropy:
    @pytest.mark.parametrize("mode", [SOURCE_STATS, BATCH_STATS])
    def test_matches_finite_differences(self, mode):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            d = int(rng.integers(2, 11))
            c = int(rng.integers(2, 6))
            b = int(rng.integers(2, 9))
            params, stats, batch = random_instance(200 + seed, d=d, n_classes=c, batch=b)
            _, grads = grad_entropy(params, stats, batch, mode, wrt=PARAM_NAMES)
            numeric = fd_grads(
                lambda p: grad_entropy(p, stats, batch, mode, wrt=())[0],
                params, PARAM_NAMES,
            )
            check_grads(grads.tensors(), numeric)

    def test_uniform_probs_critical_point(self):
        d, c = 4, 3
        params = HeadParams.init(d, c, Rng(0))
        params.weight = np.zeros((c, d))  # logits all zero => uniform probs
        _, _, batch = random_instance(7, d=d, n_classes=c, batch=5)
        _, grads = grad_entropy(params, identity_stats(d), batch, BATCH_STATS, wrt=PARAM_NAMES)
        for name, g in grads.tensors().items():
            np.testing.assert_allclose(g, 0.0, atol=1e-12, err_msg=name)

    def test_saturated_one_hot_gradient_vanishes(self):
        d, c = 4, 3
        params = HeadParams.init(d, c, Rng(1))
        params.weight = np.array([[100.0, 0, 0, 0], [0, -100.0, 0, 0], [0, 0, -100.0, 0]])
        batch = FeatureBatch(np.array([[1.0, 1.0, 1.0, 1.0]]))
        _, grads = grad_entropy(params, identity_stats(d), batch, SOURCE_STATS, wrt=PARAM_NAMES)
        assert grads.global_norm() < 1e-8

    def test_all_weights_zero_returns_zero_grads(self):
        params, stats, batch = random_instance(8)
        loss, grads = grad_entropy(params, stats, batch, BATCH_STATS,
                                   weights=np.zeros(batch.size), wrt=PARAM_NAMES)
        assert loss == 0.0
        assert grads.global_norm() == 0.0

    def test_weighted_matches_finite_differences(self):
        params, stats, batch = random_instance(9, batch=6)
        w = np.abs(np.random.default_rng(9).normal(size=6))
        _, grads = grad_entropy(params, stats, batch, BATCH_STATS, weights=w, wrt=PARAM_NAMES)
        numeric = fd_grads(
            lambda p: grad_entropy(p, stats, batch, BATCH_STATS, weights=w, wrt=())[0],
            params, PARAM_NAMES,
        )
        check_grads(grads.tensors(), numeric)


class TestGradCrossentropy:
    @pytest.mark.parametrize("mode", [SOURCE_STATS, BATCH_STATS])
    def test_matches_finite_differences(self, mode):
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            d = int(rng.integers(2, 11))
            c = int(rng.integers(2, 6))
            b = int(rng.integers(2, 9))
            params, stats, batch = random_instance(400 + seed, d=d, n_classes=c, batch=b)
            raw = rng.normal(size=(b, c))
            targets = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
            w = np.abs(rng.normal(size=b)) + 0.05
            _, grads = grad_crossentropy(params, stats, batch, targets, weights=w,
                                         norm_mode=mode, wrt=PARAM_NAMES)
            numeric = fd_grads(
                lambda p: grad_crossentropy(p, stats, batch, targets, weights=w,
                                            norm_mode=mode, wrt=())[0],
                params, PARAM_NAMES,
            )
            check_grads(grads.tensors(), numeric)

    def test_self_consistency_zero_gradient(self):
        params, stats, batch = random_instance(10)
        _, probs, _ = forward(params, stats, batch, SOURCE_STATS)
        _, grads = grad_crossentropy(params, stats, batch, probs, wrt=PARAM_NAMES)
        # dLoss/dlogits = probs - targets = 0, so every gradient vanishes
        assert grads.global_norm() < 1e-12

    def test_one_hot_argmax_loss_is_neg_log_maxprob(self):
        params, stats, batch = random_instance(11, batch=4)
        _, probs, _ = forward(params, stats, batch, SOURCE_STATS)
        onehot = np.zeros_like(probs)
        onehot[np.arange(4), probs.argmax(axis=1)] = 1.0
        loss, _ = grad_crossentropy(params, stats, batch, onehot, wrt=())
        expected = -np.mean(np.log(probs.max(axis=1)))
        assert abs(loss - expected) < 1e-12

    def test_off_simplex_targets_rejected(self):
        params, stats, batch = random_instance(12, batch=2)
        bad = np.array([[0.5, 0.2, 0.2, 0.2], [0.25, 0.25, 0.25, 0.25]])
        with pytest.raises(NumericError):
            grad_crossentropy(params, stats, batch, bad)


class TestOptimizerStep:
    def test_zero_lr_bit_identical(self):
        params, _, _ = random_instance(13)
        opt = OptState.for_params(params, lr=0.0, weight_decay=0.01)
        grads = HeadGrads(norm_scale=np.ones_like(params.norm_scale),
                          weight=np.ones_like(params.weight))
        out = optimizer_step(params, grads, opt)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(out, name), getattr(params, name))

    def test_single_step_hand_recursion(self):
        # scalar view through a d=1 norm_shift gradient
        params = HeadParams.init(1, 2, Rng(3))
        lr, g = 0.01, 0.37
        opt = OptState.for_params(params, lr=lr)
        grads = HeadGrads(norm_shift=np.array([g]))
        out = optimizer_step(params, grads, opt)
        m_hat = ((1 - 0.9) * g) / (1 - 0.9)
        v_hat = ((1 - 0.999) * g * g) / (1 - 0.999)
        expected = params.norm_shift[0] - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert abs(out.norm_shift[0] - expected) < 1e-15

    def test_pure_decay_on_zero_gradient(self):
        params, _, _ = random_instance(14)
        lr = 0.5
        opt = OptState.for_params(params, lr=lr, weight_decay=0.01)
        grads = HeadGrads(weight=np.zeros_like(params.weight),
                          norm_scale=np.zeros_like(params.norm_scale))
        out = optimizer_step(params, grads, opt)
        np.testing.assert_allclose(out.weight, params.weight * (1 - lr * 0.01), rtol=1e-15)
        # decay never touches the normalization affine
        np.testing.assert_array_equal(out.norm_scale, params.norm_scale)

    def test_non_finite_gradient_rejected(self):
        params, _, _ = random_instance(15)
        opt = OptState.for_params(params, lr=0.1)
        grads = HeadGrads(bias=np.array([np.nan] * params.n_classes, dtype=float))
        with pytest.raises(NumericError):
            optimizer_step(params, grads, opt)
        assert opt.step_count == 0


class TestSourceStats:
    def test_two_point_example(self):
        stats = compute_source_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
        np.testing.assert_allclose(stats.feat_mean, [1.0, 1.0])
        np.testing.assert_allclose(stats.feat_std, [1.0, 1.0])

    def test_identical_rows_zero_std(self):
        stats = compute_source_stats(np.tile([3.0, -1.0, 2.0], (5, 1)))
        np.testing.assert_allclose(stats.feat_std, 0.0, atol=1e-15)

    def test_against_two_pass_reference(self):
        rng = np.random.default_rng(16)
        z = rng.normal(size=(100, 5)) * 3 + 1
        stats = compute_source_stats(z)
        # two-pass oracle: explicit mean, then explicit squared deviations
        mean = np.array([sum(z[:, j]) / 100 for j in range(5)])
        var = np.array([sum((z[i, j] - mean[j]) ** 2 for i in range(100)) / 100 for j in range(5)])
        assert np.max(np.abs(stats.feat_mean - mean)) < 1e-12
        assert np.max(np.abs(stats.feat_std - np.sqrt(var))) < 1e-12

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            compute_source_stats(np.ones((1, 3)))


def two_gaussians(seed=0, d=8, per_class=500, separation=6.0):
    rng = np.random.default_rng(seed)
    direction = np.zeros(d)
    direction[0] = 1.0
    mu0 = -0.5 * separation * direction
    mu1 = 0.5 * separation * direction
    emb = np.vstack([
        rng.normal(size=(per_class, d)) + mu0,
        rng.normal(size=(per_class, d)) + mu1,
    ])
    labels = np.array([0] * per_class + [1] * per_class)
    return FeatureBatch(emb, labels=labels)


class TestTrainSource:
    def test_separable_classes_learned(self):
        data = two_gaussians(seed=21)
        params, stats = train_source(data, 2, TrainConfig(seed=5))
        _, probs, _ = forward(params, stats, data, SOURCE_STATS)
        acc = float((probs.argmax(axis=1) == data.labels).mean())
        assert acc >= 0.99

    def test_zero_epochs_returns_init(self):
        data = two_gaussians(seed=22, per_class=30)
        cfg = TrainConfig(epochs=0, seed=9)
        params, stats = train_source(data, 2, cfg)
        init = HeadParams.init(8, 2, Rng(9).spawn(1), cfg.weight_scale)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(params, name), getattr(init, name))
        assert stats.count == data.size

    def test_constant_feature_column_stays_finite(self):
        data = two_gaussians(seed=23, per_class=40)
        data.embeddings[:, 3] = 7.0
        params, stats = train_source(data, 2, TrainConfig(epochs=2, seed=1))
        assert stats.feat_std[3] == 0.0
        logits, probs, _ = forward(params, stats, data, SOURCE_STATS)
        assert np.all(np.isfinite(logits)) and np.all(np.isfinite(probs))

    def test_bit_identical_reruns(self):
        data = two_gaussians(seed=24, per_class=50)
        cfg = TrainConfig(epochs=3, seed=17)
        p1, s1 = train_source(data, 2, cfg)
        p2, s2 = train_source(data, 2, cfg)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(p1, name), getattr(p2, name))
        np.testing.assert_array_equal(s1.feat_mean, s2.feat_mean)

    def test_unlabeled_rejected(self):
        data = FeatureBatch(np.random.default_rng(0).normal(size=(10, 4)))
        with pytest.raises(ValueError):
            train_source(data, 2)

    def test_single_class_rejected(self):
        data = FeatureBatch(np.random.default_rng(0).normal(size=(10, 4)),
                            labels=np.zeros(10, dtype=int))
        with pytest.raises(ValueError):
            train_source(data, 2)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params, stats, _ = random_instance(30, d=7, n_classes=3)
        path = str(tmp_path / "model.ttah")
        save_checkpoint(path, params, stats, {"lr": 3e-5})
        loaded, lstats, config = load_checkpoint(path)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))
        np.testing.assert_array_equal(lstats.feat_mean, stats.feat_mean)
        np.testing.assert_array_equal(lstats.norm_running_var, stats.norm_running_var)
        assert lstats.count == stats.count
        assert config == {"lr": 3e-5}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ttah"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataFormatError):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        params, stats, _ = random_instance(31, d=4, n_classes=2)
        path = str(tmp_path / "model.ttah")
        save_checkpoint(path, params, stats)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(DataFormatError, match="offset"):
            load_checkpoint(path)
