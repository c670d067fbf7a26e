"""Worked examples and invariants for the trajectory transforms."""

import numpy as np
import pytest

from anytime_exits.logit_store import LogitDataset
from anytime_exits.transforms import (
    ActivationSpec,
    ExitWeights,
    ThresholdModel,
    TransformSpec,
    adaptive_threshold_transform,
    caching_anytime,
    clipped_activation,
    fit_logistic,
    fit_threshold_model,
    hard_poe,
    load_trajectory,
    mixture_anytime,
    product_anytime,
    save_trajectory,
    shifted_relu_member,
    softmax_latest,
)


def make_ds(logits, labels=None):
    logits = np.asarray(logits, dtype=np.float64)
    if labels is None:
        labels = np.zeros(logits.shape[0], dtype=np.int32)
    return LogitDataset.from_arrays(logits, labels)


def random_ds(rng, n_max=50, m_max=8, k_max=20):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    k = int(rng.integers(2, k_max + 1))
    logits = rng.standard_normal((n, m, k))
    labels = rng.integers(0, k, size=n).astype(np.int32)
    return LogitDataset.from_arrays(logits, labels)


class TestSoftmaxLatest:
    def test_symmetry(self):
        traj = softmax_latest(make_ds([[[0.0, 0.0, 0.0]]]))
        np.testing.assert_allclose(traj.probs[0, 0], [1 / 3, 1 / 3, 1 / 3])

    def test_hand_value(self):
        traj = softmax_latest(make_ds([[[np.log(2.0), 0.0]]]))
        np.testing.assert_allclose(traj.probs[0, 0], [2 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 3, 5))
        a = softmax_latest(make_ds(logits))
        b = softmax_latest(make_ds(logits + 7.25))
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)

    def test_never_degenerate(self):
        traj = softmax_latest(make_ds(np.random.default_rng(1).standard_normal((6, 2, 3))))
        assert not traj.degenerate.any()
        assert np.array_equal(traj.served_exit, np.broadcast_to([0, 1], (6, 2)))


class TestHardProduct:
    def test_support_intersection(self):
        # brute-force support oracle on the worked two-exit example
        traj = hard_poe(make_ds([[[1.5, 0.2, -0.3], [0.4, -0.1, 0.9]]]), b=0.0)
        np.testing.assert_allclose(traj.probs[0, 0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(traj.probs[0, 1], [1.0, 0.0, 0.0])

    def test_degenerate_falls_back_to_softmax(self):
        traj = hard_poe(make_ds([[[1.0, -1.0, -1.0], [-1.0, 2.0, 1.0]]]), b=0.0)
        assert traj.degenerate[0].tolist() == [False, True]
        e = np.exp([-1.0, 2.0, 1.0])
        np.testing.assert_allclose(traj.probs[0, 1], e / e.sum(), atol=1e-12)
        np.testing.assert_allclose(
            traj.probs[0, 1], [0.03511903, 0.70538451, 0.25949646], atol=1e-6
        )

    def test_full_support_is_uniform(self):
        ds = make_ds(np.full((2, 3, 4), 2.5))
        traj = hard_poe(ds, b=0.0)
        np.testing.assert_allclose(traj.probs, 0.25)

    def test_monotone_for_final_support_classes(self):
        # exhaustive per-class scan over a random corpus
        rng = np.random.default_rng(2)
        for _ in range(200):
            traj = hard_poe(random_ds(rng), b=0.0)
            support = traj.support()
            final = support[:, -1, :]
            probs = np.where(traj.degenerate[:, :, None], 0.0, traj.probs)
            for n in range(traj.n_samples):
                for y in np.flatnonzero(final[n]):
                    seq = probs[n, :, y]
                    assert np.all(np.diff(seq) >= -1e-12)

    def test_support_cardinality_non_increasing(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            traj = hard_poe(random_ds(rng), b=0.0)
            sizes = traj.support().sum(axis=2)
            assert np.all(np.diff(sizes, axis=1) <= 0)


class TestProductTransform:
    def test_worked_example(self):
        # independent scalar recomputation: sqrt(2) and 4 as cumulative scores
        ds = make_ds([[[2.0, 1.0, -1.0], [1.0, 4.0, 0.5]]])
        traj = product_anytime(ds, w=ExitWeights.custom([0.5, 1.0]))
        r2 = np.sqrt(2.0)
        np.testing.assert_allclose(
            traj.probs[0, 0], [r2 / (r2 + 1), 1 / (r2 + 1), 0], atol=1e-12
        )
        np.testing.assert_allclose(
            traj.probs[0, 1], [r2 / (r2 + 4), 4 / (r2 + 4), 0], atol=1e-12
        )

    def test_nullified_class_stays_dead(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            ds = random_ds(rng, n_max=20)
            traj = product_anytime(ds)
            dead = ds.logits <= 0
            killed = np.logical_or.accumulate(dead, axis=1) & ~traj.degenerate[:, :, None]
            assert np.all(traj.probs[killed] == 0.0)

    def test_support_nesting(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            traj = product_anytime(random_ds(rng))
            support = traj.support()
            grew = support[:, 1:, :] & ~support[:, :-1, :]
            assert not grew.any()

    def test_degenerate_is_absorbing(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            traj = product_anytime(random_ds(rng))
            deg = traj.degenerate.astype(np.int8)
            assert np.all(np.diff(deg, axis=1) >= 0)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            traj = product_anytime(random_ds(rng))
            traj.validate(atol=1e-9)

    def test_clipped_tiny_b_matches_hard_product(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            ds = random_ds(rng, n_max=20)
            if np.any(np.abs(ds.logits) <= 1e-3):
                continue
            soft = product_anytime(ds, act=ActivationSpec("clipped", b=1e-9))
            hard = hard_poe(ds, b=0.0)
            assert np.max(np.abs(soft.probs - hard.probs)) < 1e-6

    def test_not_shift_invariant(self):
        # adding a constant changes which classes survive; never assert invariance
        ds = make_ds([[[0.5, -0.5]]])
        shifted = make_ds([[[1.5, 0.5]]])
        a = product_anytime(ds, w=ExitWeights.uniform_one(1))
        b = product_anytime(shifted, w=ExitWeights.uniform_one(1))
        assert np.max(np.abs(a.probs - b.probs)) > 0.1

    def test_rejects_non_product_activation(self):
        with pytest.raises(ValueError, match="not usable"):
            product_anytime(make_ds([[[1.0, 2.0]]]), act=ActivationSpec("heaviside"))


class TestClippedActivation:
    def test_formula_values(self):
        assert clipped_activation(0.3, 0.5) == pytest.approx(0.6)
        assert clipped_activation(2.0, 0.5) == pytest.approx(1.0)
        assert clipped_activation(-1.0, 0.5) == 0.0

    def test_identity_below_clip(self):
        assert clipped_activation(1.5, 2.0) == pytest.approx(1.5)

    def test_step_limit(self):
        assert clipped_activation(0.7, 1e-9) == pytest.approx(1.0, abs=1e-9)

    def test_matches_step_map_away_from_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(2000)
        x = x[np.abs(x) > 1e-3]
        step = (x > 0).astype(float)
        np.testing.assert_allclose(clipped_activation(x, 1e-9), step, atol=1e-6)

    def test_rejects_nonpositive_b(self):
        with pytest.raises(ValueError):
            clipped_activation(1.0, 0.0)


class TestCaching:
    def _traj_with_conf(self, confs):
        # two-class rows whose max prob equals the requested confidence
        probs = np.stack([np.asarray(confs), 1.0 - np.asarray(confs)], axis=-1)[None]
        ds_like = softmax_latest(make_ds(np.log(np.maximum(probs, 1e-12))))
        return ds_like

    def test_argmax_so_far(self):
        traj = self._traj_with_conf([0.6, 0.5, 0.8])
        cached = caching_anytime(traj)
        assert cached.served_exit[0].tolist() == [0, 0, 2]

    def test_monotone_input_is_identity(self):
        traj = self._traj_with_conf([0.5, 0.6, 0.9])
        cached = caching_anytime(traj)
        assert cached.served_exit[0].tolist() == [0, 1, 2]
        np.testing.assert_allclose(cached.probs, traj.probs)

    def test_tie_keeps_earliest(self):
        traj = self._traj_with_conf([0.7, 0.7])
        cached = caching_anytime(traj)
        assert cached.served_exit[0].tolist() == [0, 0]

    def test_served_confidence_non_decreasing_and_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            traj = softmax_latest(random_ds(rng, n_max=20))
            cached = caching_anytime(traj)
            conf = cached.probs.max(axis=2)
            assert np.all(np.diff(conf, axis=1) >= 0)
            again = caching_anytime(cached)
            np.testing.assert_array_equal(again.probs, cached.probs)
            assert np.all(cached.served_exit <= np.arange(traj.n_exits)[None, :])


class TestMixture:
    def test_singleton_reduces_to_member(self):
        ds = make_ds([[[2.0, 2.0, 0.0]]])
        traj = mixture_anytime(ds, ActivationSpec("relu"))
        np.testing.assert_allclose(traj.probs[0, 0], [0.5, 0.5, 0.0])

    def test_two_member_average(self):
        ds = make_ds([[[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0]]])
        traj = mixture_anytime(ds, ActivationSpec("relu"))
        np.testing.assert_allclose(traj.probs[0, 1], [0.5, 0.5, 0.0])

    def test_hand_average(self):
        ds = make_ds([[[2.0, 2.0, 0.0], [3.0, 0.0, 1.0]]])
        traj = mixture_anytime(ds, ActivationSpec("relu"))
        np.testing.assert_allclose(traj.probs[0, 1], [0.625, 0.25, 0.125])

    def test_all_zero_member_contributes_uniform(self):
        ds = make_ds([[[-1.0, -2.0], [4.0, -4.0]]])
        traj = mixture_anytime(ds, ActivationSpec("relu"))
        np.testing.assert_allclose(traj.probs[0, 0], [0.5, 0.5])
        np.testing.assert_allclose(traj.probs[0, 1], [0.75, 0.25])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            mixture_anytime(random_ds(rng)).validate()


class TestShiftedRelu:
    def test_hand_value(self):
        np.testing.assert_allclose(shifted_relu_member(np.array([0.2, -0.9]), 2), [0.7, 0.0])

    def test_positive_on_nonnegative_logits(self):
        scores = shifted_relu_member(np.array([0.0, 1.0, 2.0]), 4)
        assert np.all(scores > 0)
        np.testing.assert_allclose(scores, [0.25, 1.25, 2.25])

    def test_boundary_maps_to_zero(self):
        assert shifted_relu_member(np.array([-0.25]), 4)[0] == 0.0


class TestAdaptiveThreshold:
    def test_flooring_member_hand_value(self):
        model = ThresholdModel(weights=np.zeros(3), bias=100.0, scale_c=2.0)
        ds = make_ds([[[3.0, 1.0, 0.5]]])
        traj = adaptive_threshold_transform(ds, model, ExitWeights.uniform_one(1))
        np.testing.assert_allclose(traj.probs[0, 0], [3 / 7, 2 / 7, 2 / 7], atol=1e-12)

    def test_zero_floor_equals_relu_member_on_positive_rows(self):
        model = ThresholdModel(weights=np.zeros(3), bias=0.0, scale_c=0.0)
        ds = make_ds([[[3.0, 1.0, 0.5]]])
        traj = adaptive_threshold_transform(ds, model, ExitWeights.uniform_one(1))
        base = product_anytime(ds, w=ExitWeights.uniform_one(1))
        np.testing.assert_allclose(traj.probs, base.probs, atol=1e-12)

    def test_constant_probe_gives_constant_tau(self):
        model = ThresholdModel(weights=np.zeros(3), bias=100.0, scale_c=3.0)
        taus = model.tau(np.random.default_rng(0).standard_normal((10, 5)))
        np.testing.assert_allclose(taus, 3.0, atol=1e-12)

    def test_positive_floor_never_degenerates(self):
        rng = np.random.default_rng(11)
        model = ThresholdModel(weights=np.zeros(3), bias=0.0, scale_c=1.0)
        for _ in range(20):
            ds = random_ds(rng, n_max=20, k_max=8)
            if ds.n_classes < 3:
                continue
            traj = adaptive_threshold_transform(ds, model)
            assert not traj.degenerate.any()
            traj.validate()


class TestLogisticProbe:
    def test_separable_reaches_perfect_accuracy(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((200, 3))
        x = x[np.abs(x[:, 0]) > 0.2]  # margin keeps finite-step GD decisive
        y = (x[:, 0] > 0).astype(float)
        w, b = fit_logistic(x, y)
        acc = np.mean(((x @ w + b) > 0) == y)
        assert acc == 1.0

    def test_degenerate_labels_give_constant_model(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((50, 3))
        with pytest.warns(UserWarning, match="degenerate"):
            w, b = fit_logistic(x, np.ones(50))
        assert np.all(w == 0) and b > 0

    def test_recovers_generator_weights(self):
        # maximum-likelihood consistency at large n
        rng = np.random.default_rng(14)
        true_w = np.array([1.2, -0.7, 0.4])
        true_b = 0.3
        x = rng.standard_normal((40_000, 3))
        p = 1.0 / (1.0 + np.exp(-(x @ true_w + true_b)))
        y = (rng.uniform(size=40_000) < p).astype(float)
        w, b = fit_logistic(x, y, max_iter=20_000)
        np.testing.assert_allclose(w, true_w, atol=0.12)
        assert abs(b - true_b) < 0.12

    def test_fit_threshold_model_selects_from_grid(self):
        rng = np.random.default_rng(15)
        ds = random_ds(rng, n_max=50, m_max=4, k_max=8)
        while ds.n_classes < 3 or ds.n_samples < 20:
            ds = random_ds(rng, n_max=50, m_max=4, k_max=8)
        preds = ds.logits[:, -1, :].argmax(axis=1)
        grid = [0.1, 1.0]
        model = fit_threshold_model(ds, preds, ds.labels, grid)
        assert model.scale_c in grid


class TestSpecDispatch:
    def test_round_trip_dict(self):
        spec = TransformSpec.from_dict({"method": "pa", "weights_scheme": "uniform_one"})
        assert spec.method == "product"
        assert TransformSpec.from_dict(spec.to_dict()).method == "product"

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="unknown transform method"):
            TransformSpec.from_dict({"method": "banana"})

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown TransformSpec keys"):
            TransformSpec.from_dict({"method": "pa", "bogus": 1})

    def test_each_method_dispatches(self):
        rng = np.random.default_rng(16)
        ds = random_ds(rng, n_max=30, m_max=4, k_max=8)
        while ds.n_classes < 3:
            ds = random_ds(rng, n_max=30, m_max=4, k_max=8)
        for method in ["softmax", "hard_product", "product", "cached", "mixture",
                       "clipped", "shifted_relu", "adaptive"]:
            spec = TransformSpec(method=method, b=0.5 if method == "clipped" else 0.0)
            traj = spec.apply(ds)
            assert traj.probs.shape == ds.logits.shape
            traj.validate()


class TestTrajectoryFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        traj = product_anytime(random_ds(rng, n_max=20))
        path = tmp_path / "t.aexp"
        save_trajectory(traj, path)
        n, m, k = traj.probs.shape
        assert path.stat().st_size == 20 + 4 * n * m * k + n * m
        back = load_trajectory(path, method="product")
        np.testing.assert_array_equal(back.probs, traj.probs.astype(np.float32))
        np.testing.assert_array_equal(back.degenerate, traj.degenerate)

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(18)
        ds = random_ds(rng, n_max=20)
        p1, p2 = tmp_path / "a.aexp", tmp_path / "b.aexp"
        save_trajectory(product_anytime(ds), p1)
        save_trajectory(product_anytime(ds), p2)
        assert p1.read_bytes() == p2.read_bytes()
