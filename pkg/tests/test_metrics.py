"""Worked examples plus brute-force reference checks for every metric."""

import numpy as np
import pytest

from anytime_exits import metrics
from anytime_exits.logit_store import LogitDataset
from anytime_exits.transforms import hard_poe, softmax_latest


from conftest import (
    brute_auroc,
    brute_ece,
    brute_entropy,
    brute_hi,
    brute_learn_forget,
    brute_max_drop,
    brute_max_rise,
    brute_mono_zero,
    brute_overthinking,
)


# -- worked examples ---------------------------------------------------------

class TestQuality:
    def _traj(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        ds = LogitDataset.from_arrays(
            np.log(np.maximum(probs, 1e-300)), np.zeros(probs.shape[0], dtype=np.int32)
        )
        return softmax_latest(ds)

    def test_one_hot(self):
        q = metrics.quality(self._traj([[[0.0, 1.0, 0.0]]]), np.array([1]))
        assert q.gt_prob[0, 0] == pytest.approx(1.0)
        assert q.correct[0, 0] == 1

    def test_uniform(self):
        q = metrics.quality(self._traj([[[0.25] * 4]]), np.array([2]))
        assert q.gt_prob[0, 0] == pytest.approx(0.25)

    def test_lookup(self):
        q = metrics.quality(self._traj([[[0.2, 0.7, 0.1]]]), np.array([1]))
        assert q.gt_prob[0, 0] == pytest.approx(0.7)
        assert q.correct[0, 0] == 1

    def test_argmax_tie_breaks_low(self):
        q = metrics.quality(self._traj([[[0.4, 0.4, 0.2]]]), np.array([1]))
        assert q.correct[0, 0] == 0  # tie goes to class 0

    def test_unlabeled_rejected(self):
        with pytest.raises(ValueError, match="unlabeled"):
            metrics.quality(self._traj([[[0.5, 0.5]]]), np.array([-1]))

    def test_full_model_prob_uses_final_argmax(self):
        traj = self._traj([[[0.6, 0.4], [0.3, 0.7]]])
        fm_prob, fm_pred = metrics.full_model_quality(traj)
        assert fm_pred[0] == 1
        np.testing.assert_allclose(fm_prob[0], [0.4, 0.7], atol=1e-12)


class TestMaxDropRise:
    def test_worked_examples(self):
        assert metrics.max_drop([0.2, 0.7, 0.4, 0.9]) == pytest.approx(0.3)
        assert metrics.max_drop([0.1, 0.2, 0.9]) == 0.0
        assert metrics.max_drop([0.9, 0.1, 0.95]) == pytest.approx(0.8)
        assert metrics.max_rise([1.5, 0.8, 1.1]) == pytest.approx(0.3)
        assert metrics.max_rise([2.0, 1.0, 0.5]) == 0.0
        assert metrics.max_rise([0.0, 1.0]) == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.max_drop([])
        with pytest.raises(ValueError):
            metrics.max_rise([])

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            seq = rng.uniform(0, 1, size=int(rng.integers(1, 12)))
            assert metrics.max_drop(seq) == pytest.approx(brute_max_drop(seq), abs=1e-12)
            assert metrics.max_rise(seq) == pytest.approx(brute_max_rise(seq), abs=1e-12)

    def test_row_variants_match_scalar(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(0, 1, size=(40, 7))
        drops = metrics.max_drop_rows(values)
        rises = metrics.max_rise_rows(values)
        for i in range(40):
            assert drops[i] == pytest.approx(metrics.max_drop(values[i]), abs=1e-15)
            assert rises[i] == pytest.approx(metrics.max_rise(values[i]), abs=1e-15)


class TestCountExceeding:
    def test_worked_examples(self):
        assert metrics.count_exceeding([0.3, 0.0, 0.8], [0.25]).tolist() == [2]
        assert metrics.count_exceeding([0.3, 0.0, 0.8], [0.0]).tolist() == [3]
        assert metrics.count_exceeding([0.3, 0.0, 0.8], [1.1]).tolist() == [0]

    def test_non_increasing_in_tau(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(0, 1, size=100)
        taus = sorted(rng.uniform(0, 1, size=9))
        counts = metrics.count_exceeding(values, taus)
        assert np.all(np.diff(counts) <= 0)
        assert counts[0] <= 100

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            metrics.count_exceeding([0.5], [0.3, 0.1])


class TestCorrectnessAggregates:
    ROWS = np.array([[0, 1, 1], [1, 0, 1], [0, 0, 0], [1, 1, 1]], dtype=np.uint8)

    def test_mono_zero_worked(self):
        mono, zero = metrics.mono_zero_percent(self.ROWS)
        assert mono == pytest.approx(75.0)
        assert zero == pytest.approx(25.0)

    def test_mono_zero_all_correct(self):
        assert metrics.mono_zero_percent(np.ones((5, 3), dtype=np.uint8)) == (100.0, 0.0)

    def test_mono_zero_all_wrong(self):
        assert metrics.mono_zero_percent(np.zeros((5, 3), dtype=np.uint8)) == (100.0, 100.0)

    def test_overthinking_worked(self):
        rows = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1]], dtype=np.uint8)
        oracle, final, gap = metrics.overthinking(rows)
        assert (oracle, final, gap) == (0.75, 0.5, 0.25)

    def test_overthinking_monotone_is_zero(self):
        rows = np.array([[0, 1, 1], [0, 0, 1], [1, 1, 1]], dtype=np.uint8)
        assert metrics.overthinking(rows)[2] == 0.0

    def test_overthinking_all_wrong(self):
        assert metrics.overthinking(np.zeros((3, 4), dtype=np.uint8)) == (0.0, 0.0, 0.0)

    def test_hi_worked(self):
        rows = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1]], dtype=np.uint8)
        hi = metrics.hindsight_improvability(rows)
        assert hi[0] == 0.0
        assert hi[2] == pytest.approx(50.0)

    def test_hi_monotone_zero(self):
        rows = np.array([[0, 1, 1], [1, 1, 1]], dtype=np.uint8)
        assert np.all(metrics.hindsight_improvability(rows) == 0.0)

    def test_learn_forget_worked(self):
        rows = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1]], dtype=np.uint8)
        learned, forgot = metrics.learn_forget(rows)
        assert learned.tolist() == [2, 1, 0]
        assert forgot.tolist() == [0, 1, 0]

    def test_learn_forget_all_correct(self):
        learned, forgot = metrics.learn_forget(np.ones((4, 3), dtype=np.uint8))
        assert learned.tolist() == [4, 0, 0]
        assert forgot.tolist() == [0, 0, 0]

    def test_alternating_row_counts_every_transition(self):
        rows = np.array([[1, 0, 1, 0]], dtype=np.uint8)
        _, forgot = metrics.learn_forget(rows)
        assert forgot.tolist() == [0, 1, 0, 1]
        _, forgot_first = metrics.learn_forget(rows, first_transition_only=True)
        assert forgot_first.tolist() == [0, 1, 0, 0]

    def test_against_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            rows = rng.integers(0, 2, size=(int(rng.integers(1, 20)), int(rng.integers(2, 9))))
            listrows = rows.tolist()
            assert metrics.mono_zero_percent(rows) == pytest.approx(brute_mono_zero(listrows))
            assert metrics.overthinking(rows) == pytest.approx(brute_overthinking(listrows))
            np.testing.assert_allclose(
                metrics.hindsight_improvability(rows), brute_hi(listrows), atol=1e-12
            )
            learned, forgot = metrics.learn_forget(rows)
            bl, bf = brute_learn_forget(listrows)
            assert learned.tolist() == bl and forgot.tolist() == bf
            learned, forgot = metrics.learn_forget(rows, first_transition_only=True)
            bl, bf = brute_learn_forget(listrows, first_only=True)
            assert learned.tolist() == bl and forgot.tolist() == bf


class TestEce:
    def test_single_bin(self):
        assert metrics.ece([1.0, 1.0], [1, 0], n_bins=1) == pytest.approx(0.5)

    def test_degenerate_perfectly_calibrated(self):
        assert metrics.ece([1.0, 0.0], [1, 0], n_bins=2) == pytest.approx(0.0)

    def test_one_bin_matched(self):
        assert metrics.ece([0.75, 0.75, 0.75, 0.75], [1, 1, 1, 0], n_bins=1) == pytest.approx(0.0)

    def test_against_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(1, 50))
            confs = rng.uniform(0, 1, size=n)
            correct = rng.integers(0, 2, size=n)
            bins = int(rng.integers(1, 20))
            assert metrics.ece(confs, correct, bins) == pytest.approx(
                brute_ece(confs.tolist(), correct.tolist(), bins), abs=1e-12
            )


class TestEntropy:
    def test_uniform(self):
        assert metrics.entropy_rows(np.full(4, 0.25)) == pytest.approx(np.log(4))

    def test_one_hot(self):
        assert metrics.entropy_rows(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_half_half(self):
        assert metrics.entropy_rows(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(np.log(2))

    def test_against_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = rng.dirichlet(np.ones(int(rng.integers(2, 10))))
            assert metrics.entropy_rows(p) == pytest.approx(brute_entropy(p), abs=1e-12)


class TestOcAuroc:
    def test_no_deferral_is_plain_auroc(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(0, 1, size=30)
        labels = rng.integers(0, 2, size=30)
        if labels.sum() in (0, 30):
            labels[0] = 1 - labels[0]
        assert metrics.oc_auroc(scores, labels, 0.0) == pytest.approx(
            brute_auroc(scores.tolist(), labels.tolist())
        )

    def test_worked_deferral(self):
        assert metrics.oc_auroc([0.9, 0.8, 0.2], [1, 0, 1], 1 / 3) == pytest.approx(0.5)

    def test_perfect_ranking(self):
        assert metrics.oc_auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0], 0.0) == 1.0

    def test_all_one_class_warns_nan(self):
        with pytest.warns(UserWarning, match="undefined"):
            out = metrics.oc_auroc([0.9, 0.8], [1, 1], 0.0)
        assert np.isnan(out)

    def test_deferral_marks_lowest_confidence_correct(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(3, 40))
            scores = rng.uniform(0, 1, size=n)
            labels = rng.integers(0, 2, size=n).astype(bool)
            frac = float(rng.uniform(0, 0.5))
            fixed = labels.copy()
            k = int(np.ceil(frac * n))
            if k:
                fixed[np.argsort(scores, kind="stable")[:k]] = True
            if fixed.all() or not fixed.any():
                continue
            assert metrics.oc_auroc(scores, labels, frac) == pytest.approx(
                brute_auroc(scores.tolist(), fixed.tolist())
            )


class TestEndToEnd:
    def test_hard_product_gt_drop_is_zero_for_final_support(self):
        # ties the metric to the transform guarantee
        rng = np.random.default_rng(8)
        for _ in range(50):
            n, m, k = 20, 5, 6
            logits = rng.standard_normal((n, m, k))
            labels = rng.integers(0, k, size=n).astype(np.int32)
            ds = LogitDataset.from_arrays(logits, labels)
            traj = hard_poe(ds, b=0.0)
            q = metrics.quality(traj, labels)
            in_final = traj.support()[np.arange(n), -1, labels]
            drops = metrics.max_drop_rows(q.gt_prob)
            assert np.all(drops[in_final] == 0.0)

    def test_report_matches_direct_calls(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((30, 4, 5))
        labels = rng.integers(0, 5, size=30).astype(np.int32)
        ds = LogitDataset.from_arrays(logits, labels)
        traj = softmax_latest(ds)
        report = metrics.build_report("softmax", traj, labels)
        q = metrics.quality(traj, labels)
        for j in range(4):
            assert report.value("softmax", j + 1, "accuracy") == pytest.approx(
                q.correct[:, j].mean()
            )
            assert report.value("softmax", j + 1, "mean_gt_prob") == pytest.approx(
                q.gt_prob[:, j].mean()
            )
        mono, zero = metrics.mono_zero_percent(q.correct)
        assert report.value("softmax", 0, "pct_mono") == pytest.approx(mono)
        assert report.value("softmax", 0, "pct_zero") == pytest.approx(zero)

    def test_report_handles_partial_labels(self):
        rng = np.random.default_rng(10)
        logits = rng.standard_normal((10, 3, 4))
        labels = rng.integers(0, 4, size=10).astype(np.int32)
        labels[:4] = -1
        ds = LogitDataset.from_arrays(logits, labels)
        report = metrics.build_report("softmax", softmax_latest(ds), labels)
        gt_rows = [r for r in report.per_sample if r[2] == "max_drop_gt_prob"]
        assert len(gt_rows) == 6  # only labeled samples
        fm_rows = [r for r in report.per_sample if r[2] == "max_drop_full_model_prob"]
        assert len(fm_rows) == 10
