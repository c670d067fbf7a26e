"""Anytime-quality, monotonicity, and calibration measures.

Everything here is a pure, deterministic function of its arrays: per-sample
trajectory statistics (worst drop/rise over ordered exit pairs, correctness
monotonicity), per-exit aggregates (accuracy, mean ground-truth probability,
entropy, ECE, deferral AUROC), and the report container that serializes them
to ``method,exit,metric,value`` rows.

Exit indices are 0-based in memory; report rows are written 1-based with
exit 0 reserved for whole-trajectory aggregates.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .transforms import ProbTrajectory


@dataclass
class TrajectoryQuality:
    """Per-(sample, exit) prediction-quality estimates.

    gt_prob: probability assigned to the true label.  correct: 0/1 argmax
    match (ties broken toward the lowest class index).  full_model_prob:
    probability assigned to the final exit's predicted class, usable without
    labels.
    """

    gt_prob: np.ndarray  # (N, M)
    correct: np.ndarray  # (N, M) uint8
    full_model_prob: np.ndarray  # (N, M)
    full_model_pred: np.ndarray  # (N,)


def quality(traj: ProbTrajectory, labels) -> TrajectoryQuality:
    """Ground-truth and full-model quality trajectories for labeled samples."""
    labels = np.asarray(labels)
    if np.any(labels < 0):
        raise ValueError("unlabeled sample encountered; ground-truth metrics need labels")
    n_idx = np.arange(traj.n_samples)
    gt_prob = traj.probs[n_idx[:, None], np.arange(traj.n_exits)[None, :], labels[:, None]]
    preds = traj.probs.argmax(axis=2)  # first max wins on ties
    correct = (preds == labels[:, None]).astype(np.uint8)
    fm_prob, fm_pred = full_model_quality(traj)
    return TrajectoryQuality(gt_prob, correct, fm_prob, fm_pred)


def full_model_quality(traj: ProbTrajectory):
    """Label-free quality: probability of the final exit's own prediction."""
    fm_pred = traj.probs[:, -1, :].argmax(axis=1)
    n_idx = np.arange(traj.n_samples)
    fm_prob = traj.probs[n_idx[:, None], np.arange(traj.n_exits)[None, :], fm_pred[:, None]]
    return fm_prob, fm_pred


def max_drop(seq) -> float:
    """Largest decrease over ordered index pairs; 0 for non-decreasing input."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    running = np.maximum.accumulate(seq)
    return float(np.max(running - seq))


def max_rise(seq) -> float:
    """Largest increase over ordered index pairs; 0 for non-increasing input."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    running = np.minimum.accumulate(seq)
    return float(np.max(seq - running))


def max_drop_rows(values: np.ndarray) -> np.ndarray:
    """Row-wise :func:`max_drop` for an (N, M) array."""
    running = np.maximum.accumulate(values, axis=1)
    return (running - values).max(axis=1)


def max_rise_rows(values: np.ndarray) -> np.ndarray:
    """Row-wise :func:`max_rise` for an (N, M) array."""
    running = np.minimum.accumulate(values, axis=1)
    return (values - running).max(axis=1)


def count_exceeding(values, thresholds):
    """For each threshold, how many values are >= it (non-increasing counts)."""
    values = np.asarray(values, dtype=np.float64)
    thresholds = list(thresholds)
    if sorted(thresholds) != thresholds:
        raise ValueError("thresholds must be sorted ascending")
    return np.array([int(np.sum(values >= t)) for t in thresholds])


def mono_zero_percent(correct: np.ndarray):
    """(%% of samples with non-decreasing correctness, %% wrong at every exit).

    All-wrong rows are monotone but trivially so; they are counted in both
    rates, which is why the pair is reported together.
    """
    correct = np.asarray(correct)
    mono = np.all(np.diff(correct.astype(np.int8), axis=1) >= 0, axis=1)
    zero = ~correct.any(axis=1)
    n = correct.shape[0]
    return 100.0 * mono.sum() / n, 100.0 * zero.sum() / n


def overthinking(correct: np.ndarray):
    """(oracle accuracy, final-exit accuracy, their gap).

    The oracle answers with the first correct exit, so its accuracy is the
    share of samples correct anywhere; the gap is how much the full model
    loses by computing past that point.  Always >= 0, and exactly 0 when
    every correctness trajectory is monotone.
    """
    correct = np.asarray(correct)
    oracle = float(correct.any(axis=1).mean())
    final = float(correct[:, -1].mean())
    return oracle, final, oracle - final


def hindsight_improvability(correct: np.ndarray) -> np.ndarray:
    """Per exit: among currently-wrong samples, %% that were right earlier.

    Exit 1 has no earlier exits, so its value is 0; exits where nothing is
    wrong also report 0.
    """
    correct = np.asarray(correct).astype(bool)
    n, m = correct.shape
    hi = np.zeros(m)
    seen_correct = np.zeros(n, dtype=bool)
    for j in range(m):
        wrong = ~correct[:, j]
        denom = int(wrong.sum())
        if j > 0 and denom > 0:
            hi[j] = 100.0 * np.sum(wrong & seen_correct) / denom
        seen_correct |= correct[:, j]
    return hi


def learn_forget(correct: np.ndarray, first_transition_only: bool = False):
    """Per exit: samples learned (first-ever correct) and forgotten.

    "Forgot" counts correct->incorrect transitions into exit m; by default
    every such transition counts, with ``first_transition_only`` restricting
    each sample to its first one.  Exit 1 has no incoming transition and
    always reports 0 forgotten.
    """
    correct = np.asarray(correct).astype(bool)
    n, m = correct.shape
    learned = np.zeros(m, dtype=np.int64)
    forgot = np.zeros(m, dtype=np.int64)
    seen_correct = np.zeros(n, dtype=bool)
    already_forgot = np.zeros(n, dtype=bool)
    for j in range(m):
        newly = correct[:, j] & ~seen_correct
        learned[j] = int(newly.sum())
        if j > 0:
            trans = correct[:, j - 1] & ~correct[:, j]
            if first_transition_only:
                trans &= ~already_forgot
            forgot[j] = int(trans.sum())
            already_forgot |= trans
        seen_correct |= correct[:, j]
    return learned, forgot


def ece(confidences, correct, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width bins on [0, 1]."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidences.size == 0:
        return 0.0
    idx = np.minimum((confidences * n_bins).astype(int), n_bins - 1)
    total = 0.0
    n = confidences.size
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        gap = abs(correct[mask].mean() - confidences[mask].mean())
        total += cnt / n * gap
    return float(total)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def entropy_per_exit(traj: ProbTrajectory) -> np.ndarray:
    """Mean predictive entropy at each exit."""
    return entropy_rows(traj.probs).mean(axis=0)


def oc_auroc(confidences, correct, deferral_fraction: float = 0.005) -> float:
    """AUROC of confidence as a correctness score after oracle deferral.

    The ceil(fraction * N) lowest-confidence samples are marked correct
    (handed to the oracle) before ranking; ties get midpoint rank credit.
    Returns NaN with a warning when the post-deferral labels are all equal.
    """
    if not 0.0 <= deferral_fraction < 1.0:
        raise ValueError("deferral fraction must be in [0, 1)")
    confidences = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(correct, dtype=bool).copy()
    n = confidences.size
    n_defer = int(np.ceil(deferral_fraction * n))
    if n_defer > 0:
        defer_idx = np.argsort(confidences, kind="stable")[:n_defer]
        labels[defer_idx] = True
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined: post-deferral labels are all one class")
        return float("nan")
    ranks = _average_ranks(confidences)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their midpoint rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

DEFAULT_DROP_THRESHOLDS = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.75)


@dataclass
class MetricReport:
    """Rows keyed by (method, exit) plus per-sample scalars and drop counts."""

    per_exit: list = field(default_factory=list)  # (method, exit_1based, metric, value)
    per_sample: list = field(default_factory=list)  # (method, sample, metric, value)
    n_tau: list = field(default_factory=list)  # (method, quality, tau, count, percent)

    def extend(self, other: "MetricReport") -> None:
        self.per_exit.extend(other.per_exit)
        self.per_sample.extend(other.per_sample)
        self.n_tau.extend(other.n_tau)

    def value(self, method: str, exit_1based: int, metric: str) -> float:
        for m, e, name, v in self.per_exit:
            if m == method and e == exit_1based and name == metric:
                return v
        raise KeyError((method, exit_1based, metric))

    def write_per_exit_csv(self, path, header_comment: str = "") -> None:
        write_csv(path, ["method", "exit", "metric", "value"], self.per_exit, header_comment)

    def write_per_sample_csv(self, path, header_comment: str = "") -> None:
        write_csv(path, ["method", "sample", "metric", "value"], self.per_sample, header_comment)

    def write_n_tau_csv(self, path, header_comment: str = "") -> None:
        write_csv(
            path, ["method", "quality", "tau", "count", "percent"], self.n_tau, header_comment
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_exit": [list(r) for r in self.per_exit],
                "per_sample": [list(r) for r in self.per_sample],
                "n_tau": [list(r) for r in self.n_tau],
            },
            sort_keys=True,
        )


def write_csv(path, header, rows, header_comment: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_csv_rows(path):
    """Read back a CSV written by this module, skipping comment lines."""
    with open(path, "r", encoding="utf-8") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    return rows[0], rows[1:]


def build_report(method: str, traj: ProbTrajectory, labels=None,
                 thresholds=DEFAULT_DROP_THRESHOLDS, ece_bins: int = 15,
                 deferral_fraction: float = 0.005,
                 first_transition_only: bool = False) -> MetricReport:
    """All per-exit and per-sample metrics for one trajectory.

    With ``labels`` None (or containing -1), label-dependent rows are
    restricted to the labeled subset; full-model-prediction rows always cover
    every sample.
    """
    report = MetricReport()
    n, n_exits = traj.n_samples, traj.n_exits
    conf = traj.probs.max(axis=2)
    ent = entropy_rows(traj.probs)
    fm_prob, _ = full_model_quality(traj)

    labels = None if labels is None else np.asarray(labels)
    labeled = None
    if labels is not None:
        mask = labels >= 0
        if mask.any():
            sub = _subset_trajectory(traj, mask)
            labeled = (mask, quality(sub, labels[mask]))

    for j in range(n_exits):
        e = j + 1
        report.per_exit.append((method, e, "mean_confidence", float(conf[:, j].mean())))
        report.per_exit.append((method, e, "mean_entropy", float(ent[:, j].mean())))
        report.per_exit.append((method, e, "mean_full_model_prob", float(fm_prob[:, j].mean())))
        report.per_exit.append((method, e, "degenerate_count", int(traj.degenerate[:, j].sum())))
        if labeled is not None:
            mask, q = labeled
            report.per_exit.append((method, e, "accuracy", float(q.correct[:, j].mean())))
            report.per_exit.append((method, e, "mean_gt_prob", float(q.gt_prob[:, j].mean())))
            report.per_exit.append(
                (method, e, "ece", ece(conf[mask, j], q.correct[:, j], n_bins=ece_bins))
            )
            report.per_exit.append(
                (method, e, "oc_auroc", oc_auroc(conf[mask, j], q.correct[:, j], deferral_fraction))
            )

    fm_drops = max_drop_rows(fm_prob)
    conf_drops = max_drop_rows(conf)
    ent_rises = max_rise_rows(ent)
    for i in range(n):
        report.per_sample.append((method, i, "max_drop_full_model_prob", float(fm_drops[i])))
        report.per_sample.append((method, i, "max_confidence_drop", float(conf_drops[i])))
        report.per_sample.append((method, i, "max_entropy_rise", float(ent_rises[i])))
    _append_n_tau(report, method, "full_model_prob", fm_drops, thresholds, n)

    if labeled is not None:
        mask, q = labeled
        hi = hindsight_improvability(q.correct)
        learned, forgot = learn_forget(q.correct, first_transition_only)
        for j in range(n_exits):
            e = j + 1
            report.per_exit.append((method, e, "hindsight_improvability", float(hi[j])))
            report.per_exit.append((method, e, "learned", int(learned[j])))
            report.per_exit.append((method, e, "forgot", int(forgot[j])))
        pct_mono, pct_zero = mono_zero_percent(q.correct)
        oracle, final, gap = overthinking(q.correct)
        report.per_exit.append((method, 0, "pct_mono", pct_mono))
        report.per_exit.append((method, 0, "pct_zero", pct_zero))
        report.per_exit.append((method, 0, "oracle_accuracy", oracle))
        report.per_exit.append((method, 0, "final_accuracy", final))
        report.per_exit.append((method, 0, "overthinking", gap))

        gt_drops = max_drop_rows(q.gt_prob)
        sample_ids = np.flatnonzero(mask)
        mono_rows = np.all(np.diff(q.correct.astype(np.int8), axis=1) >= 0, axis=1)
        zero_rows = ~q.correct.any(axis=1)
        for i, sid in enumerate(sample_ids):
            report.per_sample.append((method, int(sid), "max_drop_gt_prob", float(gt_drops[i])))
            report.per_sample.append((method, int(sid), "mono", int(mono_rows[i])))
            report.per_sample.append((method, int(sid), "zero", int(zero_rows[i])))
        _append_n_tau(report, method, "gt_prob", gt_drops, thresholds, int(mask.sum()))
    return report


def _append_n_tau(report, method, quality_name, drops, thresholds, n):
    counts = count_exceeding(drops, list(thresholds))
    for tau, cnt in zip(thresholds, counts):
        report.n_tau.append(
            (method, quality_name, float(tau), int(cnt), 100.0 * cnt / max(n, 1))
        )


def _subset_trajectory(traj: ProbTrajectory, mask: np.ndarray) -> ProbTrajectory:
    return ProbTrajectory(
        probs=traj.probs[mask],
        degenerate=traj.degenerate[mask],
        served_exit=traj.served_exit[mask],
        method=traj.method,
    )
