"""Regularized adaptive prediction sets, calibrated per exit.

A score for (distribution, label) is the cumulative probability of the
descending-sorted classes through the label's rank, plus a penalty of
lambda_reg per rank past k_reg.  Calibration takes the standard conformal
quantile of held-out scores independently at every exit; prediction sets are
the smallest descending-probability prefix whose generalized score reaches
that quantile (never empty).

With lambda_reg = 0 and randomization off this reduces to plain adaptive
prediction sets.  Degenerate rows are scored on their fallback distribution,
matching what is actually served.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logit_store import DatasetSplit
from .transforms import ProbTrajectory


@dataclass(frozen=True)
class RapsConfig:
    alpha: float = 0.1
    lambda_reg: float = 0.01
    k_reg: int = 5
    randomized: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.k_reg < 1:
            raise ValueError("k_reg must be >= 1")


@dataclass
class ConformalCalibration:
    """One score quantile per exit, computed from calibration samples only."""

    quantiles: np.ndarray  # (M,)
    config: RapsConfig


def raps_score(probs, label: int, cfg: RapsConfig, u: float | None = None) -> float:
    """Score one (distribution, label) pair; higher means less conforming.

    An all-zero row (no valid distribution) gets the maximal score
    1 + lambda_reg * (K - k_reg).  With ``randomized``, u * p_label is
    subtracted, u ~ Uniform(0, 1) supplied by the caller's seeded stream.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.size
    if probs.sum() == 0:
        return 1.0 + cfg.lambda_reg * (k - cfg.k_reg)
    order = np.argsort(-probs, kind="stable")
    rank = int(np.flatnonzero(order == label)[0]) + 1  # 1-based
    score = float(probs[order[:rank]].sum()) + cfg.lambda_reg * max(0, rank - cfg.k_reg)
    if cfg.randomized:
        if u is None:
            raise ValueError("randomized scoring needs a uniform draw")
        score -= u * float(probs[label])
    return score


def _scores_matrix(probs: np.ndarray, labels: np.ndarray, cfg: RapsConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorized raps_score over an (N, K) batch."""
    n, k = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_probs, axis=1)
    ranks = np.argmax(order == labels[:, None], axis=1) + 1
    scores = cum[np.arange(n), ranks - 1] + cfg.lambda_reg * np.maximum(0, ranks - cfg.k_reg)
    if cfg.randomized:
        u = (rng or np.random.default_rng(cfg.seed)).uniform(size=n)
        scores = scores - u * probs[np.arange(n), labels]
    zero = probs.sum(axis=1) == 0
    scores[zero] = 1.0 + cfg.lambda_reg * (k - cfg.k_reg)
    return scores


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, clamped to the max."""
    n = scores.size
    if n == 0:
        raise ValueError("empty calibration set")
    rank = int(np.ceil((n + 1) * (1.0 - alpha)))
    rank = min(max(rank, 1), n)
    return float(np.sort(scores)[rank - 1])


def calibrate(traj: ProbTrajectory, labels, split: DatasetSplit,
              cfg: RapsConfig) -> ConformalCalibration:
    """Per-exit conformal quantiles from the calibration indices."""
    labels = np.asarray(labels)
    idx = np.asarray(split.calibration_indices)
    if idx.size == 0:
        raise ValueError("empty calibration set")
    rng = np.random.default_rng(cfg.seed)
    qs = np.empty(traj.n_exits)
    for m in range(traj.n_exits):
        scores = _scores_matrix(traj.probs[idx, m, :], labels[idx], cfg, rng)
        qs[m] = conformal_quantile(scores, cfg.alpha)
    return ConformalCalibration(quantiles=qs, config=cfg)


def prediction_set(probs, qhat: float, cfg: RapsConfig) -> np.ndarray:
    """Smallest descending-probability prefix whose score reaches qhat.

    Always contains at least the top class; monotone non-increasing in qhat.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    ranks = np.arange(1, probs.size + 1)
    gen = cum + cfg.lambda_reg * np.maximum(0, ranks - cfg.k_reg)
    reach = np.flatnonzero(gen >= qhat)
    size = int(reach[0]) + 1 if reach.size else probs.size
    return np.sort(order[:size])


def set_sizes_and_hits(probs: np.ndarray, labels: np.ndarray, qhat: float,
                       cfg: RapsConfig, rng: np.random.Generator | None = None):
    """Vectorized set size and label containment for an (N, K) batch.

    Non-randomized sets take the smallest descending prefix whose generalized
    score reaches qhat (the crossing class is included, which over-covers).
    Randomized sets instead keep ranks whose u-randomized score stays at or
    below qhat, matching the randomized calibration scores so that coverage
    concentrates at 1 - alpha; a clamp keeps every set non-empty.
    """
    n, k = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_probs, axis=1)
    ranks = np.arange(1, k + 1)[None, :]
    gen = cum + cfg.lambda_reg * np.maximum(0, ranks - cfg.k_reg)
    if cfg.randomized:
        u = (rng or np.random.default_rng(cfg.seed)).uniform(size=n)
        inside = gen - u[:, None] * sorted_probs <= qhat
        sizes = np.maximum(inside.sum(axis=1), 1)
    else:
        reached = gen >= qhat
        sizes = np.where(reached.any(axis=1), reached.argmax(axis=1) + 1, k)
    label_rank = np.argmax(order == labels[:, None], axis=1) + 1
    hits = label_rank <= sizes
    return sizes, hits


def coverage_and_size(traj: ProbTrajectory, labels, calib: ConformalCalibration,
                      split: DatasetSplit):
    """Per-exit (empirical coverage, mean set size) over evaluation indices."""
    labels = np.asarray(labels)
    idx = np.asarray(split.evaluation_indices)
    coverage = np.empty(traj.n_exits)
    mean_size = np.empty(traj.n_exits)
    rng = np.random.default_rng(calib.config.seed + 1)  # offset from calibration draws
    for m in range(traj.n_exits):
        sizes, hits = set_sizes_and_hits(
            traj.probs[idx, m, :], labels[idx], calib.quantiles[m], calib.config, rng
        )
        coverage[m] = hits.mean()
        mean_size[m] = sizes.mean()
    return coverage, mean_size
