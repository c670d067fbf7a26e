"""Interruption-budget simulator for anytime serving.

Computation walks the exits in order and an environment-issued halt decides
which exit's distribution is served per sample; realized quality is then
aggregated across Monte-Carlo trials.  Halts are drawn independently per
sample (fluctuating device conditions per request), and a budget below the
first exit's cost still serves exit 1: some answer is always available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import quality
from .transforms import ProbTrajectory, TransformSpec

HALT_KINDS = ("uniform_exit", "categorical", "uniform_cost")


@dataclass
class BudgetModel:
    """Per-exit cumulative costs plus a halt-signal distribution.

    kind "uniform_exit" halts uniformly over exits, "categorical" with given
    per-exit probabilities, "uniform_cost" draws a budget T ~ U[c_1, c_M] and
    halts at the last affordable exit.
    """

    cost: np.ndarray  # (M,) strictly increasing
    kind: str = "uniform_exit"
    probs: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if np.any(np.diff(self.cost) <= 0):
            raise ValueError("costs must be strictly increasing")
        if self.kind not in HALT_KINDS:
            raise ValueError(f"unknown halt kind {self.kind!r}")
        if self.kind == "categorical":
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != self.cost.shape or np.any(self.probs < 0):
                raise ValueError("categorical probabilities must be one nonnegative value per exit")
            if not np.isclose(self.probs.sum(), 1.0, atol=1e-9):
                raise ValueError("categorical probabilities must sum to 1")

    def halt_probabilities(self) -> np.ndarray:
        """Exact per-exit halt probabilities implied by the distribution."""
        m = self.cost.size
        if self.kind == "uniform_exit":
            return np.full(m, 1.0 / m)
        if self.kind == "categorical":
            return self.probs.copy()
        # uniform_cost: P(exit m) is the cost gap up to exit m+1 over the
        # span; a draw T < c_M never affords the final exit.
        span = self.cost[-1] - self.cost[0]
        p = np.zeros(m)
        if m == 1:
            p[0] = 1.0
            return p
        p[:-1] = np.diff(self.cost) / span
        return p

    def draw_halts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        m = self.cost.size
        if self.kind == "uniform_exit":
            return rng.integers(0, m, size=n)
        if self.kind == "categorical":
            return rng.choice(m, size=n, p=self.probs)
        budgets = rng.uniform(self.cost[0], self.cost[-1], size=n)
        return np.maximum(np.searchsorted(self.cost, budgets, side="right") - 1, 0)


@dataclass
class ServingPolicy:
    """Names a trajectory-producing transform for the sweep tables."""

    name: str
    spec: TransformSpec


@dataclass
class SimulationResult:
    per_trial_accuracy: np.ndarray
    per_trial_gt_prob: np.ndarray
    per_exit_accuracy: np.ndarray
    per_exit_gt_prob: np.ndarray
    halt_probabilities: np.ndarray

    @property
    def realized_accuracy(self) -> float:
        return float(self.per_trial_accuracy.mean())

    @property
    def realized_gt_prob(self) -> float:
        return float(self.per_trial_gt_prob.mean())

    def expected_accuracy(self) -> float:
        """Closed form: halt-probability-weighted mean of per-exit accuracies."""
        return float(self.halt_probabilities @ self.per_exit_accuracy)

    def expected_gt_prob(self) -> float:
        return float(self.halt_probabilities @ self.per_exit_gt_prob)


def interrupt_exit(budget: float, cost) -> int:
    """Largest exit affordable within the budget (0-based), clamped to 0."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    cost = np.asarray(cost, dtype=np.float64)
    idx = int(np.searchsorted(cost, budget, side="right")) - 1
    return max(idx, 0)


def simulate(traj: ProbTrajectory, labels, budget_model: BudgetModel,
             n_trials: int) -> SimulationResult:
    """Monte-Carlo realized quality under the halt distribution.

    Each trial draws one halt exit per sample, serves that exit's
    distribution, and records accuracy and mean ground-truth probability.
    Deterministic given budget_model.seed.
    """
    if budget_model.cost.size != traj.n_exits:
        raise ValueError("cost vector length must match the number of exits")
    labels = np.asarray(labels)
    q = quality(traj, labels)
    n = traj.n_samples
    rng = np.random.default_rng(budget_model.seed)
    acc = np.empty(n_trials)
    gt = np.empty(n_trials)
    rows = np.arange(n)
    for t in range(n_trials):
        halts = budget_model.draw_halts(n, rng)
        acc[t] = q.correct[rows, halts].mean()
        gt[t] = q.gt_prob[rows, halts].mean()
    return SimulationResult(
        per_trial_accuracy=acc,
        per_trial_gt_prob=gt,
        per_exit_accuracy=q.correct.mean(axis=0),
        per_exit_gt_prob=q.gt_prob.mean(axis=0),
        halt_probabilities=budget_model.halt_probabilities(),
    )


def budget_sweep(trajectories: dict, labels, cost, budgets) -> list:
    """Deterministic-budget table: one row per (policy, budget level).

    Rows are (policy, budget, exit_served_1based, realized_accuracy,
    realized_mean_gt_prob); every sample halts at interrupt_exit(budget).
    """
    labels = np.asarray(labels)
    cost = np.asarray(cost, dtype=np.float64)
    rows = []
    for name, traj in trajectories.items():
        q = quality(traj, labels)
        for budget in budgets:
            m = interrupt_exit(float(budget), cost)
            rows.append(
                (
                    name,
                    float(budget),
                    m + 1,
                    float(q.correct[:, m].mean()),
                    float(q.gt_prob[:, m].mean()),
                )
            )
    return rows
