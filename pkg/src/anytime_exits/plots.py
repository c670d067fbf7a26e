"""Figure rendering for evaluation reports.

Reads the delimited outputs written by the evaluate/conformal commands and
renders one PNG per figure next to them: per-exit marginal curves, sample
trajectories, drop-threshold counts (log scale), entropy, calibration, and
conformal set sizes.  Everything goes through the Agg backend so reports
render identically on headless machines.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path, config_hash: str = "") -> None:
    meta = {"Software": "anytime-exits"}
    if config_hash:
        meta["Description"] = f"config_hash={config_hash}"
    fig.savefig(path, dpi=120, metadata=meta)
    plt.close(fig)


def _by_method(rows):
    methods = []
    for row in rows:
        if row[0] not in methods:
            methods.append(row[0])
    return methods


def plot_per_exit_metric(per_exit_rows, metric: str, path, ylabel: str = "",
                         config_hash: str = "", logy: bool = False) -> bool:
    """One line per method of a per-exit metric; returns False if absent."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    drew = False
    for method in _by_method(per_exit_rows):
        pts = sorted(
            (int(e), float(v))
            for m, e, name, v in per_exit_rows
            if m == method and name == metric and int(e) > 0
        )
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
            drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("exit")
    ax.set_ylabel(ylabel or metric)
    if logy:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
    return True


def plot_drop_thresholds(n_tau_rows, quality_name: str, path, config_hash: str = "") -> bool:
    """Percent of samples whose worst drop reaches tau, per method (log y)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    drew = False
    for method in _by_method(n_tau_rows):
        pts = sorted(
            (float(t), float(pct))
            for m, q, t, cnt, pct in n_tau_rows
            if m == method and q == quality_name
        )
        if pts:
            # log scale cannot show exact zeros; clip to a visible floor
            ys = [max(p[1], 1e-3) for p in pts]
            ax.plot([p[0] for p in pts], ys, marker="o", label=method)
            drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("drop threshold")
    ax.set_ylabel(f"% samples with {quality_name} drop >= threshold")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
    return True


def plot_trajectories(trajectory_rows, method: str, path, config_hash: str = "",
                      ylabel: str = "ground-truth probability") -> bool:
    """Per-sample quality trajectories (one line per sample) for one method."""
    samples = {}
    for m, sample, exit_1based, value in trajectory_rows:
        if m == method:
            samples.setdefault(int(sample), []).append((int(exit_1based), float(value)))
    if not samples:
        return False
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for sid in sorted(samples):
        pts = sorted(samples[sid])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], alpha=0.7)
    ax.set_xlabel("exit")
    ax.set_ylabel(ylabel)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(method)
    fig.tight_layout()
    _save(fig, path, config_hash)
    return True


def plot_conformal(conformal_rows, path, config_hash: str = "") -> bool:
    """Mean prediction-set size per exit, one line per method."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    drew = False
    for method in _by_method(conformal_rows):
        pts = sorted(
            (int(e), float(size))
            for m, e, cov, size in conformal_rows
            if m == method
        )
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
            drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("exit")
    ax.set_ylabel("mean conformal set size")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
    return True


def plot_budget_sweep(sweep_rows, path, config_hash: str = "") -> bool:
    """Realized accuracy against the deterministic budget level."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    drew = False
    for policy in _by_method(sweep_rows):
        pts = sorted(
            (float(b), float(acc))
            for name, b, exit_1based, acc, gt in sweep_rows
            if name == policy
        )
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=policy)
            drew = True
    if not drew:
        plt.close(fig)
        return False
    ax.set_xlabel("budget")
    ax.set_ylabel("realized accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, config_hash)
    return True


def render_report(report_dir, out_dir=None, config_hash: str = "") -> list:
    """Render every figure whose backing CSV exists in report_dir.

    Returns the list of written figure paths.
    """
    from .metrics import read_csv_rows

    report_dir = Path(report_dir)
    out_dir = Path(out_dir) if out_dir else report_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    per_exit_path = report_dir / "per_exit.csv"
    if per_exit_path.exists():
        _, rows = read_csv_rows(per_exit_path)
        rows = [(m, int(e), name, v) for m, e, name, v in rows]
        for metric, ylabel, logy in [
            ("accuracy", "accuracy", False),
            ("mean_gt_prob", "mean ground-truth probability", False),
            ("mean_entropy", "mean entropy (nats)", False),
            ("ece", "ECE", False),
            ("oc_auroc", "deferral AUROC", False),
            ("hindsight_improvability", "% wrong but previously right", False),
        ]:
            path = out_dir / f"fig_{metric}.png"
            if plot_per_exit_metric(rows, metric, path, ylabel, config_hash, logy):
                written.append(path)

    n_tau_path = report_dir / "n_tau.csv"
    if n_tau_path.exists():
        _, rows = read_csv_rows(n_tau_path)
        for quality_name in ("gt_prob", "full_model_prob"):
            path = out_dir / f"fig_drops_{quality_name}.png"
            if plot_drop_thresholds(rows, quality_name, path, config_hash):
                written.append(path)

    traj_path = report_dir / "trajectories.csv"
    if traj_path.exists():
        _, rows = read_csv_rows(traj_path)
        for method in _by_method(rows):
            path = out_dir / f"fig_trajectories_{method}.png"
            if plot_trajectories(rows, method, path, config_hash):
                written.append(path)

    conf_path = report_dir / "conformal.csv"
    if conf_path.exists():
        _, rows = read_csv_rows(conf_path)
        path = out_dir / "fig_conformal_set_size.png"
        if plot_conformal(rows, path, config_hash):
            written.append(path)

    sweep_path = report_dir / "budget_sweep.csv"
    if sweep_path.exists():
        _, rows = read_csv_rows(sweep_path)
        path = out_dir / "fig_budget_sweep.png"
        if plot_budget_sweep(rows, path, config_hash):
            written.append(path)

    return written
