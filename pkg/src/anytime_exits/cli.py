"""Command-line driver for reproducible experiment runs.

Subcommands: transform, evaluate, train-toy, conformal, simulate, report.
Each one reads a JSON config (``--config``), with ``--seed``, ``--threads``,
and ``--out`` overriding config keys and ``ANYTIME_SEED`` / ``ANYTIME_THREADS``
/ ``ANYTIME_OUT`` environment variables sitting between the two.  Every
output embeds the sha256 of the resolved config for provenance, and identical
config + seed produces byte-identical outputs.

Exit codes: 0 success, 1 usage/config error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import budget_sim, conformal, metrics, multi_exit_mlp, plots, transforms
from .logit_store import FormatError, LogitDataset, load_binary, save_binary, split
from .metrics import DEFAULT_DROP_THRESHOLDS, MetricReport, write_csv
from .transforms import TransformSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class ConfigError(ValueError):
    """Bad or missing configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are exit code 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _resolve(args, cfg: dict, key: str, env: str, default, cast):
    """flag > environment > config > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return cast(flag)
    if env in os.environ:
        return cast(os.environ[env])
    if key in cfg:
        return cast(cfg[key])
    return default


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _load_dataset(path) -> LogitDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input dataset not found: {path}")
    return load_binary(path)


def _subset(ds: LogitDataset, idx: np.ndarray) -> LogitDataset:
    return LogitDataset.from_arrays(ds.logits[idx], ds.labels[idx], ds.metadata)


def _apply_spec(spec: TransformSpec, ds: LogitDataset, threads: int):
    """Apply a transform, optionally sharded over samples by thread.

    Every method except the adaptive one is per-sample independent, so chunk
    boundaries cannot change the values and the result is identical for any
    thread count.
    """
    if threads <= 1 or spec.method == "adaptive" or ds.n_samples < 2 * threads:
        return spec.apply(ds)
    chunks = np.array_split(np.arange(ds.n_samples), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda idx: spec.apply(_subset(ds, idx)), chunks))
    return transforms.ProbTrajectory(
        probs=np.concatenate([p.probs for p in parts]),
        degenerate=np.concatenate([p.degenerate for p in parts]),
        served_exit=np.concatenate([p.served_exit for p in parts]),
        method=parts[0].method,
    )


def _write_manifest(out_dir: Path, payload: dict) -> None:
    # the transform manifest is the handoff artifact downstream configs point
    # at; the rest are provenance and must not clobber it in a shared out dir
    name = "manifest.json" if payload["command"] == "transform" else (
        f"{payload['command']}.manifest.json"
    )
    (out_dir / name).write_text(json.dumps(payload, sort_keys=True, indent=2))


def _load_trajectories(cfg: dict, base: Path):
    """Resolve (method, trajectory) pairs from a manifest or an explicit list."""
    entries = []
    if "manifest" in cfg:
        mpath = Path(cfg["manifest"])
        if not mpath.exists():
            raise FileNotFoundError(f"manifest not found: {mpath}")
        manifest = json.loads(mpath.read_text())
        for rec in manifest["outputs"]:
            entries.append((rec["method"], mpath.parent / rec["path"]))
    elif "trajectories" in cfg:
        for rec in cfg["trajectories"]:
            if isinstance(rec, str):
                entries.append((Path(rec).stem, Path(rec)))
            else:
                entries.append((rec.get("method", Path(rec["path"]).stem), Path(rec["path"])))
    else:
        raise ConfigError("config needs either 'manifest' or 'trajectories'")
    out = []
    for method, path in entries:
        if not path.exists():
            raise FileNotFoundError(f"trajectory not found: {path}")
        traj = transforms.load_trajectory(path, method=method)
        traj.validate(atol=1e-5)  # f32 storage rounds the row sums
        out.append((method, traj))
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_transform(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    ds = _load_dataset(_require(cfg, "input"))
    specs = [TransformSpec.from_dict(d) for d in _require(cfg, "transforms")]
    chash = config_hash(cfg)
    outputs = []
    for spec in specs:
        traj = _apply_spec(spec, ds, threads)
        name = f"{spec.tag()}.aexp"
        transforms.save_trajectory(traj, out_dir / name)
        outputs.append(
            {
                "method": traj.method,
                "path": name,
                "spec": spec.to_dict(),
                "degenerate_rows": int(traj.degenerate.sum()),
            }
        )
    _write_manifest(out_dir, {"command": "transform", "config_hash": chash,
                              "input": str(cfg["input"]), "outputs": outputs})
    print(f"wrote {len(outputs)} trajectories to {out_dir}")
    return EXIT_OK


def cmd_evaluate(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    ds = _load_dataset(_require(cfg, "input"))
    pairs = _load_trajectories(cfg, out_dir)
    thresholds = cfg.get("thresholds", list(DEFAULT_DROP_THRESHOLDS))
    if sorted(thresholds) != list(thresholds):
        raise ConfigError("thresholds must be sorted ascending")
    n_traj_samples = int(cfg.get("trajectory_samples", 10))
    chash = config_hash(cfg)

    labels = ds.labels if bool(np.any(ds.is_labeled())) else None
    selected = cfg.get("metrics")
    if selected is not None and labels is None:
        label_bound = {"accuracy", "mean_gt_prob", "ece", "oc_auroc",
                       "hindsight_improvability", "learned", "forgot",
                       "pct_mono", "pct_zero", "overthinking",
                       "oracle_accuracy", "final_accuracy"}
        wanted = label_bound & set(selected)
        if wanted:
            raise ConfigError(
                f"metrics {sorted(wanted)} need labels, but the dataset has none"
            )
    report = MetricReport()
    traj_rows = []
    for method, traj in pairs:
        report.extend(
            metrics.build_report(
                method, traj, labels=labels, thresholds=thresholds,
                first_transition_only=bool(cfg.get("first_transition_only", False)),
            )
        )
        if labels is not None and np.all(ds.is_labeled()):
            q = metrics.quality(traj, ds.labels)
            values = q.gt_prob
        else:
            values, _ = metrics.full_model_quality(traj)
        for i in range(min(n_traj_samples, traj.n_samples)):
            for j in range(traj.n_exits):
                traj_rows.append((method, i, j + 1, float(values[i, j])))

    if selected is not None:
        report.per_exit = [r for r in report.per_exit if r[2] in selected]
    comment = f"config_hash={chash}"
    report.write_per_exit_csv(out_dir / "per_exit.csv", comment)
    report.write_per_sample_csv(out_dir / "per_sample.csv", comment)
    report.write_n_tau_csv(out_dir / "n_tau.csv", comment)
    write_csv(out_dir / "trajectories.csv", ["method", "sample", "exit", "value"],
              traj_rows, comment)
    _write_manifest(out_dir, {
        "command": "evaluate", "config_hash": chash,
        "outputs": ["per_exit.csv", "per_sample.csv", "n_tau.csv", "trajectories.csv"],
        "methods": [m for m, _ in pairs],
    })
    print(f"evaluated {len(pairs)} trajectories into {out_dir}")
    return EXIT_OK


def cmd_train_toy(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    task = cfg.get("task", "spirals")
    chash = config_hash(cfg)
    if task == "spirals":
        return _train_spirals(cfg, out_dir, seed, chash)
    if task == "regression":
        return _train_regression(cfg, out_dir, seed, chash)
    raise ConfigError(f"unknown task {task!r}")


def _train_spirals(cfg: dict, out_dir: Path, seed: int, chash: str) -> int:
    sp = cfg.get("spirals", {})
    n_per_class = int(sp.get("n_per_class", 250))
    n_classes = int(sp.get("n_classes", 4))
    noise = float(sp.get("noise", 0.05))
    turns = float(sp.get("turns", 1.0))
    tr = cfg.get("train", {})
    train_cfg = multi_exit_mlp.TrainConfig(
        epochs=int(tr.get("epochs", 1000)),
        learning_rate=float(tr.get("learning_rate", 0.05)),
        batch_size=int(tr.get("batch_size", 64)),
        exit_loss_weights=tr.get("exit_loss_weights"),
        objective=tr.get("objective", "standard_nll"),
        finetune_fraction=float(tr.get("finetune_fraction", 1.0 / 3.0)),
        momentum=float(tr.get("momentum", 0.9)),
        max_grad_norm=float(tr.get("max_grad_norm", 2.0)),
        seed=seed,
    )
    widths = cfg.get("widths", [16, 16, 16, 16, 16])

    x_train, y_train = multi_exit_mlp.generate_spirals(n_per_class, n_classes, noise, seed, turns)
    x_test, y_test = multi_exit_mlp.generate_spirals(
        n_per_class, n_classes, noise, seed + 10_000, turns
    )
    model = multi_exit_mlp.MultiExitMLP(2, widths, n_classes, seed=seed)
    curve = multi_exit_mlp.train(model, x_train, y_train, train_cfg)

    multi_exit_mlp.save_model(model, out_dir / "model.aexm")
    save_binary(multi_exit_mlp.export_logits(model, x_train, y_train), out_dir / "train.aexl")
    save_binary(multi_exit_mlp.export_logits(model, x_test, y_test), out_dir / "test.aexl")
    write_csv(out_dir / "loss_curve.csv", ["epoch", "loss"],
              list(enumerate(curve)), f"config_hash={chash}")
    _write_manifest(out_dir, {
        "command": "train-toy", "config_hash": chash, "task": "spirals",
        "outputs": ["model.aexm", "train.aexl", "test.aexl", "loss_curve.csv"],
        "final_loss": curve[-1],
    })
    print(f"trained spiral model (final loss {curve[-1]:.4f}) into {out_dir}")
    return EXIT_OK


def _train_regression(cfg: dict, out_dir: Path, seed: int, chash: str) -> int:
    rg = cfg.get("regression", {})
    n = int(rg.get("n", 200))
    n_members = int(rg.get("n_members", 5))
    epochs = int(rg.get("epochs", 1500))
    x, y = multi_exit_mlp.generate_simple1d(n, seed)
    ensemble = multi_exit_mlp.IntervalEnsemble.fit(
        x, y, n_members=n_members, epochs=epochs, seed=seed
    )
    grid = np.linspace(-1.5, 1.5, int(rg.get("grid_points", 121)))[:, None]
    rows = []
    for i, (a, b) in enumerate(ensemble.member_intervals(grid)):
        for gx, ga, gb in zip(grid[:, 0], a, b):
            rows.append((f"member_{i + 1}", float(gx), float(ga), float(gb), 0))
    lo, hi, empty = ensemble.product_intervals(grid)
    for gx, ga, gb, e in zip(grid[:, 0], lo, hi, empty):
        rows.append(("product", float(gx), float(ga), float(gb), int(e)))
    write_csv(out_dir / "intervals.csv", ["member", "x", "lower", "upper", "empty"],
              rows, f"config_hash={chash}")
    _write_manifest(out_dir, {
        "command": "train-toy", "config_hash": chash, "task": "regression",
        "outputs": ["intervals.csv"],
    })
    print(f"fitted {n_members} interval members into {out_dir}")
    return EXIT_OK


def cmd_conformal(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    ds = _load_dataset(_require(cfg, "input"))
    if not np.all(ds.is_labeled()):
        raise ConfigError("conformal calibration requires a fully labeled dataset")
    pairs = _load_trajectories(cfg, out_dir)
    raps = cfg.get("raps", {})
    rcfg = conformal.RapsConfig(
        alpha=float(raps.get("alpha", 0.1)),
        lambda_reg=float(raps.get("lambda_reg", 0.01)),
        k_reg=int(raps.get("k_reg", 5)),
        randomized=bool(raps.get("randomized", False)),
        seed=seed,
    )
    sp = cfg.get("split", {})
    ds_split = split(ds, float(sp.get("fraction", 0.2)), int(sp.get("seed", seed)))
    chash = config_hash(cfg)

    rows, quantiles = [], {}
    for method, traj in pairs:
        calib = conformal.calibrate(traj, ds.labels, ds_split, rcfg)
        coverage, size = conformal.coverage_and_size(traj, ds.labels, calib, ds_split)
        quantiles[method] = [float(q) for q in calib.quantiles]
        for m in range(traj.n_exits):
            rows.append((method, m + 1, float(coverage[m]), float(size[m])))
    write_csv(out_dir / "conformal.csv", ["method", "exit", "coverage", "mean_set_size"],
              rows, f"config_hash={chash}")
    (out_dir / "quantiles.json").write_text(json.dumps(
        {"config_hash": chash, "alpha": rcfg.alpha, "quantiles": quantiles},
        sort_keys=True, indent=2,
    ))
    _write_manifest(out_dir, {
        "command": "conformal", "config_hash": chash,
        "outputs": ["conformal.csv", "quantiles.json"],
    })
    print(f"calibrated {len(pairs)} trajectories into {out_dir}")
    return EXIT_OK


def cmd_simulate(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    ds = _load_dataset(_require(cfg, "input"))
    pairs = _load_trajectories(cfg, out_dir)
    bc = cfg.get("budget", {})
    # config > dataset metadata sidecar > unit costs
    cost = bc.get("cost", ds.metadata.get("cost", list(range(1, ds.n_exits + 1))))
    if len(cost) != ds.n_exits:
        raise ConfigError("budget cost vector must have one entry per exit")
    model = budget_sim.BudgetModel(
        cost=np.asarray(cost, dtype=np.float64),
        kind=bc.get("kind", "uniform_exit"),
        probs=bc.get("probs"),
        seed=seed,
    )
    n_trials = int(cfg.get("n_trials", 100))
    budgets = cfg.get("budgets", [float(c) for c in cost])
    chash = config_hash(cfg)

    sim_rows = []
    for method, traj in pairs:
        result = budget_sim.simulate(traj, ds.labels, model, n_trials)
        sim_rows.append((
            method, model.kind, n_trials,
            result.realized_accuracy, result.realized_gt_prob,
            result.expected_accuracy(), result.expected_gt_prob(),
        ))
    write_csv(out_dir / "simulate.csv",
              ["policy", "halt_kind", "n_trials", "realized_accuracy",
               "realized_gt_prob", "expected_accuracy", "expected_gt_prob"],
              sim_rows, f"config_hash={chash}")

    sweep_rows = budget_sim.budget_sweep(dict(pairs), ds.labels, cost, budgets)
    write_csv(out_dir / "budget_sweep.csv",
              ["policy", "budget", "exit", "realized_accuracy", "realized_gt_prob"],
              sweep_rows, f"config_hash={chash}")
    _write_manifest(out_dir, {
        "command": "simulate", "config_hash": chash,
        "outputs": ["simulate.csv", "budget_sweep.csv"],
    })
    print(f"simulated {len(pairs)} policies into {out_dir}")
    return EXIT_OK


def cmd_report(cfg: dict, out_dir: Path, seed: int, threads: int) -> int:
    report_dir = Path(cfg.get("report_dir", out_dir))
    if not report_dir.exists():
        raise FileNotFoundError(f"report directory not found: {report_dir}")
    written = plots.render_report(report_dir, out_dir, config_hash(cfg))
    for path in written:
        print(f"wrote {path}")
    if not written:
        print(f"no renderable CSVs found in {report_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------

_COMMANDS = {
    "transform": cmd_transform,
    "evaluate": cmd_evaluate,
    "train-toy": cmd_train_toy,
    "conformal": cmd_conformal,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anytime-exits", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        seed = _resolve(args, cfg, "seed", "ANYTIME_SEED", 0, int)
        threads = _resolve(args, cfg, "threads", "ANYTIME_THREADS", 1, int)
        out_dir = Path(_resolve(args, cfg, "out", "ANYTIME_OUT", "out", str))
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, seed, threads)
    except (FormatError, FileNotFoundError, multi_exit_mlp.TrainingDiverged) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
