"""Command line: ``train``, ``verify`` and ``report`` subcommands.

Exit codes are stable: 0 success, 1 configuration or input error,
2 numerical failure during training, 3 failed verification.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import Dataset, gen_gaussian_mixture, gen_two_moons, load_mnist, prepare_splits
from .engine import MetricsRecord, TrainPlan, memory_account, select_head, train
from .errors import ConfigError, DataError, NumericalError, TrglError
from .netblocks import PartitionSpec, build_partition, save_checkpoint
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3
REPORT_KINDS = ("per-module-curve", "regime-comparison", "tau-sensitivity", "memory")

log = logging.getLogger("trgl")


class ReportError(TrglError):
    pass


# ---------------------------------------------------------------------------
# train


def build_dataset(config: ExperimentConfig, seed: int) -> Dataset:
    ds = config.raw["dataset"]
    kind = ds["kind"]
    if kind == "mnist":
        train_set, test_set = load_mnist()
    elif kind == "two_moons":
        train_set = gen_two_moons(ds["n"], ds["noise"], seed)
        test_set = gen_two_moons(ds["test_n"], ds["noise"], 1000 + seed)
    else:
        train_set = gen_gaussian_mixture(ds["n"], ds["centers"], ds["sigma"], seed)
        test_set = gen_gaussian_mixture(ds["test_n"], ds["centers"], ds["sigma"], 1000 + seed)
    return prepare_splits(train_set, test_set, ds["val_fraction"], ds["train_size"], seed, ds["balanced"])


def _tau_tag(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:g}"


def write_json_atomic(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_training(config: ExperimentConfig, out_dir: Path) -> dict:
    """Train every (tau, seed) pair; returns the manifest written to ``out_dir``."""
    run_id = config.run_id()
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    started = time.perf_counter()
    for tau in config.tau_values:
        for seed in config.seeds:
            data = build_dataset(config, seed)
            spec = config.partition_spec(seed, data.input_dim, data.n_classes)
            plan = config.train_plan(seed, tau)
            partition = build_partition(spec)
            t0 = time.perf_counter()
            metrics = train(partition, plan, data)
            seconds = time.perf_counter() - t0
            stem = f"{run_id}_tau{_tau_tag(tau)}_seed{seed}"
            metrics_path = out_dir / f"{stem}_metrics.csv"
            metrics.save(metrics_path)
            entry = {"seed": seed, "tau": tau if math.isfinite(tau) else "inf", "metrics": metrics_path.name,
                     "seconds": round(seconds, 3),
                     "selected_head": select_head(metrics, config.raw["report"]["head_policy"])}
            if config.raw["report"]["checkpoints"]:
                ckpt = out_dir / f"{stem}_checkpoint.npz"
                save_checkpoint(partition, ckpt, {"run_id": run_id, "seed": seed, "tau": entry["tau"]})
                entry["checkpoint"] = ckpt.name
            runs.append(entry)
            log.info("tau=%s seed=%d done in %.1fs", _tau_tag(tau), seed, seconds)
    first_spec = config.partition_spec(config.seeds[0])
    mem = memory_account(first_spec, config.train_plan(config.seeds[0], config.tau_values[0]),
                         config.raw["plan"]["batch_size"])
    manifest = {
        "run_id": run_id,
        "version": __version__,
        "config": config.to_dict(),
        "seeds": config.seeds,
        "runs": runs,
        "memory": {"regime": mem.regime, "K": mem.K, "parameters": mem.parameters,
                   "activations": mem.activations, "total": mem.total, "e2e_total": mem.e2e_total,
                   "saved_pct": mem.saved_pct},
        "seconds": round(time.perf_counter() - started, 3),
    }
    write_json_atomic(out_dir / "manifest.json", manifest)
    return manifest


def cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        config = config.with_seeds(seeds)
    out = Path(args.out) if args.out else Path("runs") / config.run_id()
    manifest = run_training(config, out)
    print(f"run {manifest['run_id']}: {len(manifest['runs'])} runs -> {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    report = run_suite(args.suite)
    for line in report.lines():
        print(line)
    if args.json:
        Path(args.json).write_text(report.to_json())
    print(f"{args.suite}: {'PASS' if report.passed else 'FAIL'} ({report.seconds:.1f}s)")
    return EXIT_OK if report.passed else EXIT_VERIFY


# ---------------------------------------------------------------------------
# report


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read manifest {path}: {exc}") from None
    for key in ("run_id", "config", "runs"):
        if key not in manifest:
            raise ReportError(f"{path}: manifest lacks {key!r}")
    return manifest, path.parent


def expected_keys(config: ExperimentConfig) -> list[tuple[int, int]]:
    plan: TrainPlan = config.train_plan(config.seeds[0], config.tau_values[0])
    K = config.raw["network"]["K"]
    if plan.regime == "parallel":
        return [(k, e) for k in range(1, K + 1) for e in range(1, plan.epochs_for(1) + 1)]
    return [(k, e) for k in range(1, K + 1) for e in range(1, plan.epochs_for(k) + 1)]


def load_runs(manifest: dict, root: Path) -> list[tuple[dict, MetricsRecord]]:
    config = ExperimentConfig.from_dict(manifest["config"])
    want = expected_keys(config)
    out = []
    for entry in manifest["runs"]:
        path = root / entry["metrics"]
        if not path.exists():
            raise ReportError(f"metrics file {path} listed in the manifest is missing")
        if manifest["run_id"] not in path.name:
            raise ReportError(f"{path.name} does not carry run id {manifest['run_id']}")
        metrics = MetricsRecord.load(path)
        have = {(r["module"], r["epoch"]) for r in metrics.rows}
        absent = [key for key in want if key not in have]
        if absent:
            shown = ", ".join(f"({k}, {e})" for k, e in absent[:10])
            more = f" and {len(absent) - 10} more" if len(absent) > 10 else ""
            raise ReportError(f"{path.name}: missing (module, epoch) series {shown}{more}")
        out.append((entry, metrics))
    return out


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation half width over seeds."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


def _series_label(manifest: dict, tau) -> str:
    cfg = manifest["config"]
    mode = cfg["tau"]["mode"]
    tag = "VanGL" if mode == "off" else f"TRGL[{mode} tau={tau}]"
    return f"{cfg['plan']['regime']} {tag}"


def per_module_rows(manifest: dict, root: Path) -> list[dict]:
    runs = load_runs(manifest, root)
    by_tau: dict = {}
    for entry, metrics in runs:
        by_tau.setdefault(str(entry["tau"]), []).append(metrics.final("test_acc"))
    rows = []
    for tau, finals in by_tau.items():
        finals = np.asarray(finals)
        for k in range(finals.shape[1]):
            mean, ci = mean_ci(finals[:, k])
            rows.append({"series": _series_label(manifest, tau), "module": k + 1, "mean_acc": mean,
                         "ci95": ci, "n_seeds": len(finals)})
    return rows


def regime_rows(manifests: list[tuple[dict, Path]]) -> list[dict]:
    rows = []
    for manifest, root in manifests:
        runs = load_runs(manifest, root)
        by_tau: dict = {}
        for entry, metrics in runs:
            by_tau.setdefault(str(entry["tau"]), []).append(metrics.final("test_acc"))
        for tau, finals in by_tau.items():
            finals = np.asarray(finals)
            last_mean, last_ci = mean_ci(finals[:, -1])
            best_mean, best_ci = mean_ci(finals.max(axis=1))
            rows.append({"series": _series_label(manifest, tau), "regime": manifest["config"]["plan"]["regime"],
                         "last_mean_acc": last_mean, "last_ci95": last_ci,
                         "best_mean_acc": best_mean, "best_ci95": best_ci, "n_seeds": len(finals)})
    return rows


def tau_rows(manifest: dict, root: Path) -> list[dict]:
    runs = load_runs(manifest, root)
    by_tau: dict = {}
    for entry, metrics in runs:
        acc = metrics.final("test_acc")[-1]
        disp = metrics.series(1, "mean_sq_displacement")[-1]
        by_tau.setdefault(entry["tau"], []).append((acc, disp))
    rows = []
    for tau in sorted(by_tau, key=lambda t: math.inf if t == "inf" else float(t)):
        vals = np.asarray(by_tau[tau])
        mean, ci = mean_ci(vals[:, 0])
        rows.append({"tau": tau, "mean_acc": mean, "ci95": ci,
                     "module1_sq_displacement": float(vals[:, 1].mean()), "n_seeds": len(vals)})
    return rows


def memory_rows(manifest: dict) -> list[dict]:
    config = ExperimentConfig.from_dict(manifest["config"])
    net = config.raw["network"]
    blocks = net["K"] * net["M"]
    spec0 = config.partition_spec(config.seeds[0])
    batch = config.raw["plan"]["batch_size"]
    rows = []
    for K in (k for k in range(1, blocks + 1) if blocks % k == 0):
        spec = PartitionSpec(K, blocks // K, spec0.width, spec0.input_dim, spec0.n_classes,
                             spec0.init_gain, spec0.seed, spec0.hidden)
        for regime in ("sequential", "parallel"):
            acc = memory_account(spec, TrainPlan(regime=regime, batch_size=batch), batch)
            rows.append({"regime": regime, "K": K, "M": blocks // K, "total": acc.total,
                         "e2e_total": acc.e2e_total, "saved_pct": acc.saved_pct})
    return rows


def write_table(rows: list[dict], path: Path) -> None:
    if not rows:
        raise ReportError("nothing to report")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_svg(rows: list[dict], x: str, y: str, series: str | None, path: Path, err: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[series] if series else y, []).append(r)
    for label, rs in groups.items():
        xs = [float(r[x]) if r[x] != "inf" else math.inf for r in rs]
        ys = [r[y] for r in rs]
        errs = [r[err] for r in rs] if err else None
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=str(label))
    if x == "tau":
        ax.set_xscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(args) -> int:
    manifests = [load_manifest(p) for p in args.manifest]
    manifest, root = manifests[0]
    out = Path(args.out) if args.out else root / "reports"
    stem = out / f"{manifest['run_id']}_{args.kind}"
    if args.kind == "per-module-curve":
        rows = [r for m, rt in manifests for r in per_module_rows(m, rt)]
        plot = ("module", "mean_acc", "series", "ci95")
    elif args.kind == "regime-comparison":
        rows = regime_rows(manifests)
        plot = None
    elif args.kind == "tau-sensitivity":
        rows = [r for m, rt in manifests for r in tau_rows(m, rt)]
        plot = ("tau", "mean_acc", None, "ci95")
    else:
        rows = memory_rows(manifest)
        plot = ("K", "saved_pct", "regime", None)
    write_table(rows, stem.with_suffix(".csv"))
    print(f"wrote {stem.with_suffix('.csv')}")
    if args.svg and plot:
        write_svg(rows, plot[0], plot[1], plot[2], stem.with_suffix(".svg"), plot[3])
        print(f"wrote {stem.with_suffix('.svg')}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trgl", description="Transport-regularized module-wise training")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured experiment for every seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seeds overriding the config")
    p.add_argument("--out", help="output directory (default runs/<run id>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run a built-in verification suite")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--json", help="also write the structured report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="tables (and optional SVG charts) from manifests")
    p.add_argument("--manifest", required=True, action="append",
                   help="manifest.json; repeat to compare several runs")
    p.add_argument("--kind", required=True, choices=REPORT_KINDS)
    p.add_argument("--out", help="output directory (default <manifest dir>/reports)")
    p.add_argument("--svg", action="store_true", help="also draw a static SVG chart")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
