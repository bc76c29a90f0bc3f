"""Command-line entry point: train, oracle-check, compare and report.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 oracle-check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import kernels
from .checks import run_suite
from .config import TrainConfig, load_raw, parse_override, resolve
from .errors import ConfigError, EnumerationCapExceeded
from .plotting import write_charts
from .trainer import load_checkpoint, metrics_line, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3
SEED_ENV = "VPD_SEED"


def load_config(path, sets=(), seed=None) -> TrainConfig:
    """Config file, then the seed environment variable, then ``--set`` overrides."""
    overrides = []
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        overrides.append(("seed", env_seed))
    if seed is not None:
        overrides.append(("seed", seed))
    overrides.extend(parse_override(s) for s in sets)
    return TrainConfig.from_flat(resolve(load_raw(path), overrides))


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize(records, state, seconds, status="ok", error=None) -> dict:
    evals = [r["eval_accuracy"] for r in records if r.get("eval_accuracy") is not None]
    out = {
        "status": status,
        "batches": len(records),
        "final_eval_accuracy": evals[-1] if evals else None,
        "best_eval_accuracy": max(evals) if evals else None,
        "wall_clock_s": seconds,
        "counters": dict(state.counters) if state is not None else {},
        "kernel_backend": kernels.BACKEND,
    }
    if error is not None:
        out["error"] = error
    return out


def run_training(cfg: TrainConfig, out_dir, resume=None, charts=True) -> dict:
    """Train one config into ``out_dir``; metrics lines are flushed as they arrive."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.dumps())
    state = load_checkpoint(cfg, resume) if resume else None
    metrics = out / "metrics.jsonl"
    mode = "a" if resume else "w"
    records = read_metrics(metrics) if resume and metrics.exists() else []
    if resume:
        records = [r for r in records if r["batch"] <= state.batch_index]
        metrics.write_text("".join(metrics_line(r) + "\n" for r in records))
    t0 = time.perf_counter()
    status, error = "ok", None
    with open(metrics, mode) as fh:
        def emit(rec):
            records.append(rec)
            fh.write(metrics_line(rec) + "\n")
            fh.flush()
        try:
            state, _ = train(cfg, state, on_record=emit, checkpoint_dir=out / "checkpoints")
        except Exception as exc:  # partial metrics are already on disk
            status, error = "failed", f"{type(exc).__name__}: {exc}"
    summary = summarize(records, state, time.perf_counter() - t0, status, error)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if charts and records:
        write_charts({cfg.method: records}, out)
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    print(cfg.dumps(), end="")
    summary = run_training(cfg, args.out, args.resume, not args.no_charts)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if summary["status"] == "ok" else EXIT_RUNTIME


def cmd_oracle_check(args) -> int:
    cfg = load_config(args.config, args.set)
    try:
        results = run_suite(cfg.env, cfg.beta, args.identity_samples, args.grad_instances,
                            cfg.seed, args.corrupt, cfg.oracle_cap)
    except EnumerationCapExceeded as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    failed = [r for r in results if not r.passed]
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark}  {r.name:<32} max_residual={r.max_residual:.3e}  tol={r.tolerance:.0e}  n={r.n}")
    if args.json:
        Path(args.json).write_text(json.dumps([r.record() for r in results], indent=2) + "\n")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def _cell(job):
    config, sets, method, seed, out_dir, charts = job
    try:
        cfg = load_config(config, list(sets) + [f"method={method}"], seed=seed)
        return run_training(cfg, out_dir, charts=charts)
    except Exception as exc:
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "final_eval_accuracy": None}


def aggregate(summaries) -> dict:
    finals = [s["final_eval_accuracy"] for s in summaries
              if s.get("status") == "ok" and s.get("final_eval_accuracy") is not None]
    return {
        "mean": float(np.mean(finals)) if finals else None,
        "std": float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0 if finals else None,
        "n_ok": len(finals),
        "n_failed": len(summaries) - len(finals),
    }


def cmd_compare(args) -> int:
    if len(args.seeds) < 2:
        raise ConfigError("compare needs at least 2 seeds")
    load_config(args.config, args.set)  # fail fast on a bad file
    out = Path(args.out)
    labels, seen = [], {}
    for m in args.methods:
        seen[m] = seen.get(m, 0) + 1
        labels.append(m if seen[m] == 1 else f"{m}__{seen[m]}")
    jobs = [(args.config, tuple(args.set), m, s, str(out / label / f"seed_{s}"), not args.no_charts)
            for m, label in zip(args.methods, labels) for s in args.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    per = len(args.seeds)
    rows = {}
    for i, label in enumerate(labels):
        summaries = results[i * per:(i + 1) * per]
        rows[label] = {"seeds": list(args.seeds), **aggregate(summaries),
                       "runs": {str(s): r.get("status") for s, r in zip(args.seeds, summaries)}}
    (out / "compare.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    lines = ["| method | final eval accuracy (mean ± std) | ok | failed |", "|---|---|---|---|"]
    for label, row in rows.items():
        stat = "n/a" if row["mean"] is None else f"{row['mean']:.4f} ± {row['std']:.4f}"
        lines.append(f"| {label} | {stat} | {row['n_ok']} | {row['n_failed']} |")
    table = "\n".join(lines) + "\n"
    (out / "compare.md").write_text(table)
    print(table, end="")
    if not args.no_charts:
        overlay = {}
        for label in labels:
            runs = [read_metrics(p) for s in args.seeds
                    if (p := out / label / f"seed_{s}" / "metrics.jsonl").exists()]
            if runs:
                overlay[label] = _mean_curve(runs)
        write_charts(overlay, out)
    return EXIT_OK if all(r["n_failed"] == 0 for r in rows.values()) else EXIT_RUNTIME


def _mean_curve(runs):
    """Per-batch mean of each numeric chart field across seeds."""
    by_batch = {}
    for recs in runs:
        for r in recs:
            by_batch.setdefault(r["batch"], []).append(r)
    out = []
    for b in sorted(by_batch):
        rs = by_batch[b]
        rec = {"batch": b}
        for f in ("eval_accuracy", "reward_margin"):
            vals = [r[f] for r in rs if r.get(f) is not None]
            rec[f] = float(np.mean(vals)) if vals else None
        out.append(rec)
    return out


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics = run / "metrics.jsonl"
    if not metrics.exists():
        raise ConfigError(f"no metrics.jsonl under {run}")
    records = read_metrics(metrics)
    method = records[0]["method"] if records else "run"
    for p in write_charts({method: records}, args.out or run):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML file or bundled preset name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")

    t = sub.add_parser("train", help="run one experiment")
    common(t)
    t.add_argument("--out", required=True, help="report directory")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--no-charts", action="store_true")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle-check", help="exact identities, bound sweep and gradient checks")
    common(o)
    o.add_argument("--identity-samples", type=int, default=100)
    o.add_argument("--grad-instances", type=int, default=50)
    o.add_argument("--json", help="also write results to this file")
    o.add_argument("--corrupt", help=argparse.SUPPRESS)
    o.set_defaults(func=cmd_oracle_check)

    c = sub.add_parser("compare", help="several methods over several seeds")
    common(c)
    c.add_argument("--methods", nargs="+", required=True)
    c.add_argument("--seeds", nargs="+", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--no-charts", action="store_true")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="re-render charts from a metrics stream")
    r.add_argument("--run", required=True, help="directory containing metrics.jsonl")
    r.add_argument("--out", help="chart directory (defaults to the run directory)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
