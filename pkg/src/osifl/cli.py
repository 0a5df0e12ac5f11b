"""Command line front end: run, sweep, selftest."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .config import ExperimentConfig, build_run_inputs, parse_config
from .errors import ConfigError
from .orchestrator import CSV_HEADER, RunReport, report_rows, rows_to_csv, \
    run_method, write_report_csv

SEED_ENV = "OSIFL_SEED_OVERRIDE"

SWEEP_AXES = {
    "p": ("retain_per_class", int),
    "clients_per_task": ("clients_per_task", int),
    "w": ("guidance_w", float),
}

SWEEP_HEADER = ("axis,value,method,seed,avg_acc_final,forgetting_mean,"
                "upload_floats_total,madds_total")


def resolve_seeds(config: ExperimentConfig) -> tuple[int, ...]:
    """Config seeds, unless the override environment variable is set."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return tuple(config.seeds)
    try:
        return tuple(int(tok.strip()) for tok in raw.split(",")
                     if tok.strip())
    except ValueError:
        raise ConfigError(
            f"{SEED_ENV} must be a comma list of integers, got {raw!r}"
        ) from None


def _summary_rows(config, seeds, reports: dict) -> list[list]:
    """Seed-averaged per-task summary rows (seed column = -1)."""
    rows = []
    for method in config.methods:
        done = [reports[(method, s)] for s in seeds
                if (method, s) in reports]
        if not done:
            continue
        for t_idx in range(len(done[0].avg_after)):
            avg = float(np.mean([r.avg_after[t_idx] for r in done]))
            forg = float(np.mean([r.forgetting_after[t_idx] for r in done]))
            ups = float(np.mean([r.uploads_after[t_idx] for r in done]))
            madds = float(np.mean([r.madds_after[t_idx] for r in done]))
            rows.append([method.value, -1, t_idx + 1, -1, avg, avg, forg,
                         ups, madds])
    return rows


def run_experiment(config: ExperimentConfig, out_dir: str) -> int:
    """Run every configured (method, seed) pair; write one CSV per run
    plus a seed-averaged summary. Nonzero exit if any run failed, with
    whatever completed written under a 'partial' summary name."""
    os.makedirs(out_dir, exist_ok=True)
    seeds = resolve_seeds(config)
    reports: dict = {}
    failures: list[str] = []
    for seed in seeds:
        inputs = build_run_inputs(config, seed)
        for method in config.methods:
            try:
                report = run_method(method, *inputs, config, seed)
            except Exception as err:
                failures.append(f"{method.value} seed={seed}: {err}")
                continue
            reports[(method, seed)] = report
            path = os.path.join(out_dir,
                                f"run_{method.value}_seed{seed}.csv")
            write_report_csv(path, [report])
    name = "summary.partial.csv" if failures else "summary.csv"
    with open(os.path.join(out_dir, name), "w", newline="\n") as fh:
        fh.write(rows_to_csv(_summary_rows(config, seeds, reports)))
    for failure in failures:
        print(f"run failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def sweep(config: ExperimentConfig, axis: str, values, out_dir: str) -> int:
    """Re-run the whole experiment per axis value; same world and seeds
    across values, so comparisons are paired. One combined CSV."""
    if axis not in SWEEP_AXES:
        raise ConfigError(
            f"unknown sweep axis {axis!r}; choose from "
            f"{sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    attr, cast = SWEEP_AXES[axis]
    os.makedirs(out_dir, exist_ok=True)
    seeds = resolve_seeds(config)
    rows: list[list] = []
    failures: list[str] = []
    for value in values:
        cfg = dataclasses.replace(config, **{attr: cast(value)})
        per_method: dict = {}
        for seed in seeds:
            inputs = build_run_inputs(cfg, seed)
            for method in cfg.methods:
                try:
                    report = run_method(method, *inputs, cfg, seed)
                except Exception as err:
                    failures.append(
                        f"{axis}={value} {method.value} seed={seed}: {err}")
                    continue
                rows.append([axis, cast(value), method.value, seed,
                             report.avg_after[-1], report.forgetting_mean,
                             report.upload_floats_total, report.madds_total])
                per_method.setdefault(method, []).append(report)
        for method in cfg.methods:
            done = per_method.get(method, [])
            if not done:
                continue
            rows.append([axis, cast(value), method.value, -1,
                         float(np.mean([r.avg_after[-1] for r in done])),
                         float(np.mean([r.forgetting_mean for r in done])),
                         float(np.mean([r.upload_floats_total
                                        for r in done])),
                         float(np.mean([r.madds_total for r in done]))])
    name = f"sweep_{axis}.partial.csv" if failures else f"sweep_{axis}.csv"
    with open(os.path.join(out_dir, name), "w", newline="\n") as fh:
        fh.write(rows_to_csv(rows, header=SWEEP_HEADER))
    for failure in failures:
        print(f"sweep run failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def _load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="osifl",
        description="One-shot incremental federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run all configured methods and seeds")
    p_run.add_argument("--config", required=True, help="config file path")
    p_run.add_argument("--out", help="output directory (default from config)")
    p_sweep = sub.add_parser("sweep", help="sweep one config axis")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", required=True,
                         choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--out", help="output directory")
    sub.add_parser("selftest", help="run the acceptance checks")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = _load_config(args.config)
            return run_experiment(config, args.out or config.out_dir)
        if args.command == "sweep":
            config = _load_config(args.config)
            values = [tok.strip() for tok in args.values.split(",")
                      if tok.strip()]
            return sweep(config, args.axis, values,
                         args.out or config.out_dir)
        if args.command == "selftest":
            from .acceptance import run_all
            return run_all()
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
