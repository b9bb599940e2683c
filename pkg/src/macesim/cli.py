"""Command-line front end: trace generation, runs, sweeps, and comparisons.

Exit codes are a stable contract for CI: 0 success, 2 configuration error,
3 simulation contract violation, 4 comparison mismatch. Output directories
are named by the config hash, so identical configs are idempotent and sweep
merges are deterministic regardless of execution order. MACE_SIM_THREADS
caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import report
from .config import ConfigError, RunConfig, load_config
from .distributions import DistributionError
from .engine import RunResult, SimulationContractError, run_simulation
from .scheduler import Policy
from .workload import (
    Request,
    TraceConfigError,
    TraceParseError,
    generate_trace,
    read_trace,
    write_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_MISMATCH = 4

_CONFIG_ERRORS = (ConfigError, TraceConfigError, TraceParseError, DistributionError, ValueError)


def _load_trace(cfg: RunConfig) -> list[Request]:
    if cfg.trace_file:
        return read_trace(cfg.trace_file)
    return generate_trace(cfg.trace)


def execute_run(cfg: RunConfig, out_root: Path, render: bool | None = None) -> tuple[str, Path, dict]:
    """Run one simulation and write its artifact directory; returns (id, dir, row)."""
    trace = _load_trace(cfg)
    env = cfg.make_env()
    result: RunResult = run_simulation(
        trace,
        cfg.profile,
        cfg.scheduler,
        cfg.priority,
        cfg.cache,
        env,
        cfg.engine_config(),
        metrics_horizon=cfg.trace.duration,
    )
    run_id = cfg.run_id()
    run_dir = out_root / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    row = report.metrics_row(run_id, cfg, result)
    report.write_metrics_csv([row], run_dir / "metrics.csv")
    report.write_timeline_jsonl(result.timeline, run_dir / "timeline.jsonl")
    report.write_alignment_csv(result.timeline, run_dir / "alignment.csv")
    summary = report.build_summary(run_id, cfg, result, report.trace_digest(trace))
    report.write_summary_json(summary, run_dir / "summary.json")
    if cfg.render_timeline if render is None else render:
        report.render_timeline_svg(result.timeline, run_dir / "timeline.svg")
    return run_id, run_dir, row


def cmd_gen_trace(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    trace = generate_trace(cfg.trace)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace, out)
    print(f"wrote {len(trace)} requests to {out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, seed_override=args.seed, policy_override=args.policy)
    out_root = Path(args.out) if args.out else Path(cfg.out_dir)
    run_id, run_dir, row = execute_run(cfg, out_root)
    print(f"run {run_id} ({row['policy']}) -> {run_dir}")
    return EXIT_OK


def _parse_list(raw: str | None, conv):
    if not raw:
        return None
    return [conv(part) for part in raw.split(",") if part.strip()]


def cmd_sweep(args: argparse.Namespace) -> int:
    base = load_config(args.config, seed_override=args.seed, policy_override=args.policy)
    policies = _parse_list(args.policies, Policy) or [base.scheduler.policy]
    seeds = _parse_list(args.seeds, int) or [base.trace.seed]
    arrival_rates = _parse_list(args.arrival_rates, float) or [base.trace.arrival_rate]
    retrain_rates = _parse_list(args.retrain_rates, float) or [base.trace.retrain_rate]

    grid: list[RunConfig] = []
    for policy in policies:
        for seed in seeds:
            for rate in arrival_rates:
                for retrain in retrain_rates:
                    grid.append(
                        dataclasses.replace(
                            base,
                            trace=dataclasses.replace(
                                base.trace, seed=seed, arrival_rate=rate, retrain_rate=retrain
                            ),
                            scheduler=dataclasses.replace(base.scheduler, policy=policy),
                        )
                    )

    seen: dict[str, RunConfig] = {}
    for cfg in grid:
        seen.setdefault(cfg.run_id(), cfg)
    unique = list(seen.values())

    out_root = Path(args.out) if args.out else Path(base.out_dir)
    threads = max(1, int(os.environ.get("MACE_SIM_THREADS", "4")))
    # figure rendering stays out of worker threads (pyplot is not thread-safe)
    if threads == 1 or len(unique) == 1:
        results = [execute_run(cfg, out_root, render=False) for cfg in unique]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda cfg: execute_run(cfg, out_root, render=False), unique))
    rows = sorted((row for _, _, row in results), key=lambda r: r["run_id"])
    report.write_metrics_csv(rows, out_root / "metrics.csv")
    print(f"swept {len(unique)} runs -> {out_root}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    summaries: list[dict] = []
    for run_dir in args.runs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise ConfigError(f"not a completed run directory (missing summary.json): {run_dir}")
        summaries.append(json.loads(path.read_text()))
    if len(summaries) < 2:
        raise ConfigError("compare requires at least 2 completed runs")
    hashes = {s["trace_hash"] for s in summaries}
    if len(hashes) > 1 and not args.force:
        print(
            "refusing to compare runs over different traces "
            f"({len(hashes)} distinct trace hashes); pass --force to override",
            file=sys.stderr,
        )
        return EXIT_MISMATCH
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries.sort(key=lambda s: s["run_id"])
    report.write_comparison_csv(summaries, out / "comparison.csv")
    charts = report.render_comparison_charts(summaries, out)
    print(report.format_comparison_table(summaries))
    print(f"wrote comparison.csv and {len(charts)} charts -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macesim",
        description="Trace-driven simulator of colocated LLM inference and continuous fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-trace", help="generate a trace file from a config")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen_trace)

    p_run = sub.add_parser("run", help="run one simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output root (default: [report] out_dir)")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--policy", default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--policy", default=None)
    p_sweep.add_argument("--policies", default=None, help="comma-separated policy names")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_sweep.add_argument("--arrival-rates", dest="arrival_rates", default=None)
    p_sweep.add_argument("--retrain-rates", dest="retrain_rates", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="compare completed run directories")
    p_cmp.add_argument("runs", nargs="+")
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--force", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SimulationContractError as exc:
        print(f"simulation contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
