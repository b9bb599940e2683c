"""Run artifacts and comparison reports: delimited metrics, JSONL timelines,
and figures rendered to SVG files next to them.

metrics.csv carries one row per run with a fixed column contract so CI can
diff runs; summary.json embeds the full config, trace hash, and the sampled
alignment series; comparison reports add side-by-side tables and the
standard chart set (alignment over time, throughput vs retrain rate, latency
breakdown, SLO attainment vs load, iteration counts).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.fonttype"] = "none"  # keep labels as text, not glyph paths

import matplotlib.pyplot as plt

from .config import RunConfig
from .engine import RunResult
from .workload import Request, TRACE_SCHEMA

METRIC_COLUMNS = [
    "run_id",
    "policy",
    "retrain_rate",
    "arrival_rate",
    "ttft_p50",
    "ttft_p99",
    "tbt_p50",
    "tbt_p99",
    "ft_lat_p50",
    "throughput_tok_s",
    "slo_attainment",
    "utilization",
    "fragmentation",
    "total_iterations",
    "avg_win_rate",
    "avg_clpd",
]

_SVG_METADATA = {"Date": None}  # keep SVG output byte-stable across reruns


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def trace_digest(trace: list[Request]) -> str:
    h = hashlib.sha256()
    h.update(TRACE_SCHEMA.encode())
    for req in trace:
        margin = "" if req.pair is None else repr(req.pair.initial_margin)
        h.update(
            f"{req.id}|{req.tenant}|{req.workload.value}|{req.arrival_time!r}|"
            f"{','.join(map(str, req.prompt_tokens))}|{req.target_output_len}|{margin}\n".encode()
        )
    return h.hexdigest()


def metrics_row(run_id: str, cfg: RunConfig, result: RunResult) -> dict:
    m = result.metrics
    row = {
        "run_id": run_id,
        "policy": cfg.scheduler.policy.value,
        "retrain_rate": cfg.trace.retrain_rate,
        "arrival_rate": cfg.trace.arrival_rate,
    }
    row.update(m.latency_summary())
    row.update(
        {
            "throughput_tok_s": m.throughput_tok_s,
            "slo_attainment": m.slo_attainment,
            "utilization": m.utilization,
            "fragmentation": m.fragmentation,
            "total_iterations": m.total_iterations,
            "avg_win_rate": m.avg_win_rate,
            "avg_clpd": m.avg_clpd,
        }
    )
    return row


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_cell(row[c]) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:] if line.strip()]


def write_timeline_jsonl(timeline: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for record in timeline:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def write_alignment_csv(timeline: list[dict], path: str | Path) -> None:
    """Per-sampling-interval eval metrics, one row per (time, tenant)."""
    lines = ["t,tenant,win_rate,clpd"]
    for record in timeline:
        if record.get("kind") == "alignment_sample":
            lines.append(
                f"{_cell(record['t'])},{record['tenant']},"
                f"{_cell(record['win_rate'])},{_cell(record['clpd'])}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_timeline_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def build_summary(run_id: str, cfg: RunConfig, result: RunResult, trace_hash: str) -> dict:
    m = result.metrics
    summary = {
        "schema": "mace-summary-v1",
        "run_id": run_id,
        "trace_hash": trace_hash,
        "config": cfg.canonical(),
        "metrics": {
            **metrics_row(run_id, cfg, result),
            "makespan_s": m.makespan_s,
            "decoded_tokens": m.decoded_tokens,
            "n_inference": m.n_inference,
            "n_ft": m.n_ft,
            "rejected": sorted(m.rejected_ids),
        },
        "sharing_ratio_hist": m.sharing_histogram(),
        "alignment_series": [[t, w, c] for t, w, c in result.alignment_series],
    }
    if result.overhead is not None:
        summary["overhead"] = {
            "decisions": result.overhead.decisions,
            "mean_decision_ms": result.overhead.mean_decision_ms,
            "max_metadata_bytes": result.overhead.max_metadata_bytes,
            "bins_examined": result.overhead.bins_examined,
        }
    return summary


def write_summary_json(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)


def render_timeline_svg(timeline: list[dict], path: str | Path) -> None:
    """Memory occupancy and batch composition over simulated time."""
    ticks = [r for r in timeline if r.get("kind") == "tick"]
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    if ticks:
        ts = [r["t_start"] for r in ticks]
        axes[0].plot(ts, [r["used_mb"] for r in ticks], label="used", lw=0.9)
        axes[0].plot(ts, [r["capacity_mb"] for r in ticks], label="capacity", ls="--", lw=0.9)
        axes[0].plot(ts, [r["trie_mb"] for r in ticks], label="prefix cache", lw=0.9)
        axes[0].plot(ts, [r["resident_kv_mb"] for r in ticks], label="decode KV", lw=0.9)
        axes[1].plot(ts, [r["n_decode"] for r in ticks], label="decode", lw=0.9)
        axes[1].plot(ts, [r["n_prefill"] for r in ticks], label="prefill", lw=0.9)
        axes[1].plot(ts, [r["n_ft"] for r in ticks], label="fine-tune", lw=0.9)
    axes[0].set_ylabel("MB")
    axes[0].legend(fontsize=8)
    axes[1].set_ylabel("tasks per iteration")
    axes[1].set_xlabel("simulated time (s)")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, Path(path))


def _label(summary: dict) -> str:
    return f"{summary['metrics']['policy']}@{summary['run_id'][:6]}"


def render_comparison_charts(summaries: list[dict], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    # alignment metrics over time
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    for summary in summaries:
        series = summary.get("alignment_series", [])
        if not series:
            continue
        ts = [p[0] for p in series]
        axes[0].plot(ts, [p[1] for p in series], label=_label(summary), lw=1.0)
        axes[1].plot(ts, [p[2] for p in series], label=_label(summary), lw=1.0)
    axes[0].set_ylabel("win rate")
    axes[1].set_ylabel("CLPD")
    axes[1].set_xlabel("simulated time (s)")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = out / "alignment_over_time.svg"
    _save(fig, path)
    written.append(path)

    # throughput vs retrain rate, grouped per policy
    fig, ax = plt.subplots(figsize=(7, 4.5))
    by_policy: dict[str, list[tuple[float, float]]] = {}
    for summary in summaries:
        m = summary["metrics"]
        by_policy.setdefault(m["policy"], []).append(
            (float(m["retrain_rate"]), float(m["throughput_tok_s"]))
        )
    for policy in sorted(by_policy):
        points = sorted(by_policy[policy])
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=policy)
    ax.set_xlabel("retrain rate")
    ax.set_ylabel("throughput (tok/s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "throughput_vs_retrain.svg"
    _save(fig, path)
    written.append(path)

    # latency breakdown bars
    fig, ax = plt.subplots(figsize=(8, 4.5))
    labels = [_label(s) for s in summaries]
    x = range(len(summaries))
    width = 0.27
    for offset, key in zip((-width, 0.0, width), ("ttft_p50", "tbt_p50", "ft_lat_p50")):
        ax.bar(
            [xi + offset for xi in x],
            [float(s["metrics"][key]) for s in summaries],
            width=width,
            label=key,
        )
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel("latency (ms)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "latency_breakdown.svg"
    _save(fig, path)
    written.append(path)

    # SLO attainment vs offered load
    fig, ax = plt.subplots(figsize=(7, 4.5))
    by_policy_slo: dict[str, list[tuple[float, float]]] = {}
    for summary in summaries:
        m = summary["metrics"]
        by_policy_slo.setdefault(m["policy"], []).append(
            (float(m["arrival_rate"]), float(m["slo_attainment"]))
        )
    for policy in sorted(by_policy_slo):
        points = sorted(by_policy_slo[policy])
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="s", label=policy)
    ax.set_xlabel("arrival rate (req/s)")
    ax.set_ylabel("SLO attainment")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "slo_vs_load.svg"
    _save(fig, path)
    written.append(path)

    # iteration counts
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, [int(s["metrics"]["total_iterations"]) for s in summaries])
    ax.set_ylabel("total iterations")
    ax.tick_params(axis="x", rotation=20, labelsize=8)
    fig.tight_layout()
    path = out / "iterations.svg"
    _save(fig, path)
    written.append(path)

    return written


def comparison_rows(summaries: list[dict]) -> list[dict]:
    return [s["metrics"] for s in summaries]


def write_comparison_csv(summaries: list[dict], path: str | Path) -> None:
    write_metrics_csv(
        [{c: s["metrics"][c] for c in METRIC_COLUMNS} for s in summaries], path
    )


def format_comparison_table(summaries: list[dict]) -> str:
    cols = ["run_id", "policy", "total_iterations", "throughput_tok_s", "slo_attainment", "avg_win_rate", "avg_clpd"]
    lines = ["\t".join(cols)]
    for s in summaries:
        m = s["metrics"]
        lines.append(
            "\t".join(
                (
                    m["run_id"][:8],
                    m["policy"],
                    str(m["total_iterations"]),
                    f"{float(m['throughput_tok_s']):.1f}",
                    f"{float(m['slo_attainment']):.3f}",
                    f"{float(m['avg_win_rate']):.3f}",
                    f"{float(m['avg_clpd']):.3f}",
                )
            )
        )
    return "\n".join(lines)
