"""Parametric latency/memory estimates for prefill, decode, and fine-tune tasks.

All models are linear in token counts. Prefill estimates subtract prompt
tokens whose KV is already resident in the prefix cache; decode is a
constant-latency single step whose memory is the one-token KV increment
(resident KV is accounted separately by the engine); fine-tune is one
optimizer step over a preference pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

from .workload import Request, WorkloadType


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CostProfile:
    """Per-workload linear cost coefficients plus device capacities (MB, ms).

    Defaults are illustrative placeholders meant to be overwritten by
    calibration against a measured profile; they are not measurements.
    """

    prefill_lat_per_token: float = 0.5
    prefill_mem_per_token: float = 0.5
    decode_lat_per_step: float = 20.0
    decode_kv_mem_per_token: float = 0.13
    ft_lat_per_sample_step: float = 120.0
    ft_mem_fixed: float = 200.0
    ft_mem_per_token: float = 1.0
    iter_overhead: float = 2.0
    capacity: float = 24576.0
    weights_resident: float = 14000.0
    # nonlinear-batching hook: each extra co-executing task scales the bin
    # latency by (1 - discount); 0 keeps the pure max-member model
    batch_latency_discount: float = 0.0

    def __post_init__(self) -> None:
        rates = (
            self.prefill_lat_per_token,
            self.prefill_mem_per_token,
            self.decode_lat_per_step,
            self.decode_kv_mem_per_token,
            self.ft_lat_per_sample_step,
            self.ft_mem_fixed,
            self.ft_mem_per_token,
            self.iter_overhead,
        )
        if any(r < 0 for r in rates):
            raise ValueError("cost profile rates must be >= 0")
        if not (self.capacity > self.weights_resident >= 0):
            raise ValueError("cost profile requires capacity > weights_resident >= 0")
        if not (0.0 <= self.batch_latency_discount < 1.0):
            raise ValueError("batch_latency_discount must be in [0, 1)")

    def bin_latency(self, max_member_lat: float, n_members: int) -> float:
        """Latency of a bin of co-executing tasks, the slowest member scaled by
        the optional batching discount."""
        if n_members <= 1 or self.batch_latency_discount == 0.0:
            return max_member_lat
        return max_member_lat * (1.0 - self.batch_latency_discount) ** (n_members - 1)

    @property
    def usable_capacity(self) -> float:
        return self.capacity - self.weights_resident


@dataclass(frozen=True)
class WorkloadEstimate:
    mem: float
    lat: float

    def __post_init__(self) -> None:
        if self.mem < 0 or self.lat < 0:
            raise ValueError("workload estimates must be >= 0")


class CacheState(Protocol):
    """What the estimator needs from the prefix cache."""

    def cached_prefix_len(self, prompt_tokens: list[int]) -> int: ...


def get_workload(task: Request, profile: CostProfile, cache_state: CacheState | None = None) -> WorkloadEstimate:
    """Estimate (memory MB, latency ms) for one scheduled step of ``task``."""
    if task.workload is WorkloadType.PREFILL:
        shared = cache_state.cached_prefix_len(task.prompt_tokens) if cache_state is not None else 0
        effective = max(0, len(task.prompt_tokens) - shared)
        lat = profile.prefill_lat_per_token * effective
        mem = (profile.prefill_mem_per_token + profile.decode_kv_mem_per_token) * effective
        return WorkloadEstimate(mem=mem, lat=lat)
    if task.workload is WorkloadType.DECODE:
        return WorkloadEstimate(mem=profile.decode_kv_mem_per_token, lat=profile.decode_lat_per_step)
    pair = task.pair
    if pair is None:
        raise ValueError(f"finetune request {task.id} has no preference pair")
    mem = profile.ft_mem_fixed + profile.ft_mem_per_token * (pair.tokens_chosen + pair.tokens_rejected)
    return WorkloadEstimate(mem=mem, lat=profile.ft_lat_per_sample_step)


@dataclass
class CalibrationReport:
    profile: CostProfile
    residuals: dict[str, float] = field(default_factory=dict)
    points_per_workload: dict[str, int] = field(default_factory=dict)


def _fit_through_origin(xs: list[float], ys: list[float]) -> tuple[float, float]:
    """Least-squares slope of y = a*x; returns (a, rms residual)."""
    sxx = sum(x * x for x in xs)
    if sxx == 0:
        return 0.0, math.sqrt(sum(y * y for y in ys) / len(ys))
    a = sum(x * y for x, y in zip(xs, ys)) / sxx
    rss = sum((y - a * x) ** 2 for x, y in zip(xs, ys))
    return a, math.sqrt(rss / len(ys))


def _fit_affine(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares fit of y = b + a*x; returns (b, a, rms residual)."""
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0:
        return my, 0.0, math.sqrt(sum((y - my) ** 2 for y in ys) / n)
    a = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    b = my - a * mx
    rss = sum((y - (b + a * x)) ** 2 for x, y in zip(xs, ys))
    return b, a, math.sqrt(rss / n)


def calibrate(profile_csv: str | Path, base: CostProfile | None = None) -> CalibrationReport:
    """Fit the linear coefficients from measured rows.

    CSV header must be ``workload,batch_size,tokens,latency_ms,memory_mb``.
    Each of the three workloads needs at least two points. Capacity,
    resident-weight, and overhead fields are carried over from ``base``.
    """
    base = base or CostProfile()
    path = Path(profile_csv)
    rows: dict[str, list[tuple[float, float, float, float]]] = {"prefill": [], "decode": [], "finetune": []}
    lines = path.read_text().splitlines() if path.exists() else []
    if not lines:
        raise CalibrationError(f"{path}: empty profile file")
    header = [h.strip() for h in lines[0].split(",")]
    expected = ["workload", "batch_size", "tokens", "latency_ms", "memory_mb"]
    if header != expected:
        raise CalibrationError(f"{path}: expected header {','.join(expected)!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise CalibrationError(f"{path}: line {lineno}: expected 5 fields")
        workload = parts[0]
        if workload not in rows:
            raise CalibrationError(f"{path}: line {lineno}: unknown workload {workload!r}")
        try:
            rows[workload].append((float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
        except ValueError as exc:
            raise CalibrationError(f"{path}: line {lineno}: {exc}") from exc
    for workload, pts in rows.items():
        if len(pts) < 2:
            raise CalibrationError(f"{path}: need at least 2 points for workload {workload!r}, got {len(pts)}")

    residuals: dict[str, float] = {}

    # decode first: its memory slope (KV per token) feeds the prefill split
    dec = rows["decode"]
    dec_lat = sum(p[2] for p in dec) / len(dec)
    residuals["decode_lat"] = math.sqrt(sum((p[2] - dec_lat) ** 2 for p in dec) / len(dec))
    kv_slope, residuals["decode_mem"] = _fit_through_origin([p[1] for p in dec], [p[3] for p in dec])

    pre = rows["prefill"]
    pre_lat_slope, residuals["prefill_lat"] = _fit_through_origin([p[1] for p in pre], [p[2] for p in pre])
    pre_mem_slope, residuals["prefill_mem"] = _fit_through_origin([p[1] for p in pre], [p[3] for p in pre])

    ft = rows["finetune"]
    ft_lat = sum(p[2] for p in ft) / len(ft)
    residuals["ft_lat"] = math.sqrt(sum((p[2] - ft_lat) ** 2 for p in ft) / len(ft))
    ft_fixed, ft_slope, residuals["ft_mem"] = _fit_affine([p[1] for p in ft], [p[3] for p in ft])

    profile = replace(
        base,
        prefill_lat_per_token=max(0.0, pre_lat_slope),
        prefill_mem_per_token=max(0.0, pre_mem_slope - kv_slope),
        decode_lat_per_step=max(0.0, dec_lat),
        decode_kv_mem_per_token=max(0.0, kv_slope),
        ft_lat_per_sample_step=max(0.0, ft_lat),
        ft_mem_fixed=max(0.0, ft_fixed),
        ft_mem_per_token=max(0.0, ft_slope),
    )
    return CalibrationReport(
        profile=profile,
        residuals=residuals,
        points_per_workload={k: len(v) for k, v in rows.items()},
    )


def write_profile(profile: CostProfile, path: str | Path) -> None:
    """Serialize a profile as flat key=value lines."""
    keys = (
        "prefill_lat_per_token",
        "prefill_mem_per_token",
        "decode_lat_per_step",
        "decode_kv_mem_per_token",
        "ft_lat_per_sample_step",
        "ft_mem_fixed",
        "ft_mem_per_token",
        "iter_overhead",
        "capacity",
        "weights_resident",
        "batch_latency_discount",
    )
    Path(path).write_text("".join(f"{k}={getattr(profile, k)!r}\n" for k in keys))


def read_profile(path: str | Path) -> CostProfile:
    values: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise CalibrationError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = float(value)
    return CostProfile(**values)
