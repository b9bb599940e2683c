"""Shared builders for engine-level and acceptance tests."""

from __future__ import annotations

import dataclasses

from macesim.alignment import AlignmentEnv, TenantParams
from macesim.cost_model import CostProfile
from macesim.distributions import DistSpec
from macesim.engine import CacheConfig, Engine, EngineConfig, RunResult
from macesim.priority import PriorityParams
from macesim.scheduler import Policy, SchedulerConfig
from macesim.workload import PrefixTreeSpec, Request, TraceConfig, generate_trace


def trace_config(
    *,
    arrival_rate: float = 10.0,
    retrain_rate: float = 0.1,
    duration: float = 5.0,
    seed: int = 0,
    prompt_mean: int = 64,
    output_mean: int = 16,
    branching: int = 2,
    depth: int = 3,
    segment: int = 16,
    tenant: TenantParams | None = None,
) -> TraceConfig:
    tenant = tenant or TenantParams()
    return TraceConfig(
        arrival_rate=arrival_rate,
        retrain_rate=retrain_rate,
        duration=duration,
        seed=seed,
        prompt_len_dist=DistSpec("geometric", {"mean": prompt_mean}),
        output_len_dist=DistSpec("geometric", {"mean": output_mean}),
        prefix_tree_spec=PrefixTreeSpec(
            branching=branching, depth=depth, segment_len=DistSpec("constant", {"value": segment})
        ),
        tenants=(tenant.drift_spec(),),
    )


def run_sim(
    *,
    policy: Policy = Policy.HYBRID,
    trace: list[Request] | None = None,
    trace_cfg: TraceConfig | None = None,
    tenant: TenantParams | None = None,
    profile: CostProfile | None = None,
    sched: SchedulerConfig | None = None,
    cache: CacheConfig | None = None,
    priority: PriorityParams | None = None,
    seed: int = 0,
    metrics_interval: float = 2.0,
    metrics_horizon: float | None = None,
    instrument: bool = False,
    **trace_kwargs,
) -> RunResult:
    tenant = tenant or TenantParams()
    if trace_cfg is None:
        trace_cfg = trace_config(seed=seed, tenant=tenant, **trace_kwargs)
    if trace is None:
        trace = generate_trace(trace_cfg)
    profile = profile or CostProfile(capacity=24576.0, weights_resident=8000.0)
    if sched is None:
        sched = SchedulerConfig(policy=policy)
    elif sched.policy is not policy:
        sched = dataclasses.replace(sched, policy=policy)
    cache = cache or CacheConfig()
    priority = priority or PriorityParams()
    env = AlignmentEnv.create({0: tenant}, seed=trace_cfg.seed)
    engine = Engine(
        trace,
        profile,
        sched,
        priority,
        cache,
        env,
        EngineConfig(seed=trace_cfg.seed, metrics_interval=metrics_interval, instrument=instrument),
        metrics_horizon=metrics_horizon if metrics_horizon is not None else trace_cfg.duration,
    )
    return engine.run()
