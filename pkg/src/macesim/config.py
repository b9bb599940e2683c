"""Run configuration: flat sectioned key=value files, defaults, and hashing.

A run is fully described by one config file (plus optional CLI overrides for
seed and policy). The canonical serialized form of the assembled RunConfig is
hashed to name the output directory, which makes reruns of identical configs
idempotent and parallel sweep merges deterministic.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .alignment import AlignmentEnv, TenantParams
from .cost_model import CostProfile, read_profile
from .distributions import DistributionError, parse_dist
from .engine import CacheConfig, EngineConfig
from .priority import PriorityParams
from .scheduler import Policy, SchedulerConfig
from .workload import PrefixTreeSpec, TraceConfig, TraceConfigError, WorkloadType


class ConfigError(ValueError):
    """Invalid or missing configuration; the message names section.key."""


_REQUIRED_WORKLOAD_KEYS = ("arrival_rate", "duration", "retrain_rate", "seed")


@dataclass
class RunConfig:
    trace: TraceConfig
    profile: CostProfile
    priority: PriorityParams
    scheduler: SchedulerConfig
    cache: CacheConfig
    tenants: dict[int, TenantParams]
    beta: float = 1.0
    loss_threshold: float = 0.3
    metrics_interval: float = 5.0
    scheduler_overhead_ms: float = 0.1
    instrument: bool = False
    log_decisions: bool = False
    render_timeline: bool = True
    out_dir: str = "runs"
    trace_file: str | None = None

    def canonical(self) -> dict:
        """Stable primitive representation; identical configs hash identically."""
        return {
            "workload": {
                "arrival_rate": self.trace.arrival_rate,
                "retrain_rate": self.trace.retrain_rate,
                "duration": self.trace.duration,
                "seed": self.trace.seed,
                "prompt_len_dist": self.trace.prompt_len_dist.to_string(),
                "output_len_dist": self.trace.output_len_dist.to_string(),
                "prefix_branching": self.trace.prefix_tree_spec.branching,
                "prefix_depth": self.trace.prefix_tree_spec.depth,
                "prefix_segment_dist": self.trace.prefix_tree_spec.segment_len.to_string(),
                "vocab_size": self.trace.vocab_size,
                "trace_file": self.trace_file,
            },
            "cost": {
                "prefill_lat_per_token": self.profile.prefill_lat_per_token,
                "prefill_mem_per_token": self.profile.prefill_mem_per_token,
                "decode_lat_per_step": self.profile.decode_lat_per_step,
                "decode_kv_mem_per_token": self.profile.decode_kv_mem_per_token,
                "ft_lat_per_sample_step": self.profile.ft_lat_per_sample_step,
                "ft_mem_fixed": self.profile.ft_mem_fixed,
                "ft_mem_per_token": self.profile.ft_mem_per_token,
                "iter_overhead": self.profile.iter_overhead,
                "capacity": self.profile.capacity,
                "weights_resident": self.profile.weights_resident,
                "batch_latency_discount": self.profile.batch_latency_discount,
            },
            "priority": {
                "base": {w.value: v for w, v in sorted(self.priority.base.items(), key=lambda kv: kv[0].value)},
                "growth": {w.value: v for w, v in sorted(self.priority.growth.items(), key=lambda kv: kv[0].value)},
                "gamma": self.priority.gamma,
            },
            "scheduler": {
                "policy": self.scheduler.policy.value,
                "tau_mem": self.scheduler.tau_mem,
                "tau_task": self.scheduler.tau_task,
                "lambda1": self.scheduler.lambda1,
                "lambda2": self.scheduler.lambda2,
                "periodic_interval": self.scheduler.periodic_interval,
                "max_decode_batch": self.scheduler.max_decode_batch,
                "max_ft_batch": self.scheduler.max_ft_batch,
                "max_decode_steps": self.scheduler.max_decode_steps,
                "max_ft_steps": self.scheduler.max_ft_steps,
                "ft_interference_ms": self.scheduler.ft_interference_ms,
            },
            "cache": {
                "num_heads": self.cache.num_heads,
                "norm_window": self.cache.norm_window,
                "prune_window": self.cache.prune_window,
                "c_total": self.cache.c_total,
                "weak_head_frac": self.cache.weak_head_frac,
                "weak_scale": self.cache.weak_scale,
                "norm_tau": self.cache.norm_tau,
                "prune_penalty": self.cache.prune_penalty,
            },
            "alignment": {
                "beta": self.beta,
                "loss_threshold": self.loss_threshold,
                "tenants": {
                    str(tid): {
                        "mu0": p.mu0,
                        "sigma": p.sigma,
                        "drift_rate": p.drift_rate,
                        "ft_gain": p.ft_gain,
                        "mu_max": p.mu_max,
                        "eval_pairs": p.eval_pairs,
                    }
                    for tid, p in sorted(self.tenants.items())
                },
            },
            "report": {
                "metrics_interval": self.metrics_interval,
                "scheduler_overhead_ms": self.scheduler_overhead_ms,
                "instrument": self.instrument,
            },
        }

    def run_id(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            seed=self.trace.seed,
            metrics_interval=self.metrics_interval,
            scheduler_overhead_ms=self.scheduler_overhead_ms,
            instrument=self.instrument,
            log_decisions=self.log_decisions,
        )

    def make_env(self) -> AlignmentEnv:
        return AlignmentEnv.create(
            self.tenants,
            seed=self.trace.seed,
            beta=self.beta,
            gamma=self.priority.gamma,
            loss_threshold=self.loss_threshold,
            prune_penalty=self.cache.prune_penalty,
        )


class _Section:
    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.name = name
        self.data = dict(cp[name]) if cp.has_section(name) else {}

    def require(self, key: str) -> str:
        if key not in self.data:
            raise ConfigError(f"missing required key {self.name}.{key}")
        return self.data[key]

    def get(self, key: str, default):
        return self.data.get(key, default)

    def getfloat(self, key: str, default: float | None = None) -> float:
        raw = self.require(key) if default is None else self.data.get(key)
        if raw is None:
            return float(default)  # type: ignore[arg-type]
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.name}.{key}: expected a number, got {raw!r}") from exc

    def getint(self, key: str, default: int | None = None) -> int:
        raw = self.require(key) if default is None else self.data.get(key)
        if raw is None:
            return int(default)  # type: ignore[arg-type]
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.name}.{key}: expected an integer, got {raw!r}") from exc

    def getbool(self, key: str, default: bool) -> bool:
        raw = self.data.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.name}.{key}: expected a boolean, got {raw!r}")


def load_config(path: str | Path, seed_override: int | None = None, policy_override: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep keys case-sensitive
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    wl = _Section(cp, "workload")
    for key in _REQUIRED_WORKLOAD_KEYS:
        wl.require(key)
    seed = seed_override if seed_override is not None else wl.getint("seed")

    n_tenants = wl.getint("tenants", 1)
    if n_tenants < 1:
        raise ConfigError("workload.tenants must be >= 1")

    al = _Section(cp, "alignment")
    default_tenant = TenantParams(
        mu0=al.getfloat("mu0", 0.5),
        sigma=al.getfloat("sigma", 1.0),
        drift_rate=al.getfloat("drift_rate", 0.01),
        ft_gain=al.getfloat("ft_gain", 0.25),
        mu_max=al.getfloat("mu_max", 2.0),
        eval_pairs=al.getint("eval_pairs", 32),
    )
    tenants: dict[int, TenantParams] = {}
    for tid in range(n_tenants):
        sec_name = f"tenant.{tid}"
        if cp.has_section(sec_name):
            ts = _Section(cp, sec_name)
            tenants[tid] = TenantParams(
                mu0=ts.getfloat("mu0", default_tenant.mu0),
                sigma=ts.getfloat("sigma", default_tenant.sigma),
                drift_rate=ts.getfloat("drift_rate", default_tenant.drift_rate),
                ft_gain=ts.getfloat("ft_gain", default_tenant.ft_gain),
                mu_max=ts.getfloat("mu_max", default_tenant.mu_max),
                eval_pairs=ts.getint("eval_pairs", default_tenant.eval_pairs),
            )
        else:
            tenants[tid] = TenantParams(**vars(default_tenant))

    try:
        trace_cfg = TraceConfig(
            arrival_rate=wl.getfloat("arrival_rate"),
            retrain_rate=wl.getfloat("retrain_rate"),
            duration=wl.getfloat("duration"),
            seed=seed,
            prompt_len_dist=parse_dist(wl.get("prompt_len_dist", "geometric:mean=256")),
            output_len_dist=parse_dist(wl.get("output_len_dist", "geometric:mean=128")),
            prefix_tree_spec=PrefixTreeSpec(
                branching=wl.getint("prefix_branching", 2),
                depth=wl.getint("prefix_depth", 3),
                segment_len=parse_dist(wl.get("prefix_segment_dist", "constant:value=32")),
            ),
            tenants=tuple(tenants[tid].drift_spec() for tid in range(n_tenants)),
            vocab_size=wl.getint("vocab_size", 50000),
        )
        trace_cfg.validate()
    except (DistributionError, TraceConfigError) as exc:
        raise ConfigError(f"workload: {exc}") from exc

    co = _Section(cp, "cost")
    if "profile_file" in co.data:
        base = read_profile(co.data["profile_file"])
    else:
        base = CostProfile()
    try:
        profile = CostProfile(
            prefill_lat_per_token=co.getfloat("prefill_lat_per_token", base.prefill_lat_per_token),
            prefill_mem_per_token=co.getfloat("prefill_mem_per_token", base.prefill_mem_per_token),
            decode_lat_per_step=co.getfloat("decode_lat_per_step", base.decode_lat_per_step),
            decode_kv_mem_per_token=co.getfloat("decode_kv_mem_per_token", base.decode_kv_mem_per_token),
            ft_lat_per_sample_step=co.getfloat("ft_lat_per_sample_step", base.ft_lat_per_sample_step),
            ft_mem_fixed=co.getfloat("ft_mem_fixed", base.ft_mem_fixed),
            ft_mem_per_token=co.getfloat("ft_mem_per_token", base.ft_mem_per_token),
            iter_overhead=co.getfloat("iter_overhead", base.iter_overhead),
            capacity=co.getfloat("capacity", base.capacity),
            weights_resident=co.getfloat("weights_resident", base.weights_resident),
            batch_latency_discount=co.getfloat("batch_latency_discount", base.batch_latency_discount),
        )
    except ValueError as exc:
        raise ConfigError(f"cost: {exc}") from exc

    pr = _Section(cp, "priority")
    priority = PriorityParams(
        base={
            WorkloadType.DECODE: pr.getfloat("base_decode", 3.0),
            WorkloadType.PREFILL: pr.getfloat("base_prefill", 2.0),
            WorkloadType.FINETUNE: pr.getfloat("base_finetune", 1.0),
        },
        growth={
            WorkloadType.FINETUNE: pr.getfloat("growth_finetune", 0.05),
            WorkloadType.PREFILL: pr.getfloat("growth_prefill", 0.02),
            WorkloadType.DECODE: pr.getfloat("growth_decode", 0.01),
        },
        gamma=pr.getfloat("gamma", 1.0),
    )
    try:
        priority.validate()
    except ValueError as exc:
        raise ConfigError(f"priority: {exc}") from exc

    sc = _Section(cp, "scheduler")
    policy_name = policy_override if policy_override is not None else sc.get("policy", "Hybrid")
    try:
        policy = Policy(policy_name)
    except ValueError:
        valid = ", ".join(p.value for p in Policy)
        raise ConfigError(f"scheduler.policy: unknown policy {policy_name!r} (expected one of {valid})") from None
    try:
        sched = SchedulerConfig(
            policy=policy,
            tau_mem=sc.getfloat("tau_mem", 0.9),
            tau_task=sc.getint("tau_task", 64),
            lambda1=sc.getfloat("lambda1", 1.0),
            lambda2=sc.getfloat("lambda2", 0.1),
            periodic_interval=sc.getfloat("periodic_interval", 20.0),
            max_decode_batch=sc.getint("max_decode_batch", 50),
            max_ft_batch=sc.getint("max_ft_batch", 4),
            max_decode_steps=sc.getint("max_decode_steps", 512),
            max_ft_steps=sc.getint("max_ft_steps", 8),
            ft_interference_ms=sc.getfloat("ft_interference_ms", 0.0),
        )
        sched.validate()
    except ValueError as exc:
        raise ConfigError(f"scheduler: {exc}") from exc

    ca = _Section(cp, "cache")
    norm_tau_raw = ca.get("norm_tau", "")
    try:
        cache = CacheConfig(
            num_heads=ca.getint("num_heads", 8),
            norm_window=ca.getint("norm_window", 64),
            prune_window=ca.getint("prune_window", 128),
            c_total=ca.getint("c_total", 160),
            weak_head_frac=ca.getfloat("weak_head_frac", 0.25),
            weak_scale=ca.getfloat("weak_scale", 0.1),
            norm_tau=float(norm_tau_raw) if norm_tau_raw != "" else None,
            prune_penalty=ca.getfloat("prune_penalty", 0.05),
        )
        cache.validate()
    except ValueError as exc:
        raise ConfigError(f"cache: {exc}") from exc

    rp = _Section(cp, "report")
    return RunConfig(
        trace=trace_cfg,
        profile=profile,
        priority=priority,
        scheduler=sched,
        cache=cache,
        tenants=tenants,
        beta=al.getfloat("beta", 1.0),
        loss_threshold=al.getfloat("loss_threshold", 0.3),
        metrics_interval=rp.getfloat("metrics_interval", 5.0),
        scheduler_overhead_ms=rp.getfloat("scheduler_overhead_ms", 0.1),
        instrument=rp.getbool("instrument", False),
        log_decisions=rp.getbool("log_decisions", False),
        render_timeline=rp.getbool("render_timeline", True),
        out_dir=rp.get("out_dir", "runs"),
        trace_file=wl.get("trace_file", None),
    )
