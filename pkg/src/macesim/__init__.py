"""Trace-driven simulator of a single memory-constrained accelerator that
colocates LLM inference (prefill, decode) with continuous preference-alignment
fine-tuning, under priority-aged best-fit iteration packing with prefix-cache
reuse and KV pruning, plus periodic/synchronous baselines."""

from .alignment import AlignmentEnv, MarginSample, TenantParams, clpd, dpo_loss, win_rate
from .cache import HeadStats, PrefixTrie, allocate_capacity, dfs_order, prune_decision
from .cost_model import CostProfile, WorkloadEstimate, calibrate, get_workload
from .engine import CacheConfig, Engine, EngineConfig, RunResult, run_simulation
from .priority import PriorityParams, PriorityQueue, dynamic_priority, ft_total_priority
from .scheduler import (
    Bin,
    Policy,
    SchedulerConfig,
    check_end,
    continuous_batch,
    fragmentation_score,
    schedule_iteration,
)
from .workload import (
    PreferencePair,
    Request,
    TraceConfig,
    WorkloadType,
    generate_trace,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
