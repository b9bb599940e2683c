"""Discrete-event simulation loop and metrics recording.

One run owns its clock, queues, cache structures, and alignment environment.
Each tick packs one iteration under the policy in force, executes it against
the cost model (the slowest member defines the tick length), applies per-task
effects (prefill builds prefix-cache entries, decode grows and prunes KV,
fine-tune steps the drift environment), retires or requeues tasks, and
records a timeline entry. Everything is deterministic for a fixed
(config, seed) unless wall-clock instrumentation is explicitly enabled.

Memory invariant maintained every tick: resident weights + decode KV +
prefix-cache residency + executing bin memory never exceeds device capacity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentEnv
from .cache import HeadStats, PrefixTrie, TrieNode, allocate_capacity, dfs_order, prune_decision
from .cost_model import CostProfile, WorkloadEstimate, get_workload
from .priority import PriorityParams, PriorityQueue
from .scheduler import (
    BaselinePolicyState,
    BaselineQueues,
    Policy,
    SchedulerConfig,
    TickPlan,
    check_end,
    schedule_iteration,
)
from .workload import Request, WorkloadType


class SimulationContractError(RuntimeError):
    """An engine invariant was violated; the message names it."""


@dataclass(frozen=True)
class CacheConfig:
    num_heads: int = 8
    norm_window: int = 64
    prune_window: int = 128
    c_total: int = 160
    weak_head_frac: float = 0.25
    # weak-head signal must sit below the auto threshold (0.1 * mean initial
    # norm) or the norm-based prune clause can never fire
    weak_scale: float = 0.05
    norm_tau: float | None = None  # default: 0.1 * mean first-step norm
    prune_penalty: float = 0.05

    def validate(self) -> None:
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.c_total < self.num_heads:
            raise ValueError("c_total must be >= num_heads")
        if not (0.0 <= self.weak_head_frac <= 1.0):
            raise ValueError("weak_head_frac must be in [0, 1]")
        if self.norm_window < 1 or self.prune_window < 1:
            raise ValueError("norm_window and prune_window must be >= 1")


@dataclass(frozen=True)
class EngineConfig:
    seed: int = 0
    metrics_interval: float = 5.0
    scheduler_overhead_ms: float = 0.1
    instrument: bool = False
    log_decisions: bool = False
    max_ticks: int = 5_000_000


@dataclass
class OverheadProbe:
    decisions: int = 0
    total_decision_ms: float = 0.0
    max_metadata_bytes: int = 0
    bins_examined: int = 0

    @property
    def mean_decision_ms(self) -> float:
        return self.total_decision_ms / self.decisions if self.decisions else 0.0


@dataclass
class MetricsRecord:
    ttft_ms: dict[int, float] = field(default_factory=dict)
    tbt_ms: dict[int, list[float]] = field(default_factory=dict)
    ft_latency_ms: dict[int, float] = field(default_factory=dict)
    slo_deadline_ms: dict[int, float] = field(default_factory=dict)
    rejected_ids: list[int] = field(default_factory=list)
    total_iterations: int = 0
    makespan_s: float = 0.0
    decoded_tokens: int = 0
    utilization: float = 0.0
    fragmentation: float = 0.0
    avg_win_rate: float = 0.0
    avg_clpd: float = 0.0
    n_inference: int = 0
    n_ft: int = 0
    sharing_ratios: list[float] = field(default_factory=list)

    def sharing_histogram(self, bins: int = 10) -> dict:
        counts = [0] * bins
        for ratio in self.sharing_ratios:
            idx = min(bins - 1, int(ratio * bins))
            counts[idx] += 1
        mean = sum(self.sharing_ratios) / len(self.sharing_ratios) if self.sharing_ratios else 0.0
        return {"bins": bins, "counts": counts, "mean": mean}

    @property
    def throughput_tok_s(self) -> float:
        return self.decoded_tokens / self.makespan_s if self.makespan_s > 0 else 0.0

    @property
    def slo_attainment(self) -> float:
        """Fraction of inference requests whose TTFT met 5x their forward latency."""
        if self.n_inference == 0:
            return 1.0
        met = sum(
            1
            for rid, ttft in self.ttft_ms.items()
            if ttft <= self.slo_deadline_ms.get(rid, float("inf"))
        )
        return met / self.n_inference

    def latency_summary(self) -> dict[str, float]:
        def pct(values: list[float], q: float) -> float:
            return float(np.percentile(np.asarray(values, dtype=float), q)) if values else 0.0

        ttfts = sorted(self.ttft_ms.values())
        tbts = sorted(gap for gaps in self.tbt_ms.values() for gap in gaps)
        fts = sorted(self.ft_latency_ms.values())
        return {
            "ttft_p50": pct(ttfts, 50),
            "ttft_p99": pct(ttfts, 99),
            "tbt_p50": pct(tbts, 50),
            "tbt_p99": pct(tbts, 99),
            "ft_lat_p50": pct(fts, 50),
        }


@dataclass
class RunResult:
    metrics: MetricsRecord
    timeline: list[dict]
    alignment_series: list[tuple[float, float, float]]
    overhead: OverheadProbe | None = None


def utilization(ticks: list[dict]) -> float:
    """Time-weighted mean of used memory over capacity across executed ticks."""
    if not ticks:
        raise SimulationContractError("utilization over zero ticks")
    num = sum(t["used_mb"] * t["duration_ms"] for t in ticks)
    den = sum(t["capacity_mb"] * t["duration_ms"] for t in ticks)
    return num / den if den > 0 else 0.0


def fragmentation(ticks: list[dict]) -> float:
    """1 - utilization restricted to ticks where work was still waiting in queue."""
    contended = [t for t in ticks if t.get("queue_len", 0) > 0]
    if not contended:
        return 0.0
    return 1.0 - utilization(contended)


@dataclass
class _ReqState:
    first_token_ms: float | None = None
    last_token_ms: float | None = None
    resident_kv_mb: float = 0.0
    own_prompt_kv_mb: float = 0.0
    head_stats: HeadStats | None = None
    kept: list[int] = field(default_factory=list)
    leaf: TrieNode | None = None
    head_rng: np.random.Generator | None = None
    head_scales: list[float] | None = None
    retired: bool = False


class Engine:
    def __init__(
        self,
        trace: list[Request],
        profile: CostProfile,
        sched_cfg: SchedulerConfig,
        priority_params: PriorityParams,
        cache_cfg: CacheConfig,
        env: AlignmentEnv,
        engine_cfg: EngineConfig,
        metrics_horizon: float | None = None,
    ):
        sched_cfg.validate()
        priority_params.validate()
        cache_cfg.validate()
        for i in range(1, len(trace)):
            if trace[i].arrival_time < trace[i - 1].arrival_time:
                raise SimulationContractError("trace must be sorted by arrival time")
        self.trace = trace
        self.profile = profile
        self.cfg = sched_cfg
        self.policy = sched_cfg.policy
        self.cache_cfg = cache_cfg
        self.env = env
        self.ecfg = engine_cfg
        self.metrics_horizon = metrics_horizon if metrics_horizon is not None else (
            trace[-1].arrival_time if trace else 0.0
        )

        self.clock = 0.0
        self.tick_index = 0
        self.metrics = MetricsRecord()
        self.timeline: list[dict] = []
        self.overhead = OverheadProbe() if engine_cfg.instrument else None

        self.state: dict[int, _ReqState] = {}
        self.live: set[int] = set()
        self.admitted = 0
        self.retired = 0

        self.trie = PrefixTrie(profile.decode_kv_mem_per_token) if self.policy.prefix_sharing else None
        self.pruning = self.policy.pruning
        self.slots_created = 0
        self.slots_released = 0

        head_rng = np.random.default_rng([engine_cfg.seed, 199])
        n_weak = int(cache_cfg.weak_head_frac * cache_cfg.num_heads)
        self.weak_heads: set[int] = (
            {int(h) for h in head_rng.choice(cache_cfg.num_heads, size=n_weak, replace=False)}
            if n_weak
            else set()
        )

        if self.policy.uses_priority_packing:
            self.queue: PriorityQueue | None = PriorityQueue(priority_params, loss_fn=self._loss_of)
            self.baseline: BaselinePolicyState | None = None
            self.bqueues: BaselineQueues | None = None
        else:
            self.queue = None
            self.baseline = BaselinePolicyState(sched_cfg)
            self.bqueues = BaselineQueues()

        self._arrival_idx = 0
        self._next_sample = engine_cfg.metrics_interval
        self.alignment_series: list[tuple[float, float, float]] = []
        self._util_num = 0.0
        self._util_den = 0.0
        self._frag_num = 0.0
        self._frag_den = 0.0
        self._resident_kv_total = 0.0
        self._idle_jumps = 0

    # ---- small helpers --------------------------------------------------

    def _loss_of(self, req: Request) -> float:
        return self.env.pair_loss(req)

    def _estimate(self, req: Request) -> WorkloadEstimate:
        return get_workload(req, self.profile, self.trie)

    def _usable(self) -> float:
        return self.profile.usable_capacity

    def _budget(self) -> float:
        trie_mb = self.trie.residency_mb if self.trie is not None else 0.0
        return self._usable() - self._resident_kv_total - trie_mb

    def _queue_len(self) -> int:
        if self.queue is not None:
            return len(self.queue)
        assert self.bqueues is not None
        return len(self.bqueues)

    def _admit(self) -> None:
        while self._arrival_idx < len(self.trace) and self.trace[self._arrival_idx].arrival_time <= self.clock:
            req = self.trace[self._arrival_idx]
            self._arrival_idx += 1
            self.admitted += 1
            rs = _ReqState()
            self.state[req.id] = rs
            if req.workload is WorkloadType.FINETUNE:
                self.metrics.n_ft += 1
                if self.policy is Policy.NO_RETRAIN:
                    # retraining disabled: the job retires untouched
                    rs.retired = True
                    self.retired += 1
                    continue
            else:
                self.metrics.n_inference += 1
                self.metrics.slo_deadline_ms[req.id] = (
                    5.0 * self.profile.prefill_lat_per_token * len(req.prompt_tokens)
                )
                if self.trie is not None:
                    rs.leaf = self.trie.insert(req.prompt_tokens, self.clock).leaf
            self.live.add(req.id)
            if self.queue is not None:
                self.queue.push(req, self.clock)
            else:
                assert self.bqueues is not None
                if req.workload is WorkloadType.FINETUNE:
                    self.bqueues.ft.append(req)
                else:
                    self.bqueues.inference.append(req)

    def _next_arrival(self) -> float:
        if self._arrival_idx < len(self.trace):
            return self.trace[self._arrival_idx].arrival_time
        return float("inf")

    def _next_event(self) -> float:
        t_next = self._next_arrival()
        if self.baseline is not None and self.bqueues is not None:
            t_next = min(t_next, self.baseline.next_event_time(self.bqueues, self.clock))
        return t_next

    # ---- alignment sampling ---------------------------------------------

    def _sample_point(self, t: float) -> None:
        self.env.prune_aggressiveness = (
            self.slots_released / self.slots_created if self.slots_created else 0.0
        )
        rates: list[float] = []
        margins: list[float] = []
        for tid in self.env.tenants:
            w, c = self.env.eval_metrics(tid, t)
            rates.append(w)
            margins.append(c)
            self.timeline.append(
                {"kind": "alignment_sample", "t": t, "tenant": tid, "win_rate": w, "clpd": c}
            )
        self.alignment_series.append((t, sum(rates) / len(rates), sum(margins) / len(margins)))

    def _sample_due(self) -> None:
        """Record grid samples now due; mid-tick points carry end-of-tick state."""
        while self._next_sample <= self.clock + 1e-12:
            self._sample_point(self._next_sample)
            self._next_sample += self.ecfg.metrics_interval

    def _advance_idle(self, target: float) -> None:
        if target < self.clock - 1e-12:
            raise SimulationContractError("idle advance must move the clock forward")
        while self._next_sample <= target + 1e-12:
            step = self._next_sample - self.clock
            if step > 0:
                self.env.advance_all(step)
                self.clock = self._next_sample
            self._sample_point(self._next_sample)
            self._next_sample += self.ecfg.metrics_interval
        if target > self.clock:
            self.env.advance_all(target - self.clock)
            self.clock = target

    # ---- cache pressure ---------------------------------------------------

    def _evict_for(self, bytes_needed: float) -> float:
        if self.trie is None or bytes_needed <= 0:
            return 0.0
        result = self.trie.lru_offload(bytes_needed, self.clock)
        if result.evicted:
            self.timeline.append(
                {
                    "kind": "cache_event",
                    "t": self.clock,
                    "event": "evict",
                    "bytes_mb": -result.freed_mb,
                    "nodes": len(result.evicted),
                }
            )
        return result.freed_mb

    def _maybe_evict_for_head(self) -> None:
        """Free prefix cache when the most urgent pending task cannot fit the budget."""
        head: Request | None = None
        if self.queue is not None and self.queue:
            head = self.queue.peek()
        elif self.bqueues is not None:
            if self.bqueues.ft:
                head = self.bqueues.ft[0]
            elif self.bqueues.inference:
                head = self.bqueues.inference[0]
        if head is None:
            return
        shortfall = self._estimate(head).mem - self._budget()
        if shortfall > 0:
            self._evict_for(shortfall)

    # ---- planning ----------------------------------------------------------

    def _plan(self) -> TickPlan:
        budget = self._budget()
        hard = self._usable()
        t0 = time.perf_counter() if self.overhead is not None else 0.0
        if self.queue is not None:
            self.queue.refresh(self.clock)
            plan = schedule_iteration(self.queue, budget, self.cfg, self._estimate, self.clock, hard_limit=hard)
        else:
            assert self.baseline is not None and self.bqueues is not None
            plan = self.baseline.plan_tick(self.bqueues, self.clock, self._estimate, budget, hard)
        if self.overhead is not None:
            self.overhead.total_decision_ms += (time.perf_counter() - t0) * 1000.0
            self.overhead.decisions += 1
            self.overhead.bins_examined += plan.bins_examined
            self.overhead.max_metadata_bytes = max(self.overhead.max_metadata_bytes, self._metadata_bytes())
        if self.ecfg.log_decisions and plan.dequeued:
            self.timeline.append(
                {
                    "kind": "decision",
                    "tick": self.tick_index,
                    "t": self.clock,
                    "dequeued": [r.id for r in plan.dequeued],
                    "scheduled": [r.id for r in plan.bin.tasks],
                }
            )
        return plan

    def _metadata_bytes(self) -> int:
        per_entry = 96  # heap tuple plus references
        total = per_entry * (self._queue_len() + len(self.live))
        if self.trie is not None:
            total += 160 * self.trie.node_count()
        for rid in self.live:
            rs = self.state[rid]
            if rs.head_stats is not None:
                total += 24 * rs.head_stats.num_heads * (rs.head_stats.window + 3)
        return total

    # ---- execution ----------------------------------------------------------

    def _synth_norms(self, req: Request, rs: _ReqState) -> list[float]:
        if rs.head_rng is None:
            rs.head_rng = np.random.default_rng([self.ecfg.seed, 211, req.id])
            rs.head_scales = [
                self.cache_cfg.weak_scale if h in self.weak_heads else 1.0
                for h in range(self.cache_cfg.num_heads)
            ]
        jitter = rs.head_rng.normal(1.0, 0.1, size=self.cache_cfg.num_heads)
        assert rs.head_scales is not None
        return [max(0.0, s * float(j)) for s, j in zip(rs.head_scales, jitter)]

    def _exec_prefill(self, req: Request) -> tuple[float, float]:
        """Run the prompt pass; returns (actual latency ms, actual memory MB)."""
        rs = self.state[req.id]
        prompt = req.prompt_tokens
        if self.trie is not None and rs.leaf is not None:
            shared = self.trie.cached_prefix_len(prompt)
            effective = len(prompt) - shared
            self.metrics.sharing_ratios.append(shared / len(prompt))
            if shared:
                self.timeline.append(
                    {
                        "kind": "cache_event",
                        "t": self.clock,
                        "event": "share",
                        "req_id": req.id,
                        "tokens": shared,
                        "bytes_mb": shared * self.profile.decode_kv_mem_per_token,
                    }
                )
            added = self.trie.mark_executed(rs.leaf, self.clock)
            if added:
                self.timeline.append(
                    {"kind": "cache_event", "t": self.clock, "event": "insert", "req_id": req.id, "bytes_mb": added}
                )
        else:
            effective = len(prompt)
            rs.own_prompt_kv_mb = len(prompt) * self.profile.decode_kv_mem_per_token
            self._resident_kv_total += rs.own_prompt_kv_mb
        lat = self.profile.prefill_lat_per_token * effective
        mem = (self.profile.prefill_mem_per_token + self.profile.decode_kv_mem_per_token) * effective
        req.workload = WorkloadType.DECODE
        if self.pruning:
            rs.head_stats = HeadStats(
                self.cache_cfg.num_heads, self.cache_cfg.norm_window, tau=self.cache_cfg.norm_tau
            )
            rs.kept = [0] * self.cache_cfg.num_heads
        return lat, mem

    def _exec_decode(self, req: Request, t_end_ms: float) -> None:
        rs = self.state[req.id]
        req.decode_pos += 1
        self.metrics.decoded_tokens += 1
        if rs.first_token_ms is None:
            rs.first_token_ms = t_end_ms
            self.metrics.ttft_ms[req.id] = t_end_ms - req.arrival_time * 1000.0
            self.metrics.tbt_ms[req.id] = []
        else:
            assert rs.last_token_ms is not None
            self.metrics.tbt_ms[req.id].append(t_end_ms - rs.last_token_ms)
        rs.last_token_ms = t_end_ms
        kv = self.profile.decode_kv_mem_per_token
        heads = self.cache_cfg.num_heads
        if self.pruning and rs.head_stats is not None:
            per_head = kv / heads
            step = req.decode_pos
            for h in range(heads):
                rs.kept[h] += 1
            self.slots_created += heads
            rs.head_stats.update(self._synth_norms(req, rs), step)
            caps = allocate_capacity(rs.head_stats, self.cache_cfg.c_total)
            tau = rs.head_stats.tau or 0.0
            released = 0
            for h in range(heads):
                if rs.kept[h] > caps[h] and prune_decision(
                    step, h, rs.head_stats, self.cache_cfg.prune_window, tau
                ):
                    released += rs.kept[h] - caps[h]
                    rs.kept[h] = caps[h]
            grown = per_head * heads
            rs.resident_kv_mb += grown
            self._resident_kv_total += grown
            if released:
                self.slots_released += released
                freed = released * per_head
                rs.resident_kv_mb -= freed
                self._resident_kv_total -= freed
                self.timeline.append(
                    {
                        "kind": "cache_event",
                        "t": self.clock,
                        "event": "prune",
                        "req_id": req.id,
                        "bytes_mb": -freed,
                        "slots": released,
                    }
                )
        else:
            rs.resident_kv_mb += kv
            self._resident_kv_total += kv

    def _exec_ft(self, req: Request) -> None:
        req.ft_steps_done += 1
        self.env.ft_step(req)

    def _retire(self, req: Request, t_end_ms: float, rejected: bool = False) -> None:
        rs = self.state[req.id]
        if rs.retired:
            raise SimulationContractError(f"request {req.id} retired twice")
        rs.retired = True
        self.live.discard(req.id)
        self.retired += 1
        self._resident_kv_total -= rs.resident_kv_mb + rs.own_prompt_kv_mb
        rs.resident_kv_mb = 0.0
        rs.own_prompt_kv_mb = 0.0
        if rs.leaf is not None and self.trie is not None:
            self.trie.release(rs.leaf)
            rs.leaf = None
        if rejected:
            self.metrics.rejected_ids.append(req.id)
            self.timeline.append(
                {"kind": "reject", "t": self.clock, "req_id": req.id, "workload": req.workload.value}
            )
        elif req.workload is WorkloadType.FINETUNE:
            self.metrics.ft_latency_ms[req.id] = t_end_ms - req.arrival_time * 1000.0
        if self.baseline is not None:
            self.baseline.finish(req)

    def _route_back(self, req: Request, continued_ft: list[Request]) -> None:
        """Return an unfinished or deferred task to its pending structure."""
        if self.queue is not None:
            self.queue.push(req, self.clock)
            return
        assert self.bqueues is not None
        if req.workload is WorkloadType.FINETUNE:
            continued_ft.append(req)
        elif self.baseline is None or all(member.id != req.id for member in self.baseline.batch):
            self.bqueues.inference.appendleft(req)  # deferred refill candidate
        # inference batch members simply stay resident in the batch

    def _execute(self, plan: TickPlan) -> None:
        bin_ = plan.bin
        kv_before = self._resident_kv_total
        trie_before = self.trie.residency_mb if self.trie is not None else 0.0

        prefills = [r for r in bin_.tasks if r.workload is WorkloadType.PREFILL]
        decodes = sorted((r for r in bin_.tasks if r.workload is WorkloadType.DECODE), key=lambda r: r.id)
        fts = sorted((r for r in bin_.tasks if r.workload is WorkloadType.FINETUNE), key=lambda r: r.id)
        if self.trie is not None and len(prefills) > 1:
            pending = [(r, self.state[r.id].leaf) for r in prefills]
            if all(leaf is not None for _, leaf in pending):
                prefills = dfs_order(self.trie, pending)  # type: ignore[arg-type]

        max_lat = 0.0
        actual_mem = 0.0
        for req in prefills:
            lat, mem = self._exec_prefill(req)
            max_lat = max(max_lat, lat)
            actual_mem += mem
        if decodes:
            max_lat = max(max_lat, self.profile.decode_lat_per_step)
            actual_mem += self.profile.decode_kv_mem_per_token * len(decodes)
        ft_mem = 0.0
        for req in fts:
            est = self._estimate(req)
            max_lat = max(max_lat, est.lat)
            ft_mem += est.mem
        actual_mem += ft_mem

        overhead_ms = self.ecfg.scheduler_overhead_ms
        if self.overhead is not None and self.overhead.decisions:
            overhead_ms = self.overhead.mean_decision_ms
        duration_ms = max(
            self.profile.bin_latency(max_lat, len(bin_.tasks))
            + self.profile.iter_overhead
            + overhead_ms
            + self.cfg.ft_interference_ms * len(fts),
            1e-6,
        )
        t_end = self.clock + duration_ms / 1000.0
        t_end_ms = t_end * 1000.0

        used_mb = self.profile.weights_resident + kv_before + trie_before + actual_mem
        if used_mb > self.profile.capacity + 1e-6:
            raise SimulationContractError(
                f"tick {self.tick_index}: used memory {used_mb:.1f} MB exceeds capacity "
                f"{self.profile.capacity:.1f} MB"
            )

        # drift over the tick, then task effects that land at tick end
        self.env.advance_all(duration_ms / 1000.0)
        for req in decodes:
            self._exec_decode(req, t_end_ms)
        for req in fts:
            self._exec_ft(req)

        finished: list[Request] = []
        continuing: list[Request] = []
        for req in bin_.tasks:
            (finished if check_end(req, self.env, self.cfg) else continuing).append(req)

        queue_after = self._queue_len() + len(plan.requeued)
        self.timeline.append(
            {
                "kind": "tick",
                "tick": self.tick_index,
                "t_start": self.clock,
                "duration_ms": duration_ms,
                "tasks": [r.id for r in bin_.tasks],
                "n_prefill": len(prefills),
                "n_decode": len(decodes),
                "n_ft": len(fts),
                "bin_mem_mb": actual_mem,
                "bin_free_mb": bin_.free_memory,
                "max_latency_ms": max_lat,
                "used_mb": used_mb,
                "capacity_mb": self.profile.capacity,
                "queue_len": queue_after,
                "resident_kv_mb": kv_before,
                "trie_mb": trie_before,
            }
        )
        self._util_num += used_mb * duration_ms
        self._util_den += self.profile.capacity * duration_ms
        if queue_after > 0:
            self._frag_num += used_mb * duration_ms
            self._frag_den += self.profile.capacity * duration_ms

        self.clock = t_end
        self.tick_index += 1
        self.metrics.total_iterations += 1

        continued_ft: list[Request] = []
        for req in finished:
            self._retire(req, t_end_ms)
        for req in continuing:
            self._route_back(req, continued_ft)
        for req in plan.requeued:
            self._route_back(req, continued_ft)
        if self.bqueues is not None and continued_ft:
            for req in reversed(continued_ft):
                self.bqueues.ft.appendleft(req)

        self._sample_due()

    # ---- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        stall_guard = 0
        while True:
            self._admit()
            if not self.live and self._arrival_idx >= len(self.trace):
                break
            if self.tick_index + self._idle_jumps > self.ecfg.max_ticks:
                raise SimulationContractError("max tick budget exceeded; simulation diverged")

            if self._queue_len() == 0 and not self._batch_pending():
                t_next = self._next_event()
                if t_next == float("inf"):
                    raise SimulationContractError("no schedulable work and no future events")
                self._advance_idle(max(t_next, self.clock))
                self._idle_jumps += 1
                continue

            self._maybe_evict_for_head()
            plan = self._plan()

            if not plan.bin.tasks:
                rejected_ids = {r.id for r in plan.rejected}
                for req in plan.rejected:
                    self._retire(req, self.clock * 1000.0, rejected=True)
                continued_ft: list[Request] = []
                for req in plan.requeued:
                    if req.id not in rejected_ids:
                        self._route_back(req, continued_ft)
                if self.bqueues is not None and continued_ft:
                    for req in reversed(continued_ft):
                        self.bqueues.ft.appendleft(req)
                if plan.rejected:
                    continue
                t_next = self._next_event()
                if self.clock < t_next < float("inf"):
                    self._advance_idle(t_next)
                    self._idle_jumps += 1
                    continue
                # genuinely stuck: shed the most urgent task to restore progress
                stall_guard += 1
                victim = self._pop_head()
                if victim is None:
                    raise SimulationContractError("empty plan with nonempty queue but no head task")
                self._retire(victim, self.clock * 1000.0, rejected=True)
                if stall_guard > len(self.trace) + 16:
                    raise SimulationContractError("stall guard exhausted; scheduler cannot progress")
                continue

            stall_guard = 0
            self._check_conservation(plan)
            for req in plan.rejected:
                self._retire(req, self.clock * 1000.0, rejected=True)
            self._execute(plan)

        self.metrics.makespan_s = self.clock
        # extend drift-only sampling through the configured horizon
        if self.clock < self.metrics_horizon:
            self._advance_idle(self.metrics_horizon)

        if self.admitted != self.retired:
            raise SimulationContractError(
                f"conservation violated: admitted {self.admitted} != retired {self.retired}"
            )
        self.metrics.utilization = self._util_num / self._util_den if self._util_den else 0.0
        self.metrics.fragmentation = 1.0 - (self._frag_num / self._frag_den) if self._frag_den else 0.0
        horizon = [s for s in self.alignment_series if s[0] <= self.metrics_horizon + 1e-9]
        if horizon:
            self.metrics.avg_win_rate = sum(s[1] for s in horizon) / len(horizon)
            self.metrics.avg_clpd = sum(s[2] for s in horizon) / len(horizon)
        return RunResult(
            metrics=self.metrics,
            timeline=self.timeline,
            alignment_series=self.alignment_series,
            overhead=self.overhead,
        )

    def _batch_pending(self) -> bool:
        return self.baseline is not None and bool(self.baseline.batch)

    def _pop_head(self) -> Request | None:
        if self.queue is not None and self.queue:
            return self.queue.pop()
        if self.bqueues is not None:
            if self.bqueues.ft:
                return self.bqueues.ft.popleft()
            if self.bqueues.inference:
                return self.bqueues.inference.popleft()
            if self.baseline is not None and self.baseline.batch:
                return self.baseline.batch[0]
        return None

    def _check_conservation(self, plan: TickPlan) -> None:
        if self.queue is None:
            return  # baseline queues move tasks by reference; global accounting covers them
        routed = (
            {r.id for r in plan.bin.tasks}
            | {r.id for r in plan.requeued}
            | {r.id for r in plan.rejected}
        )
        dequeued = {r.id for r in plan.dequeued}
        total = len(plan.bin.tasks) + len(plan.requeued) + len(plan.rejected)
        if routed != dequeued or total != len(plan.dequeued):
            raise SimulationContractError(
                f"tick {self.tick_index}: task conservation violated "
                f"(dequeued {sorted(dequeued)}, routed {sorted(routed)})"
            )


def run_simulation(
    trace: list[Request],
    profile: CostProfile,
    sched_cfg: SchedulerConfig,
    priority_params: PriorityParams,
    cache_cfg: CacheConfig,
    env: AlignmentEnv,
    engine_cfg: EngineConfig,
    metrics_horizon: float | None = None,
) -> RunResult:
    return Engine(
        trace, profile, sched_cfg, priority_params, cache_cfg, env, engine_cfg, metrics_horizon
    ).run()
