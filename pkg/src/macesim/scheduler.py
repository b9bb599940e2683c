"""Iteration-level scheduling: best-fit bin packing, baselines, and ablations.

The hybrid path packs one iteration per tick: tasks are dequeued in priority
order, each placed into the feasible bin minimising the fragmentation score,
until the first bin is full enough or the dequeue budget is spent. Only the
first bin executes; everything routed to speculative later bins is pushed
back with refreshed priority. The periodic and synchronous baselines run
plain FIFO continuous batching with their respective retraining rules, and
the ablation variants disable one mechanism each.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .alignment import AlignmentEnv
from .cost_model import WorkloadEstimate
from .priority import PriorityQueue
from .workload import Request, WorkloadType


class SchedulerConfigError(ValueError):
    pass


class Policy(Enum):
    HYBRID = "Hybrid"
    PERIODIC = "Periodic"
    SYNC = "Sync"
    HYBRID_NO_BIN = "HybridNoBin"
    HYBRID_NO_PREFIX = "HybridNoPrefix"
    HYBRID_NO_PRUNE = "HybridNoPrune"
    NO_RETRAIN = "NoRetrain"

    @property
    def uses_priority_packing(self) -> bool:
        return self in (Policy.HYBRID, Policy.HYBRID_NO_PREFIX, Policy.HYBRID_NO_PRUNE)

    @property
    def prefix_sharing(self) -> bool:
        return self in (Policy.HYBRID, Policy.HYBRID_NO_BIN, Policy.HYBRID_NO_PRUNE)

    @property
    def pruning(self) -> bool:
        return self in (Policy.HYBRID, Policy.HYBRID_NO_BIN, Policy.HYBRID_NO_PREFIX)


@dataclass(frozen=True)
class SchedulerConfig:
    policy: Policy = Policy.HYBRID
    tau_mem: float = 0.9
    tau_task: int = 64
    lambda1: float = 1.0
    lambda2: float = 0.1
    periodic_interval: float = 20.0
    max_decode_batch: int = 50
    max_ft_batch: int = 4
    max_decode_steps: int = 512
    max_ft_steps: int = 8
    ft_interference_ms: float = 0.0

    def validate(self) -> None:
        if not (0.0 < self.tau_mem <= 1.0):
            raise SchedulerConfigError("tau_mem must be in (0, 1]")
        if self.tau_task < 1:
            raise SchedulerConfigError("tau_task must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise SchedulerConfigError("lambda1 and lambda2 must be >= 0")
        if self.max_decode_batch < 1 or self.max_ft_batch < 1:
            raise SchedulerConfigError("batch caps must be >= 1")
        if self.max_decode_steps < 1 or self.max_ft_steps < 1:
            raise SchedulerConfigError("step caps must be >= 1")
        if self.policy is Policy.PERIODIC and self.periodic_interval <= 0:
            raise SchedulerConfigError("periodic_interval must be > 0")


@dataclass
class Bin:
    capacity_budget: float
    tasks: list[Request] = field(default_factory=list)
    estimates: list[WorkloadEstimate] = field(default_factory=list)
    used_memory: float = 0.0
    max_latency: float = 0.0
    n_inference: int = 0
    n_ft: int = 0

    @property
    def free_memory(self) -> float:
        return self.capacity_budget - self.used_memory

    def fits(self, task: Request, est: WorkloadEstimate, cfg: SchedulerConfig) -> bool:
        if self.free_memory < est.mem:
            return False
        if task.workload is WorkloadType.FINETUNE:
            return self.n_ft < cfg.max_ft_batch
        return self.n_inference < cfg.max_decode_batch

    def add(self, task: Request, est: WorkloadEstimate) -> None:
        self.tasks.append(task)
        self.estimates.append(est)
        self.used_memory += est.mem
        self.max_latency = max(self.max_latency, est.lat)
        if task.workload is WorkloadType.FINETUNE:
            self.n_ft += 1
        else:
            self.n_inference += 1

    def __len__(self) -> int:
        return len(self.tasks)


def fragmentation_score(bin_: Bin, est: WorkloadEstimate, lambda1: float, lambda2: float) -> float:
    """Joint memory/latency misfit of placing a task into a feasible bin."""
    return lambda1 * abs(bin_.free_memory - est.mem) + lambda2 * abs(bin_.max_latency - est.lat)


Estimator = Callable[[Request], WorkloadEstimate]


@dataclass
class TickPlan:
    bin: Bin
    requeued: list[Request] = field(default_factory=list)
    rejected: list[Request] = field(default_factory=list)
    dequeued: list[Request] = field(default_factory=list)
    bins_opened: int = 0
    bins_examined: int = 0


def schedule_iteration(
    queue: PriorityQueue,
    capacity_budget: float,
    cfg: SchedulerConfig,
    estimator: Estimator,
    t: float,
    hard_limit: float | None = None,
) -> TickPlan:
    """Pack one iteration from a refreshed priority queue.

    Dequeues stop once the first bin reaches ``tau_mem`` of the budget or
    ``tau_task`` tasks have been drawn. Each task goes to the feasible bin
    with the lowest fragmentation score, else opens a new bin. Tasks landing
    in bins after the first are requeued; a task that cannot fit even an
    empty bin is deferred (requeued) when the squeeze is transient residency,
    or rejected outright when it exceeds ``hard_limit``.
    """
    if hard_limit is None:
        hard_limit = capacity_budget
    bins: list[Bin] = []
    plan = TickPlan(bin=Bin(capacity_budget))
    deferred: list[Request] = []
    count = 0
    while queue:
        if bins and (bins[0].used_memory >= cfg.tau_mem * capacity_budget or count >= cfg.tau_task):
            break
        task = queue.pop()
        count += 1
        plan.dequeued.append(task)
        est = estimator(task)
        if est.mem > hard_limit:
            plan.rejected.append(task)
            continue
        if est.mem > capacity_budget:
            deferred.append(task)
            continue
        best: Bin | None = None
        best_score = float("inf")
        for candidate in bins:
            plan.bins_examined += 1
            if candidate.fits(task, est, cfg):
                score = fragmentation_score(candidate, est, cfg.lambda1, cfg.lambda2)
                if score < best_score:
                    best_score = score
                    best = candidate
        if best is None:
            best = Bin(capacity_budget)
            bins.append(best)
            plan.bins_opened += 1
        best.add(task, est)
    if bins:
        plan.bin = bins[0]
        for later in bins[1:]:
            plan.requeued.extend(later.tasks)
    plan.requeued.extend(deferred)
    return plan


def check_end(task: Request, env: AlignmentEnv, cfg: SchedulerConfig) -> bool:
    """Decide retirement after one executed iteration of ``task``.

    Decode ends at the hidden target length or the step cap; fine-tune ends
    once its pair loss is at or below the threshold or the step cap is hit;
    prefill never ends here (it transitions to the decode phase instead).
    """
    if task.workload is WorkloadType.DECODE:
        return task.decode_pos >= task.target_output_len or task.decode_pos >= cfg.max_decode_steps
    if task.workload is WorkloadType.FINETUNE:
        if task.ft_steps_done >= cfg.max_ft_steps:
            return True
        return env.pair_loss(task) <= env.loss_threshold
    return False


def requires_backward(req: Request) -> bool:
    return req.workload is WorkloadType.FINETUNE


def continuous_batch(
    queue: Sequence[Request],
    capacity: int,
    max_wait: float,
    t: float,
    batch: Sequence[Request] = (),
    batch_start: float | None = None,
) -> tuple[list[Request], list[Request]]:
    """One refill pass of plain continuous batching; returns (batch, remaining).

    Accumulation stops at the batch cap, at a head-of-queue request needing a
    backward pass, or once the batch has waited past ``max_wait``. Finished
    requests are filtered by the caller after execution.
    """
    if capacity < 1:
        raise SchedulerConfigError("batch capacity must be >= 1")
    if max_wait < 0:
        raise SchedulerConfigError("max_wait must be >= 0")
    start = t if (batch_start is None or not batch) else batch_start
    out = list(batch)
    remaining = list(queue)
    while remaining and len(out) < capacity:
        head = remaining[0]
        if requires_backward(head) or not (start + max_wait > t):
            break
        out.append(remaining.pop(0))
    return out, remaining


@dataclass
class BaselineQueues:
    """Arrival-ordered pending work for the FIFO policies."""

    inference: deque[Request] = field(default_factory=deque)
    ft: deque[Request] = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.inference) + len(self.ft)


class BaselinePolicyState:
    """Tick planner for the Periodic, Sync, fixed-batch, and no-retrain baselines.

    Keeps the persistent inference batch of the continuous-batching loop.
    Periodic opens a retraining window at every interval boundary and drains
    fine-tune work exclusively until the backlog is empty, while inference
    queues up. Sync runs any pending fine-tune ahead of all inference. The
    fixed-batch variant serves one FIFO stream in which a fine-tune at the
    head blocks inference refill until the running batch drains.
    """

    def __init__(self, cfg: SchedulerConfig):
        cfg.validate()
        self.cfg = cfg
        self.batch: list[Request] = []
        self.batch_start = 0.0
        self.next_window = cfg.periodic_interval
        self.in_window = False

    def _ft_bin(self, queues: BaselineQueues, estimator: Estimator, budget: float, hard: float, plan: TickPlan) -> None:
        taken: list[Request] = []
        while queues.ft and len(taken) < self.cfg.max_ft_batch:
            task = queues.ft[0]
            est = estimator(task)
            if est.mem > hard:
                queues.ft.popleft()
                plan.rejected.append(task)
                plan.dequeued.append(task)
                continue
            if not plan.bin.fits(task, est, self.cfg):
                break
            queues.ft.popleft()
            plan.bin.add(task, est)
            plan.dequeued.append(task)
            taken.append(task)

    def _refill_inference(self, queues: BaselineQueues, t: float, estimator: Estimator, hard: float, plan: TickPlan, block_on_ft: deque[Request] | None = None) -> None:
        if not self.batch:
            self.batch_start = t
        while queues.inference and len(self.batch) < self.cfg.max_decode_batch:
            if block_on_ft is not None and block_on_ft and _arrived_before(block_on_ft[0], queues.inference[0]):
                break  # a backward-pass request is ahead in the FIFO stream
            head = queues.inference[0]
            est = estimator(head)
            if est.mem > hard:
                queues.inference.popleft()
                plan.rejected.append(head)
                plan.dequeued.append(head)
                continue
            if plan.bin.free_memory < est.mem:
                break
            queues.inference.popleft()
            self.batch.append(head)
            plan.bin.add(head, est)
            plan.dequeued.append(head)

    def plan_tick(
        self,
        queues: BaselineQueues,
        t: float,
        estimator: Estimator,
        capacity_budget: float,
        hard_limit: float,
    ) -> TickPlan:
        plan = TickPlan(bin=Bin(capacity_budget))
        cfg = self.cfg
        policy = cfg.policy

        if policy is Policy.PERIODIC:
            if not self.in_window and t >= self._eligible_window(queues) - 1e-9:
                self.in_window = True
            if self.in_window and not queues.ft:
                self.in_window = False
                self.next_window = _next_multiple(cfg.periodic_interval, t)
            if self.in_window:
                self._ft_bin(queues, estimator, capacity_budget, hard_limit, plan)
                return plan
        elif policy is Policy.SYNC:
            if queues.ft:
                self._ft_bin(queues, estimator, capacity_budget, hard_limit, plan)
                return plan
        elif policy is Policy.HYBRID_NO_BIN:
            if not self.batch and queues.ft and (not queues.inference or _arrived_before(queues.ft[0], queues.inference[0])):
                self._ft_bin(queues, estimator, capacity_budget, hard_limit, plan)
                return plan

        # inference continuous batching: existing members step, then refill
        for member in self.batch:
            est = estimator(member)
            if plan.bin.free_memory >= est.mem:
                plan.bin.add(member, est)
        block = queues.ft if policy is Policy.HYBRID_NO_BIN else None
        self._refill_inference(queues, t, estimator, hard_limit, plan, block_on_ft=block)
        return plan

    def finish(self, req: Request) -> None:
        for i, member in enumerate(self.batch):
            if member.id == req.id:
                del self.batch[i]
                return

    def _eligible_window(self, queues: BaselineQueues) -> float:
        """First interval boundary at which the pending retraining backlog may run.

        A boundary only serves fine-tune work already pending at that instant,
        so a job arriving after an unused boundary waits for the next one.
        """
        if not queues.ft:
            return float("inf")
        earliest = min(r.arrival_time for r in queues.ft)
        interval = self.cfg.periodic_interval
        k = int(earliest / interval)
        boundary = k * interval
        if boundary < earliest - 1e-12:
            boundary = (k + 1) * interval
        return max(self.next_window, boundary)

    def next_event_time(self, queues: BaselineQueues, t: float) -> float:
        if self.cfg.policy is Policy.PERIODIC and queues.ft and not self.in_window:
            return max(self._eligible_window(queues), t)
        return float("inf")


def _next_multiple(interval: float, t: float) -> float:
    k = int(t / interval) + 1
    return k * interval


def _arrived_before(a: Request, b: Request) -> bool:
    return (a.arrival_time, a.id) < (b.arrival_time, b.id)
