"""Dynamic workload-type priorities with temporal aging and the shared queue.

Base priorities favour inference (decode > prefill > fine-tune) while growth
rates favour retraining (fine-tune ages fastest), so fine-tune jobs cannot
starve: past a closed-form crossover age they outrank any later-arriving
inference request. Fine-tune priorities additionally carry a loss boost so
poorly-aligned pairs retrain first.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

from .workload import Request, WorkloadType


class PriorityContractError(ValueError):
    pass


@dataclass(frozen=True)
class PriorityParams:
    base: dict[WorkloadType, float] = field(
        default_factory=lambda: {
            WorkloadType.DECODE: 3.0,
            WorkloadType.PREFILL: 2.0,
            WorkloadType.FINETUNE: 1.0,
        }
    )
    growth: dict[WorkloadType, float] = field(
        default_factory=lambda: {
            WorkloadType.FINETUNE: 0.05,
            WorkloadType.PREFILL: 0.02,
            WorkloadType.DECODE: 0.01,
        }
    )
    gamma: float = 1.0

    def validate(self) -> None:
        b, g = self.base, self.growth
        if not (b[WorkloadType.DECODE] > b[WorkloadType.PREFILL] > b[WorkloadType.FINETUNE]):
            raise PriorityContractError("base priorities must satisfy decode > prefill > finetune")
        if not (g[WorkloadType.FINETUNE] > g[WorkloadType.PREFILL] > g[WorkloadType.DECODE]):
            raise PriorityContractError("growth rates must satisfy finetune > prefill > decode")
        if self.gamma < 0:
            raise PriorityContractError("gamma must be >= 0")

    def crossover_age(self, slow: WorkloadType, fast: WorkloadType = WorkloadType.FINETUNE) -> float:
        """Age after which ``fast`` outranks a simultaneously-arrived ``slow`` request."""
        db = self.base[slow] - self.base[fast]
        dg = self.growth[fast] - self.growth[slow]
        if dg <= 0:
            return float("inf")
        return db / dg

    def starvation_bound(self) -> float:
        """Worst-case crossover age of a fine-tune job vs any inference workload."""
        return max(
            self.crossover_age(WorkloadType.DECODE),
            self.crossover_age(WorkloadType.PREFILL),
            0.0,
        )


def dynamic_priority(req: Request, t: float, params: PriorityParams) -> float:
    if t < req.arrival_time:
        raise PriorityContractError(
            f"priority query at t={t} before arrival of request {req.id} at {req.arrival_time}"
        )
    w = req.workload
    return params.base[w] + params.growth[w] * (t - req.arrival_time)


def ft_total_priority(req: Request, t: float, params: PriorityParams, loss: float) -> float:
    if req.workload is not WorkloadType.FINETUNE:
        raise PriorityContractError(f"request {req.id} is not a fine-tune request")
    if loss < 0:
        raise PriorityContractError("loss must be >= 0 under the positive-loss convention")
    return dynamic_priority(req, t, params) + params.gamma * loss


LossFn = Callable[[Request], float]


class PriorityQueue:
    """Max-heap over current priority, ties broken by (earlier arrival, lower id).

    Keys go stale as simulated time advances; call ``refresh(t)`` at each
    scheduling tick before dequeuing. Owned by a single simulation loop.
    """

    def __init__(self, params: PriorityParams, loss_fn: LossFn | None = None):
        params.validate()
        self.params = params
        self.loss_fn = loss_fn
        self._heap: list[tuple[float, float, int, Request]] = []
        self._last_refresh = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)

    def priority_of(self, req: Request, t: float) -> float:
        if req.workload is WorkloadType.FINETUNE and self.loss_fn is not None:
            return ft_total_priority(req, t, self.params, self.loss_fn(req))
        return dynamic_priority(req, t, self.params)

    def _key(self, req: Request, t: float) -> tuple[float, float, int, Request]:
        p = self.priority_of(req, t)
        req.priority_state.value = p
        req.priority_state.refreshed_at = t
        return (-p, req.arrival_time, req.id, req)

    def push(self, req: Request, t: float | None = None) -> None:
        heapq.heappush(self._heap, self._key(req, self._last_refresh if t is None else t))

    def refresh(self, t: float) -> None:
        """Recompute every key at time t and restore the heap property."""
        self._last_refresh = t
        if not self._heap:
            return
        self._heap = [self._key(entry[3], t) for entry in self._heap]
        heapq.heapify(self._heap)

    def pop(self) -> Request:
        if not self._heap:
            raise IndexError("pop from empty priority queue")
        return heapq.heappop(self._heap)[3]

    def peek(self) -> Request:
        if not self._heap:
            raise IndexError("peek at empty priority queue")
        return self._heap[0][3]

    def items(self) -> list[Request]:
        return [entry[3] for entry in self._heap]
