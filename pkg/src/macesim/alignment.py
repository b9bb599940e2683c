"""Alignment mathematics over a synthetic per-tenant preference-drift process.

Sign convention, stated once and relied on everywhere: the per-sample loss is
``-log sigmoid(beta * (delta_plus - delta_minus))``, which is always positive
and larger for *worse*-aligned samples. That makes "loss above threshold"
mean "keep retraining" and lets the fine-tune priority boost reward high
misalignment directly.

Each tenant carries a scalar mean margin ``mu`` that decays linearly with
simulated time (preference drift) and recovers by ``ft_gain`` per executed
fine-tune step, capped at ``mu_max``. Pair and eval margins are fixed offsets
around ``mu``, so retraining strategies measurably move win rate and CLPD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .workload import Request, TenantDriftSpec, WorkloadType


class AlignmentDomainError(ValueError):
    pass


@dataclass(frozen=True)
class MarginSample:
    delta_plus: float
    delta_minus: float

    @property
    def margin(self) -> float:
        return self.delta_plus - self.delta_minus


def dpo_loss(sample: MarginSample, beta: float) -> float:
    """Per-sample preference loss, strictly decreasing in the margin, always > 0."""
    if beta <= 0:
        raise AlignmentDomainError("beta must be > 0")
    # -log sigmoid(beta*m) == log(1 + exp(-beta*m)), computed stably
    x = -beta * sample.margin
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def win_rate(samples: list[MarginSample]) -> float:
    """Fraction of samples preferring the chosen response; ties count as losses."""
    if not samples:
        raise AlignmentDomainError("win_rate over an empty sample list")
    return sum(1 for s in samples if s.margin > 0) / len(samples)


def clpd(samples: list[MarginSample]) -> float:
    """Mean chosen-minus-rejected log-probability difference."""
    if not samples:
        raise AlignmentDomainError("clpd over an empty sample list")
    return sum(s.margin for s in samples) / len(samples)


@dataclass
class TenantParams:
    mu0: float = 0.5
    sigma: float = 1.0
    drift_rate: float = 0.01
    ft_gain: float = 0.25
    mu_max: float = 2.0
    eval_pairs: int = 32

    def validate(self) -> None:
        if self.sigma <= 0:
            raise AlignmentDomainError("sigma must be > 0")
        if self.drift_rate < 0:
            raise AlignmentDomainError("drift_rate must be >= 0")
        if self.ft_gain <= 0:
            raise AlignmentDomainError("ft_gain must be > 0")
        if self.eval_pairs < 1:
            raise AlignmentDomainError("eval_pairs must be >= 1")

    def drift_spec(self) -> TenantDriftSpec:
        return TenantDriftSpec(mu0=self.mu0, sigma=self.sigma, drift_rate=self.drift_rate)


@dataclass
class _TenantState:
    params: TenantParams
    mu: float
    eval_offsets: list[float]


@dataclass
class AlignmentEnv:
    """Owned by a single simulation run; metric functions on top of it are pure."""

    tenants: dict[int, _TenantState]
    beta: float = 1.0
    gamma: float = 1.0
    loss_threshold: float = 0.3
    prune_penalty: float = 0.05
    prune_aggressiveness: float = 0.0  # fraction of decode KV released; set by the engine

    @classmethod
    def create(
        cls,
        tenant_params: dict[int, TenantParams],
        seed: int,
        beta: float = 1.0,
        gamma: float = 1.0,
        loss_threshold: float = 0.3,
        prune_penalty: float = 0.05,
    ) -> "AlignmentEnv":
        if beta <= 0:
            raise AlignmentDomainError("beta must be > 0")
        if gamma < 0:
            raise AlignmentDomainError("gamma must be >= 0")
        tenants: dict[int, _TenantState] = {}
        for tid in sorted(tenant_params):
            params = tenant_params[tid]
            params.validate()
            rng = np.random.default_rng([seed, 17, tid])
            offsets = rng.normal(0.0, params.sigma, size=params.eval_pairs).tolist()
            tenants[tid] = _TenantState(params=params, mu=params.mu0, eval_offsets=offsets)
        return cls(
            tenants=tenants,
            beta=beta,
            gamma=gamma,
            loss_threshold=loss_threshold,
            prune_penalty=prune_penalty,
        )

    def _state(self, tenant: int) -> _TenantState:
        try:
            return self.tenants[tenant]
        except KeyError:
            raise AlignmentDomainError(f"unknown tenant {tenant}") from None

    def advance(self, tenant: int, dt: float) -> None:
        """Linear preference drift: mu decreases by drift_rate * dt (never increases)."""
        if dt < 0:
            raise AlignmentDomainError("dt must be >= 0")
        st = self._state(tenant)
        st.mu -= st.params.drift_rate * dt

    def advance_all(self, dt: float) -> None:
        for tid in self.tenants:
            self.advance(tid, dt)

    def pair_margin(self, req: Request) -> float:
        """Current margin of a fine-tune request's pair under the tenant's mu.

        The pair offset is recovered from the trace-recorded initial margin by
        subtracting the generation-time drift trajectory, so the same request
        replays identically across runs and policies.
        """
        if req.workload is not WorkloadType.FINETUNE or req.pair is None:
            raise AlignmentDomainError(f"request {req.id} is not a finetune request")
        st = self._state(req.tenant)
        gen_mu = st.params.mu0 - st.params.drift_rate * req.arrival_time
        offset = req.pair.initial_margin - gen_mu
        return st.mu + offset

    def pair_loss(self, req: Request) -> float:
        return dpo_loss(MarginSample(self.pair_margin(req), 0.0), self.beta)

    def ft_step(self, req: Request) -> float:
        """Apply one fine-tune step for the pair's tenant; returns the new pair loss."""
        st = self._state(req.tenant)
        st.mu = min(st.params.mu_max, st.mu + st.params.ft_gain)
        return self.pair_loss(req)

    def eval_metrics(self, tenant: int, t: float) -> tuple[float, float]:
        """(win rate, CLPD) over the tenant's held-out offsets at the current state.

        When KV pruning has released cache, eval margins carry a small
        penalty proportional to how aggressively pruning has fired.
        """
        st = self._state(tenant)
        penalty = self.prune_penalty * self.prune_aggressiveness
        samples = [MarginSample(st.mu + off - penalty, 0.0) for off in st.eval_offsets]
        return win_rate(samples), clpd(samples)

    def mu_of(self, tenant: int) -> float:
        return self._state(tenant).mu


def env_advance(env: AlignmentEnv, tenant: int, dt: float) -> AlignmentEnv:
    env.advance(tenant, dt)
    return env


def env_ft_step(env: AlignmentEnv, tenant: int, req: Request) -> tuple[AlignmentEnv, float]:
    if req.tenant != tenant:
        raise AlignmentDomainError(f"request {req.id} belongs to tenant {req.tenant}, not {tenant}")
    loss = env.ft_step(req)
    return env, loss


def eval_metrics(env: AlignmentEnv, tenant: int, t: float) -> tuple[float, float]:
    return env.eval_metrics(tenant, t)
