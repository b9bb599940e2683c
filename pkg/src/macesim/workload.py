"""Mixed inference/retraining trace generation and trace file I/O.

Traces are ordered request streams with Poisson arrivals. A configurable
fraction of arrivals are fine-tune jobs; the rest are prefill requests that
later spawn decode work inside the simulator. Prompts are token-id paths
sampled from a random template tree plus a unique tail, which gives exact,
tunable prefix overlap across prompts without any tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .distributions import DistSpec, DistributionError, parse_dist

TRACE_SCHEMA = "mace-trace-v1"


class TraceConfigError(ValueError):
    """A trace config field is missing or out of range; message names the field."""


class TraceParseError(ValueError):
    """A trace file line could not be parsed; message carries the line number."""


class WorkloadType(Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    FINETUNE = "finetune"


@dataclass
class PreferencePair:
    """Synthetic preference pair carried by a fine-tune request.

    ``initial_margin`` stands in for the chosen-minus-rejected log-probability
    difference at arrival time; token lengths drive the memory cost model.
    """

    initial_margin: float
    tokens_chosen: int
    tokens_rejected: int

    def __post_init__(self) -> None:
        if self.tokens_chosen <= 0 or self.tokens_rejected <= 0:
            raise ValueError("preference pair token lengths must be positive")


@dataclass
class PriorityState:
    value: float = 0.0
    refreshed_at: float = -1.0


@dataclass
class Request:
    """One unit of work with mutable scheduling state.

    A request arrives as PREFILL or FINETUNE; a prefill transitions to DECODE
    in place once its prompt has been processed. ``target_output_len`` is
    pre-sampled but treated as hidden by the scheduler (termination is only
    observed when decoding reaches it).
    """

    id: int
    tenant: int
    workload: WorkloadType
    arrival_time: float
    prompt_tokens: list[int]
    target_output_len: int
    decode_pos: int = 0
    ft_steps_done: int = 0
    pair: PreferencePair | None = None
    priority_state: PriorityState = field(default_factory=PriorityState, compare=False)

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ValueError(f"request {self.id}: arrival_time must be >= 0")
        if self.workload in (WorkloadType.PREFILL, WorkloadType.FINETUNE) and not self.prompt_tokens:
            raise ValueError(f"request {self.id}: prompt_tokens must be non-empty")
        if (self.pair is not None) != (self.workload is WorkloadType.FINETUNE):
            raise ValueError(f"request {self.id}: pair present iff workload is FINETUNE")


@dataclass(frozen=True)
class PrefixTreeSpec:
    """Template tree controlling prompt prefix overlap.

    Each prompt follows a random root-to-leaf path of ``depth`` shared
    segments (``branching`` choices per level) and ends with a unique tail,
    so deeper trees raise the mean shared-prefix fraction.
    """

    branching: int = 2
    depth: int = 3
    segment_len: DistSpec = field(default_factory=lambda: DistSpec("constant", {"value": 32}))

    def validate(self) -> None:
        if self.depth < 0:
            raise TraceConfigError("prefix_tree_spec.depth must be >= 0")
        if self.depth > 0 and self.branching < 1:
            raise TraceConfigError("prefix_tree_spec.branching must be >= 1")


@dataclass(frozen=True)
class TenantDriftSpec:
    """Per-tenant preference-margin environment summary used at generation time."""

    mu0: float = 0.5
    sigma: float = 1.0
    drift_rate: float = 0.01


@dataclass(frozen=True)
class TraceConfig:
    arrival_rate: float = 10.0
    retrain_rate: float = 0.1
    duration: float = 30.0
    seed: int = 0
    prompt_len_dist: DistSpec = field(default_factory=lambda: DistSpec("geometric", {"mean": 256}))
    output_len_dist: DistSpec = field(default_factory=lambda: DistSpec("geometric", {"mean": 128}))
    prefix_tree_spec: PrefixTreeSpec = field(default_factory=PrefixTreeSpec)
    tenants: tuple[TenantDriftSpec, ...] = (TenantDriftSpec(),)
    vocab_size: int = 50000

    def validate(self) -> None:
        if self.arrival_rate <= 0:
            raise TraceConfigError("arrival_rate must be > 0")
        if self.duration <= 0:
            raise TraceConfigError("duration must be > 0")
        if not (0.0 <= self.retrain_rate <= 0.5):
            raise TraceConfigError("retrain_rate must be in [0, 0.5]")
        if not self.tenants:
            raise TraceConfigError("tenants must be non-empty")
        if self.vocab_size < 2:
            raise TraceConfigError("vocab_size must be >= 2")
        self.prefix_tree_spec.validate()
        for name, dist in (("prompt_len_dist", self.prompt_len_dist), ("output_len_dist", self.output_len_dist)):
            try:
                # spec objects validate on construction; re-validate via replace for parsed configs
                DistSpec(dist.family, dist.params)
            except DistributionError as exc:
                raise TraceConfigError(f"{name}: {exc}") from exc


class _TemplateTree:
    """Lazily materialised template tree; segment tokens are memoised per path."""

    def __init__(self, spec: PrefixTreeSpec, vocab_size: int, rng: np.random.Generator):
        self.spec = spec
        self.vocab_size = vocab_size
        self.rng = rng
        self._segments: dict[tuple[int, ...], list[int]] = {}

    def sample_path(self) -> list[int]:
        tokens: list[int] = []
        choices: tuple[int, ...] = ()
        for _ in range(self.spec.depth):
            choices = choices + (int(self.rng.integers(self.spec.branching)),)
            seg = self._segments.get(choices)
            if seg is None:
                length = self.spec.segment_len.sample(self.rng)
                seg = self.rng.integers(0, self.vocab_size, size=length).tolist()
                self._segments[choices] = seg
            tokens.extend(seg)
        return tokens


def generate_trace(cfg: TraceConfig) -> list[Request]:
    """Generate an arrival-ordered request list; deterministic for a fixed seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tree = _TemplateTree(cfg.prefix_tree_spec, cfg.vocab_size, rng)
    requests: list[Request] = []
    t = 0.0
    rid = 0
    mean_gap = 1.0 / cfg.arrival_rate
    n_tenants = len(cfg.tenants)
    while True:
        t += float(rng.exponential(mean_gap))
        if t > cfg.duration:
            break
        tenant = int(rng.integers(n_tenants)) if n_tenants > 1 else 0
        is_ft = bool(rng.random() < cfg.retrain_rate)
        path = tree.sample_path()
        total_len = cfg.prompt_len_dist.sample(rng)
        tail_len = max(1, total_len - len(path))
        prompt = path + rng.integers(0, cfg.vocab_size, size=tail_len).tolist()
        out_len = cfg.output_len_dist.sample(rng)
        if is_ft:
            drift = cfg.tenants[tenant]
            margin = drift.mu0 - drift.drift_rate * t + float(rng.normal(0.0, drift.sigma))
            req = Request(
                id=rid,
                tenant=tenant,
                workload=WorkloadType.FINETUNE,
                arrival_time=t,
                prompt_tokens=prompt,
                target_output_len=out_len,
                pair=PreferencePair(margin, tokens_chosen=out_len, tokens_rejected=out_len),
            )
        else:
            req = Request(
                id=rid,
                tenant=tenant,
                workload=WorkloadType.PREFILL,
                arrival_time=t,
                prompt_tokens=prompt,
                target_output_len=out_len,
            )
        requests.append(req)
        rid += 1
    return requests


def write_trace(trace: list[Request], path: str | Path) -> None:
    """Write a trace as tab-separated records under a schema-version header."""
    lines = [TRACE_SCHEMA]
    for req in trace:
        margin = "" if req.pair is None else repr(req.pair.initial_margin)
        lines.append(
            "\t".join(
                (
                    str(req.id),
                    str(req.tenant),
                    req.workload.value,
                    repr(req.arrival_time),
                    ",".join(str(tok) for tok in req.prompt_tokens),
                    str(req.target_output_len),
                    margin,
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> list[Request]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRACE_SCHEMA:
        raise TraceParseError(f"line 1: expected header {TRACE_SCHEMA!r}")
    trace: list[Request] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise TraceParseError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            rid = int(parts[0])
            tenant = int(parts[1])
            workload = WorkloadType(parts[2])
            arrival = float(parts[3])
            prompt = [int(tok) for tok in parts[4].split(",")] if parts[4] else []
            out_len = int(parts[5])
            pair = None
            if workload is WorkloadType.FINETUNE:
                if parts[6] == "":
                    raise ValueError("missing initial_margin for finetune request")
                pair = PreferencePair(float(parts[6]), tokens_chosen=out_len, tokens_rejected=out_len)
            elif parts[6] != "":
                raise ValueError("initial_margin must be empty for non-finetune request")
            trace.append(
                Request(
                    id=rid,
                    tenant=tenant,
                    workload=workload,
                    arrival_time=arrival,
                    prompt_tokens=prompt,
                    target_output_len=out_len,
                    pair=pair,
                )
            )
        except TraceParseError:
            raise
        except (ValueError, KeyError) as exc:
            raise TraceParseError(f"line {lineno}: {exc}") from exc
    return trace


def sharing_ratios(prompts: list[list[int]]) -> list[float]:
    """Per-prompt ratio of longest shared prefix (vs all earlier prompts) to length.

    Uses an incremental token trie, so it is O(total tokens); the brute-force
    pairwise equivalent is used as the oracle in tests.
    """
    root: dict[int, dict] = {}
    ratios: list[float] = []
    for prompt in prompts:
        node = root
        shared = 0
        walking = True
        for tok in prompt:
            child = node.get(tok) if walking else None
            if child is None:
                walking = False
                new: dict[int, dict] = {}
                node[tok] = new
                node = new
            else:
                shared += 1
                node = child
        ratios.append(shared / len(prompt) if prompt else 0.0)
    return ratios


def with_seed(cfg: TraceConfig, seed: int) -> TraceConfig:
    return replace(cfg, seed=seed)


__all__ = [
    "TRACE_SCHEMA",
    "TraceConfigError",
    "TraceParseError",
    "WorkloadType",
    "PreferencePair",
    "PriorityState",
    "Request",
    "PrefixTreeSpec",
    "TenantDriftSpec",
    "TraceConfig",
    "generate_trace",
    "write_trace",
    "read_trace",
    "sharing_ratios",
    "with_seed",
    "parse_dist",
]
