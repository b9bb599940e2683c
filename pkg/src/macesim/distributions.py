"""Small length-distribution specs used by the trace generator.

A spec is a family name plus keyword parameters, e.g. ``geometric:mean=256``
or ``uniform:lo=8,hi=64``. Samples are always integers >= 1 so they can be
used directly as token counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DistributionError(ValueError):
    """Raised when a distribution spec has an unknown family or bad params."""


_FAMILIES = ("constant", "geometric", "uniform", "lognormal")


@dataclass(frozen=True)
class DistSpec:
    family: str
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise DistributionError(
                f"unknown distribution family {self.family!r} (expected one of {_FAMILIES})"
            )
        p = self.params
        if self.family == "constant":
            if p.get("value", 0) < 1:
                raise DistributionError("constant distribution requires value >= 1")
        elif self.family == "geometric":
            if p.get("mean", 0) < 1:
                raise DistributionError("geometric distribution requires mean >= 1")
        elif self.family == "uniform":
            lo, hi = p.get("lo", 0), p.get("hi", -1)
            if not (1 <= lo <= hi):
                raise DistributionError("uniform distribution requires 1 <= lo <= hi")
        elif self.family == "lognormal":
            if p.get("mean", 0) < 1 or p.get("sigma", -1) < 0:
                raise DistributionError("lognormal distribution requires mean >= 1 and sigma >= 0")

    def sample(self, rng: np.random.Generator) -> int:
        p = self.params
        if self.family == "constant":
            return int(p["value"])
        if self.family == "geometric":
            # support {1, 2, ...} with the requested mean
            mean = p["mean"]
            if mean <= 1.0:
                return 1
            return int(rng.geometric(1.0 / mean))
        if self.family == "uniform":
            return int(rng.integers(int(p["lo"]), int(p["hi"]) + 1))
        # lognormal, rounded and floored at 1
        mean, sigma = p["mean"], p["sigma"]
        mu = math.log(mean) - 0.5 * sigma * sigma
        return max(1, int(round(rng.lognormal(mu, sigma))))

    def mean(self) -> float:
        p = self.params
        if self.family == "constant":
            return float(p["value"])
        if self.family == "geometric":
            return float(p["mean"])
        if self.family == "uniform":
            return (p["lo"] + p["hi"]) / 2.0
        return float(p["mean"])

    def to_string(self) -> str:
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.family}:{inner}" if inner else self.family


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_dist(text: str) -> DistSpec:
    """Parse ``family:key=value,key=value`` into a DistSpec."""
    text = text.strip()
    if ":" in text:
        family, _, rest = text.partition(":")
    else:
        family, rest = text, ""
    params: dict[str, float] = {}
    if rest:
        for part in rest.split(","):
            if "=" not in part:
                raise DistributionError(f"malformed distribution parameter {part!r} in {text!r}")
            key, _, value = part.partition("=")
            try:
                params[key.strip()] = float(value)
            except ValueError as exc:
                raise DistributionError(f"non-numeric value for {key.strip()!r} in {text!r}") from exc
    return DistSpec(family.strip(), params)
