"""
Single-pass statistics over unbounded sensor streams.

Aggregates are immutable value objects. Updating uses Welford's recurrence,
merging uses the pairwise combination of Chan et al., so partial aggregates
computed on different links or threads can be combined later without
revisiting the samples.

Variance is the population variance (``m2 / count``).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InputError


@dataclass(frozen=True)
class RunningAggregate:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def variance(self) -> float:
        if self.count == 0:
            raise InputError("variance of an empty aggregate is undefined")
        return self.m2 / self.count

    def std(self) -> float:
        return math.sqrt(self.variance())

    def update(self, x: float) -> "RunningAggregate":
        return aggregate_update(self, x)

    def merge(self, other: "RunningAggregate") -> "RunningAggregate":
        return aggregate_merge(self, other)


def aggregate_init() -> RunningAggregate:
    return RunningAggregate()


def aggregate_update(agg: RunningAggregate, x: float) -> RunningAggregate:
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"non-finite sample rejected: {x!r}")
    count = agg.count + 1
    delta = x - agg.mean
    mean = agg.mean + delta / count
    m2 = agg.m2 + delta * (x - mean)
    return RunningAggregate(count, mean, max(m2, 0.0))


def aggregate_merge(a: RunningAggregate, b: RunningAggregate) -> RunningAggregate:
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    count = a.count + b.count
    # written symmetrically so that merge(a, b) and merge(b, a) agree bit for bit
    mean = (a.count * a.mean + b.count * b.mean) / count
    delta = b.mean - a.mean
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / count)
    return RunningAggregate(count, mean, max(m2, 0.0))


def aggregate_of(values: Iterable[float]) -> RunningAggregate:
    """Fold ``values`` into a fresh aggregate."""
    agg = aggregate_init()
    for x in values:
        agg = aggregate_update(agg, x)
    return agg


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Finite discrete distribution given as ``(value, probability)`` pairs."""

    support: tuple[tuple[float, float], ...]

    def __post_init__(self):
        support = tuple((float(v), float(p)) for v, p in self.support)
        object.__setattr__(self, "support", support)
        for value, prob in support:
            if not (math.isfinite(value) and 0.0 <= prob <= 1.0):
                raise InputError(f"invalid support point ({value}, {prob})")
        if support and abs(math.fsum(p for _, p in support) - 1.0) > 1e-12:
            raise InputError("probabilities must sum to 1")

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "EmpiricalDistribution":
        if not samples:
            return cls(())
        counts = Counter(float(x) for x in samples)
        n = len(samples)
        return cls(tuple((v, c / n) for v, c in sorted(counts.items())))


def empirical_expectation(dist: EmpiricalDistribution) -> float:
    """Expected value ``sum(x * m(x))`` over the support."""
    if not dist.support:
        raise InputError("expectation of an empty distribution is undefined")
    return math.fsum(v * p for v, p in dist.support)
