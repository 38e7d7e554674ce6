"""Holdout confidence widths and multi-run aggregation.

A loss estimate for one of ``k`` models on a holdout of size ``n`` is
within +/- sqrt(ln(k / delta) / n) of its true value with probability
1 - delta. Two groups' estimates can resolve a gap only when the sum of
their widths does not exceed it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from detection_equity import config
from detection_equity.errors import ValidationError


@dataclass(frozen=True)
class ConfidenceSpec:
    n: int
    k: int = 1
    delta: float = 0.05

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"Sample count n must be >= 1, got {self.n}")
        if self.k < 1:
            raise ValidationError(f"Model count k must be >= 1, got {self.k}")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RunAggregate:
    mean: float
    std: float
    run_count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "runs": self.run_count}


def _defaults(k: int | None, delta: float | None) -> tuple[int, float]:
    if k is None:
        k = int(config.setting("stats", "k", 1))
    if delta is None:
        delta = float(config.setting("stats", "delta", 0.05))
    return k, delta


def confidence_width(spec: ConfidenceSpec) -> float:
    return math.sqrt(math.log(spec.k / spec.delta) / spec.n)


def gap_resolvable(
    n_a: int,
    n_b: int,
    gap: float,
    k: int | None = None,
    delta: float | None = None,
) -> bool:
    k, delta = _defaults(k, delta)
    if gap <= 0:
        raise ValidationError(f"gap must be > 0, got {gap}")
    width = confidence_width(ConfidenceSpec(n_a, k, delta)) + confidence_width(ConfidenceSpec(n_b, k, delta))
    return width <= gap


def min_samples(
    ratio: float,
    gap: float,
    k: int | None = None,
    delta: float | None = None,
) -> tuple[int, int]:
    """Smallest (n_a, n_b) with n_a = ceil(ratio * n_b) that resolves ``gap``."""
    k, delta = _defaults(k, delta)
    if ratio < 1:
        raise ValidationError(f"ratio n_a / n_b must be >= 1, got {ratio}")
    if gap <= 0:
        raise ValidationError(f"gap must be > 0, got {gap}")

    def pair(n_b: int) -> tuple[int, int]:
        return math.ceil(ratio * n_b), n_b

    def ok(n_b: int) -> bool:
        return gap_resolvable(*pair(n_b), gap, k, delta)

    # widths shrink as n_b grows, so bracket then bisect
    hi = 1
    while not ok(hi):
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return pair(hi)


def holdout_report(
    n_a: int,
    n_b: int,
    gap: float,
    k: int | None = None,
    delta: float | None = None,
) -> dict:
    """Widths for both groups, whether ``gap`` is resolvable, and the minimal pair."""
    k, delta = _defaults(k, delta)
    width_a = confidence_width(ConfidenceSpec(n_a, k, delta))
    width_b = confidence_width(ConfidenceSpec(n_b, k, delta))
    ratio = max(n_a, n_b) / min(n_a, n_b)
    n_pair = min_samples(ratio, gap, k, delta)
    if n_a < n_b:
        n_pair = n_pair[::-1]
    resolvable = gap_resolvable(n_a, n_b, gap, k, delta)
    return {
        "width_a": width_a,
        "width_b": width_b,
        "width": width_a + width_b,
        "resolvable": resolvable,
        "n_pair": list(n_pair),
        "quoted_pair_minimal": resolvable and tuple(n_pair) == (n_a, n_b),
    }


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    """Mean and sample standard deviation (0 for a single run)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValidationError("aggregate_runs needs at least one value")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return RunAggregate(mean=float(np.mean(arr)), std=std, run_count=int(arr.size))
