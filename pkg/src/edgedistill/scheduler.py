"""Adaptive key-frame stride computation.

The next stride is the current one scaled by a piecewise-linear function of
the latest student metric: 0 at metric 0, 1 at the threshold, 2 at metric 1.
The stride is kept as a real number internally so repeated small adjustments
are not lost to rounding; the effective (integer) stride is the clamped
round-half-up of that value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .distill import AlgoParams


@dataclass(frozen=True)
class Stride:
    value: float

    def effective(self, params: AlgoParams) -> int:
        rounded = math.floor(self.value + 0.5)
        return min(params.max_stride, max(params.min_stride, rounded))


def initial_stride(params: AlgoParams) -> Stride:
    return Stride(float(params.min_stride))


def stride_ratio(metric: float, threshold: float) -> float:
    if not 0.0 <= metric <= 1.0:
        raise ValueError(f"metric {metric} outside [0, 1]")
    if metric < threshold:
        return metric / threshold
    return (metric - 2.0 * threshold + 1.0) / (1.0 - threshold)


def next_stride(stride: Stride, metric: float, params: AlgoParams) -> Stride:
    value = stride_ratio(metric, params.threshold) * stride.value
    value = min(float(params.max_stride), max(float(params.min_stride), value))
    return Stride(value)
