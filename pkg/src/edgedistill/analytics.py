"""Closed-form traffic/throughput bounds and run-statistics aggregation.

The timing model: each key frame starts a cycle whose first ``min_stride``
frames cost ``t_c`` (bounded below by overlap, above by full serialization),
every other frame costs one student inference, and every distillation step
adds ``t_sd``.  All conversions here are plain decimal: a reported "Mbps" is
10^6 bits per second.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .distill import AlgoParams

MBPS = 1e6  # bits per second per reported megabit


@dataclass(frozen=True)
class LatencyProfile:
    """Scalar component measurements driving the analytic model."""

    t_si: float  # student inference, s/frame
    t_sd: float  # one distillation step, s
    t_ti: float  # teacher inference, s
    t_net: float  # full key-frame round-trip transfer, s
    s_net: float  # bytes moved per key frame, both directions

    def __post_init__(self):
        for name in ("t_si", "t_sd", "t_ti", "t_net", "s_net"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def t_c_bounds(p: LatencyProfile, params: AlgoParams) -> tuple[float, float]:
    """Interval for the cost of the min_stride frames after a key frame."""
    compute = params.min_stride * p.t_si
    transfer = p.t_net + p.t_ti
    return max(compute, transfer), compute + transfer


def total_time(n: float, k: float, d: float, t_c: float, p: LatencyProfile, params: AlgoParams) -> float:
    if n < k * params.min_stride:
        raise ValueError(f"n={n} smaller than k*min_stride={k * params.min_stride}")
    return (n - k * params.min_stride) * p.t_si + d * p.t_sd + k * t_c


def traffic_general(n: float, k: float, d: float, t_c: float, p: LatencyProfile, params: AlgoParams) -> float:
    """Bits per second moved over a run with the given counters."""
    if k == 0:
        return 0.0
    return k * p.s_net * 8.0 / total_time(n, k, d, t_c, p, params)


def throughput_general(n: float, k: float, d: float, t_c: float, p: LatencyProfile, params: AlgoParams) -> float:
    return n / total_time(n, k, d, t_c, p, params)


def traffic_bounds(p: LatencyProfile, params: AlgoParams) -> tuple[float, float]:
    """(lower, upper) bits per second over any sufficiently long run."""
    lower = p.s_net * 8.0 / (
        params.max_stride * p.t_si + params.max_updates * p.t_sd + p.t_ti + p.t_net
    )
    upper = p.s_net * 8.0 / max(params.min_stride * p.t_si, p.t_net + p.t_ti)
    return lower, upper


def throughput_bounds(p: LatencyProfile, params: AlgoParams) -> tuple[float, float]:
    """(lower, upper) frames per second over any sufficiently long run."""
    lower = params.min_stride / (
        params.min_stride * p.t_si + params.max_updates * p.t_sd + p.t_ti + p.t_net
    )
    upper = params.max_stride / (
        (params.max_stride - params.min_stride) * p.t_si
        + max(params.min_stride * p.t_si, p.t_net + p.t_ti)
    )
    return lower, upper


# ---------------------------------------------------------------------------
# run statistics


@dataclass
class CycleStat:
    frame_index: int
    steps: int
    metric: float
    stride_after: int
    wait_time: float
    t_c: Optional[float]  # measured span net of distillation-attributable wait


@dataclass
class RunStats:
    """Counters and traces from one completed run."""

    scenario: str
    strategy: str
    mode: str
    n: int
    k: int
    d: int
    bytes_up: int
    bytes_down: int
    init_bytes: int
    time_s: float
    miou: list[float] = field(default_factory=list)
    cycles: list[CycleStat] = field(default_factory=list)
    keyframe_msg_bytes: int = 0
    update_msg_bytes: int = 0
    params: Optional[AlgoParams] = None
    # steady-state window: complete key-frame cycles, first send to last send
    steady_cycles: int = 0
    steady_frames: int = 0
    steady_time_s: float = 0.0

    @property
    def steady_traffic_bps(self) -> Optional[float]:
        if self.steady_cycles < 1 or self.steady_time_s <= 0:
            return None
        return self.steady_cycles * self.s_net * 8.0 / self.steady_time_s

    @property
    def steady_throughput_fps(self) -> Optional[float]:
        if self.steady_cycles < 1 or self.steady_time_s <= 0:
            return None
        return self.steady_frames / self.steady_time_s

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("a run must process at least one frame")
        if not self.k <= self.n:
            raise ValueError(f"k={self.k} exceeds n={self.n}")
        if self.params is not None:
            if self.d > self.k * self.params.max_updates:
                raise ValueError("more distillation steps than the cap allows")
            if self.k * self.params.min_stride > self.n + self.params.max_stride:
                raise ValueError("more key frames than the minimum stride allows")

    @property
    def s_net(self) -> int:
        return self.keyframe_msg_bytes + self.update_msg_bytes


def aggregate(stats: RunStats) -> dict:
    """Summary report row: FPS, key-frame ratio, traffic, accuracy, bytes."""
    stats.validate()
    if stats.time_s <= 0:
        raise ValueError("run time must be positive")
    total_bytes = stats.bytes_up + stats.bytes_down
    return {
        "scenario": stats.scenario,
        "strategy": stats.strategy,
        "mode": stats.mode,
        "fps": stats.n / stats.time_s,
        "key_ratio_pct": 100.0 * stats.k / stats.n,
        "traffic_mbps": total_bytes * 8.0 / stats.time_s / MBPS,
        "miou_mean": float(sum(stats.miou) / len(stats.miou)) if stats.miou else float("nan"),
        "bytes_up": stats.bytes_up,
        "bytes_down": stats.bytes_down,
    }


REPORT_COLUMNS = [
    "scenario",
    "fps",
    "key_ratio_pct",
    "traffic_mbps",
    "miou_mean",
    "bytes_up",
    "bytes_down",
]


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def report_json(report: dict, bounds: Optional[dict] = None, indent: int = 2) -> str:
    doc = dict(report)
    if bounds:
        doc["bounds"] = bounds
    return json.dumps(doc, indent=indent, sort_keys=True)


def bounds_report(p: LatencyProfile, params: AlgoParams) -> dict:
    """All closed-form outputs for one profile, in reporting units."""
    tc_lo, tc_hi = t_c_bounds(p, params)
    tr_lo, tr_hi = traffic_bounds(p, params)
    th_lo, th_hi = throughput_bounds(p, params)
    return {
        "t_c_lower_s": tc_lo,
        "t_c_upper_s": tc_hi,
        "traffic_lower_mbps": tr_lo / MBPS,
        "traffic_upper_mbps": tr_hi / MBPS,
        "throughput_lower_fps": th_lo,
        "throughput_upper_fps": th_hi,
    }
