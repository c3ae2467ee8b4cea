"""Route Efficiency Measure.

A route's REM is its accumulated rtt together with its bottleneck
bandwidth.  Comparison and change thresholds are governed by a RemPolicy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class LinkQuality:
    rtt: float
    bandwidth: float

    def __post_init__(self):
        if self.rtt < 0:
            raise ValueError(f"rtt must be >= 0, got {self.rtt}")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")

    def as_rem(self) -> Rem:
        return Rem(self.rtt, self.bandwidth)


@dataclass(frozen=True)
class Rem:
    total_rtt: float = 0
    bottleneck_bw: float = math.inf

    def __post_init__(self):
        if self.total_rtt < 0:
            raise ValueError(f"total_rtt must be >= 0, got {self.total_rtt}")
        if self.bottleneck_bw <= 0:
            raise ValueError(f"bottleneck_bw must be > 0, got {self.bottleneck_bw}")

    def __str__(self):
        bw = "inf" if math.isinf(self.bottleneck_bw) else f"{self.bottleneck_bw:g}"
        return f"rtt={self.total_rtt:g} bw={bw}"


# Empty route: the identity of rem_compose.
IDENTITY = Rem()


def rem_compose(a: Rem, b: Rem) -> Rem:
    return Rem(a.total_rtt + b.total_rtt, min(a.bottleneck_bw, b.bottleneck_bw))


def rem_chain(rems) -> Rem:
    out = IDENTITY
    for r in rems:
        out = rem_compose(out, r)
    return out


COMPARISON_MODES = ("rtt", "bandwidth")


@dataclass(frozen=True)
class RemPolicy:
    """REM comparison and change-threshold knobs.

    mode "rtt" ranks by total rtt with bandwidth as tiebreak; mode
    "bandwidth" ranks by bottleneck bandwidth with rtt as tiebreak.  The
    change threshold at level n is delta_base * (n + 1) in both modes.
    """

    delta_base: float = 10.0
    mode: str = "rtt"

    def __post_init__(self):
        if self.mode not in COMPARISON_MODES:
            raise ValueError(f"unknown comparison mode {self.mode!r}")
        if self.delta_base < 0:
            raise ValueError("delta_base must be >= 0")

    def sort_key(self, rem: Rem):
        if self.mode == "rtt":
            return (rem.total_rtt, -rem.bottleneck_bw)
        return (-rem.bottleneck_bw, rem.total_rtt)

    def scalar(self, rem: Rem) -> float:
        return rem.total_rtt

    def delta(self, level: int) -> float:
        return self.delta_base * (level + 1)


DEFAULT_POLICY = RemPolicy()


def rem_better(a: Rem, b: Rem, policy: RemPolicy = DEFAULT_POLICY) -> bool:
    return policy.sort_key(a) < policy.sort_key(b)


def delta_exceeds(old: Rem, new: Rem, level: int, policy: RemPolicy = DEFAULT_POLICY) -> bool:
    if level < 0:
        raise ValueError("level must be >= 0")
    return abs(policy.scalar(new) - policy.scalar(old)) > policy.delta(level)
