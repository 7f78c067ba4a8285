"""Latency calibration and queue-aware structure selection.

A request that finds ``g`` requests ahead of it waits roughly ``g`` service
times, so its latency under a structure with processing time ``t_p`` is
about ``(g + 1) * t_p``. Given a latency budget ``T`` the scheduler keeps the
structures satisfying ``(g + 1) * t_p <= T`` and serves the best of them.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .model import SLICED, ElasticModel, Submap


@dataclass(frozen=True)
class LevelProfile:
    level: float
    t_p_ms: float
    proxy: float
    trials: int = 0

    def __post_init__(self):
        if not self.t_p_ms > 0:
            raise ContractError(f"processing time must be positive, got {self.t_p_ms}")


@dataclass
class LatencyProfile:
    entries: tuple[LevelProfile, ...]
    violations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entries = tuple(sorted(self.entries, key=lambda e: -e.level))
        if not self.entries:
            raise ContractError("a latency profile needs at least one level")

    @classmethod
    def from_table(cls, t_p_ms: dict, proxies: dict | None = None) -> "LatencyProfile":
        proxies = proxies or {}
        return cls(tuple(LevelProfile(lv, float(t), float(proxies.get(lv, lv))) for lv, t in t_p_ms.items()))

    @property
    def levels(self) -> list[float]:
        return [e.level for e in self.entries]

    def __getitem__(self, level) -> LevelProfile:
        for e in self.entries:
            if e.level == level:
                return e
        raise KeyError(level)

    def t_p(self, level) -> float:
        return self[level].t_p_ms

    def proxy(self, level) -> float:
        return self[level].proxy

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "t_p_ms", "proxy", "trials"])
        for e in self.entries:
            w.writerow([repr(e.level), repr(e.t_p_ms), repr(e.proxy), e.trials])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LatencyProfile":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(tuple(LevelProfile(_num(r["level"]), float(r["t_p_ms"]), float(r["proxy"]), int(r["trials"]))
                         for r in rows))

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "LatencyProfile":
        return cls.from_csv(Path(path).read_text())


def _num(text: str):
    value = float(text)
    return int(value) if value.is_integer() else value


def calibrate(
    model: ElasticModel,
    submap: Submap | None = None,
    trials: int = 10,
    input_length: int = 16,
    warmup: int = 2,
    batch: int = 1,
    proxies: dict | None = None,
    seed: int = 0,
    timer: Callable[[], float] = time.perf_counter,
) -> LatencyProfile:
    """Median wall-clock of a sliced forward per level.

    ``warmup`` extra runs per level are discarded. Levels are flagged in
    ``violations`` when more compute does not cost more time.
    """
    if trials < 5:
        raise ContractError(f"calibration needs at least 5 trials, got {trials}")
    submap = submap or model.submap
    rng = np.random.default_rng(seed)
    tokens = rng.integers(4, 128, size=(batch, input_length))
    resolution = time.get_clock_info("perf_counter").resolution
    entries = []
    for s in submap:
        samples = []
        with nx.no_grad():
            for i in range(warmup + trials):
                start = timer()
                model.forward(tokens, s, SLICED)
                elapsed = timer() - start
                if i >= warmup:
                    samples.append(elapsed)
        median = statistics.median(samples)
        if median < 100 * resolution:
            raise ContractError(
                f"timer resolution {resolution:.2e}s is too coarse for {median:.2e}s runs; "
                "raise input_length or batch")
        proxy = (proxies or {}).get(s.level, float("nan"))
        entries.append(LevelProfile(s.level, 1000.0 * median, proxy, trials))
    profile = LatencyProfile(tuple(entries))
    by_flops = sorted(profile.entries, key=lambda e: model.flops(submap[e.level], input_length))
    for small, big in zip(by_flops, by_flops[1:]):
        if not big.t_p_ms > small.t_p_ms:
            profile.violations.append(
                f"level {big.level} ({big.t_p_ms:.3f} ms) is not slower than level {small.level} "
                f"({small.t_p_ms:.3f} ms)")
    return profile


def max_queue(t_p: float, T: float) -> int:
    """Largest queue size g with (g + 1) * t_p <= T; negative means never feasible."""
    if not (t_p > 0 and T > 0):
        raise ContractError("t_p and T must be positive")
    return math.floor(T / t_p) - 1


@dataclass(frozen=True)
class ScheduleDecision:
    g: int
    T: float
    level: float
    estimated_ms: float
    feasible: bool


def decide(g: int, T: float, profile: LatencyProfile) -> ScheduleDecision:
    """Best-proxy level whose estimate (g + 1) * t_p fits T.

    Ties in proxy go to the larger level. When nothing fits, the fastest
    level is returned with ``feasible=False``.
    """
    fits = [e for e in profile.entries if (g + 1) * e.t_p_ms <= T]
    if fits:
        best = max(fits, key=lambda e: (e.proxy, e.level))
        return ScheduleDecision(g, T, best.level, (g + 1) * best.t_p_ms, True)
    fastest = min(profile.entries, key=lambda e: (e.t_p_ms, -e.proxy))
    return ScheduleDecision(g, T, fastest.level, (g + 1) * fastest.t_p_ms, False)


class ElasticScheduler:
    """Per-request :func:`decide` with an optional minimum dwell.

    With ``min_dwell`` > 0 a newly chosen level is kept for that many further
    decisions as long as it stays feasible.
    """

    def __init__(self, profile: LatencyProfile, T: float, min_dwell: int = 0):
        self.profile = profile
        self.T = T
        self.min_dwell = min_dwell
        self._held: float | None = None
        self._hold_left = 0

    @property
    def label(self) -> str:
        return f"elastic@{self.T:g}ms"

    def decide(self, g: int) -> ScheduleDecision:
        d = decide(g, self.T, self.profile)
        if self.min_dwell <= 0:
            return d
        if self._held is not None and self._hold_left > 0 and self._held != d.level:
            t_p = self.profile.t_p(self._held)
            if (g + 1) * t_p <= self.T:
                self._hold_left -= 1
                return ScheduleDecision(g, self.T, self._held, (g + 1) * t_p, True)
        if d.level != self._held:
            self._held, self._hold_left = d.level, self.min_dwell
        return d


class StaticScheduler:
    """Always serves one pinned level (the non-elastic baseline)."""

    def __init__(self, profile: LatencyProfile, level, T: float):
        self.profile = profile
        self.level = level
        self.T = T
        profile[level]

    @property
    def label(self) -> str:
        return f"static@{self.level:g}"

    def decide(self, g: int) -> ScheduleDecision:
        t_p = self.profile.t_p(self.level)
        return ScheduleDecision(g, self.T, self.level, (g + 1) * t_p, (g + 1) * t_p <= self.T)


def sweep(profile: LatencyProfile, T_values: Sequence[float], g_max: int) -> dict:
    """Chosen level for every (T, g) pair - handy for inspecting a profile."""
    return {T: [decide(g, T, profile).level for g in range(g_max + 1)] for T in T_values}
