"""Online serving simulation with a single FIFO server.

Clients are activated on a linear ramp and each sends requests separated by
uniform random pauses. Requests join the queue tail; one server pops the
head, asks the scheduler for a level given the current queue size and
serves it. The deterministic engine charges the profiled processing time
per request; the wall-clock engine runs real sliced forwards on threads.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import queue
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .model import SLICED, ElasticModel
from .scheduler import LatencyProfile


@dataclass(frozen=True)
class WorkloadSpec:
    duration_s: float = 120.0
    ramp_s: float = 50.0
    peak_concurrency: int = 100
    pause_min_s: float = 1.0
    pause_max_s: float = 3.0
    seed: int = 0
    query_pool: int = 128

    def __post_init__(self):
        if self.ramp_s > self.duration_s or self.ramp_s < 0:
            raise ConfigError("ramp must lie within the duration")
        if self.pause_min_s > self.pause_max_s or self.pause_min_s <= 0:
            raise ConfigError("pause range must be positive with min <= max")
        if self.peak_concurrency < 0:
            raise ConfigError("peak concurrency must be non-negative")

    def activation(self, client: int) -> float:
        if self.peak_concurrency == 0 or self.ramp_s == 0:
            return 0.0
        return client * self.ramp_s / self.peak_concurrency

    def active_clients(self, t: float) -> int:
        if self.peak_concurrency == 0:
            return 0
        if self.ramp_s == 0:
            return self.peak_concurrency
        return min(self.peak_concurrency, math.floor(t * self.peak_concurrency / self.ramp_s + 1e-9) + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "WorkloadSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Arrival:
    request_id: int
    client_id: int
    time: float
    query_index: int


def generate_workload(spec: WorkloadSpec) -> list[Arrival]:
    """Open-loop arrival schedule, sorted by time (ties by client id).

    Client ``i`` starts at ``i * ramp / peak`` and then waits a fresh
    uniform pause after each send. Each client draws from its own seeded
    stream, so the schedule does not depend on iteration order.
    """
    streams = np.random.SeedSequence(spec.seed).spawn(max(1, spec.peak_concurrency))
    raw = []
    for client in range(spec.peak_concurrency):
        rng = np.random.default_rng(streams[client])
        t = spec.activation(client)
        while t < spec.duration_s:
            raw.append((t, client, int(rng.integers(max(1, spec.query_pool)))))
            t += rng.uniform(spec.pause_min_s, spec.pause_max_s)
    raw.sort(key=lambda r: (r[0], r[1]))
    return [Arrival(i, c, t, q) for i, (t, c, q) in enumerate(raw)]


@dataclass
class RequestEvent:
    request_id: int
    client_id: int
    arrival: float
    dequeue: float
    completion: float
    level: float
    queue_size: int
    ahead_at_arrival: int = 0
    proxy: float = float("nan")

    @property
    def latency(self) -> float:
        return self.completion - self.arrival

    @property
    def queuing(self) -> float:
        return self.dequeue - self.arrival

    @property
    def processing(self) -> float:
        return self.completion - self.dequeue


def _fill_ahead(events: list[RequestEvent]) -> None:
    # FIFO single server: completions are non-decreasing in service order.
    completions = [e.completion for e in events]
    for k, e in enumerate(events):
        first_busy = bisect.bisect_right(completions, e.arrival, 0, k)
        e.ahead_at_arrival = k - first_busy


def run_discrete_event(arrivals: Sequence[Arrival], scheduler, latency: LatencyProfile | dict,
                       count_in_service: bool = True) -> list[RequestEvent]:
    """Deterministic single-server FIFO run; times in seconds.

    At each dequeue the scheduler sees ``g`` = requests still waiting, plus
    the one being dispatched when ``count_in_service`` is set.
    """
    if isinstance(latency, dict):
        latency = LatencyProfile.from_table(latency)
    arrivals = sorted(arrivals, key=lambda a: (a.time, a.request_id))
    times = [a.time for a in arrivals]
    events: list[RequestEvent] = []
    free_at = 0.0
    for k, a in enumerate(arrivals):
        start = max(free_at, a.time)
        waiting = bisect.bisect_right(times, start) - (k + 1)
        g = waiting + (1 if count_in_service else 0)
        d = scheduler.decide(g)
        service = latency.t_p(d.level) / 1000.0
        done = start + service
        events.append(RequestEvent(a.request_id, a.client_id, a.time, start, done, d.level, g,
                                   proxy=latency.proxy(d.level)))
        free_at = done
    _fill_ahead(events)
    return events


class SimulationAborted(RuntimeError):
    def __init__(self, message: str, events: list[RequestEvent]):
        super().__init__(message)
        self.events = events


def run_wall_clock(model: ElasticModel, scheduler, spec: WorkloadSpec, queries: Sequence[np.ndarray],
                   profile: LatencyProfile | None = None, count_in_service: bool = True,
                   safety_cap: int = 10_000, time_scale: float = 1.0) -> list[RequestEvent]:
    """Real-time run: one thread per client, one server thread, a bounded FIFO.

    The server encodes each query with a sliced forward at the chosen level.
    ``time_scale`` < 1 compresses client pauses and ramp (not processing).
    If the queue ever holds ``safety_cap`` requests the run stops and raises
    :class:`SimulationAborted` carrying the events served so far.
    """
    arrivals = generate_workload(spec)
    profile = profile or getattr(scheduler, "profile", None)
    q: queue.Queue = queue.Queue(maxsize=safety_cap)
    events: list[RequestEvent] = []
    abort = threading.Event()
    t0 = time.perf_counter() + 0.05
    by_client: dict[int, list[Arrival]] = {}
    for a in arrivals:
        by_client.setdefault(a.client_id, []).append(a)

    def client(items: list[Arrival]):
        for a in items:
            delay = t0 + a.time * time_scale - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            if abort.is_set():
                return
            try:
                q.put_nowait((a, time.perf_counter() - t0))
            except queue.Full:
                abort.set()
                return

    def server():
        served = 0
        while served < len(arrivals) and not abort.is_set():
            try:
                a, arrived = q.get(timeout=0.05)
            except queue.Empty:
                continue
            start = time.perf_counter() - t0
            g = q.qsize() + (1 if count_in_service else 0)
            d = scheduler.decide(g)
            tokens = np.asarray(queries[a.query_index % len(queries)])[None, :]
            with nx.no_grad():
                model.forward(tokens, d.level, SLICED)
            done = time.perf_counter() - t0
            proxy = profile.proxy(d.level) if profile is not None else float("nan")
            events.append(RequestEvent(a.request_id, a.client_id, arrived, start, done, d.level, g, proxy=proxy))
            served += 1

    threads = [threading.Thread(target=client, args=(items,), daemon=True) for items in by_client.values()]
    worker = threading.Thread(target=server, daemon=True)
    worker.start()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    worker.join()
    events.sort(key=lambda e: e.dequeue)
    _fill_ahead(events)
    if abort.is_set():
        raise SimulationAborted(f"queue reached the safety cap of {safety_cap}", events)
    return events


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

CSV_FIELDS = ("bucket_start_s", "concurrency", "mean_latency_ms", "p95_latency_ms",
              "violation_rate", "level_mode", "mean_perf_proxy")


@dataclass
class TradeoffReport:
    label: str
    T: float
    rows: list[dict] = field(default_factory=list)
    histograms: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([repr(float(r[k])) for k in CSV_FIELDS])
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[dict]:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]

    def summary(self, start_s: float = 0.0, end_s: float = math.inf) -> dict:
        rows = [r for r in self.rows if start_s <= r["bucket_start_s"] < end_s]
        return {"label": self.label, "T_ms": self.T, "rows": len(rows)}


def _mode(levels: list) -> float:
    counts = Counter(levels)
    top = max(counts.values())
    return max(lv for lv, c in counts.items() if c == top)


def window_stats(events: Sequence[RequestEvent], T_ms: float, start_s: float = 0.0,
                 end_s: float = math.inf) -> dict:
    """Latency / violation / proxy summary for requests arriving in [start, end)."""
    sel = [e for e in events if start_s <= e.arrival < end_s]
    if not sel:
        return {"requests": 0, "mean_latency_ms": math.nan, "p95_latency_ms": math.nan,
                "violation_rate": math.nan, "mean_perf_proxy": math.nan}
    lat = np.array([e.latency * 1000.0 for e in sel])
    return {
        "requests": len(sel),
        "mean_latency_ms": float(lat.mean()),
        "p95_latency_ms": float(np.percentile(lat, 95)),
        "violation_rate": float((lat > T_ms).mean()),
        "mean_perf_proxy": float(np.mean([e.proxy for e in sel])),
    }


def report(events: Sequence[RequestEvent], spec: WorkloadSpec, T_ms: float, bucket_s: float = 5.0,
           label: str = "run") -> TradeoffReport:
    """Bucket requests by arrival time; every bucket of the duration gets a row."""
    out = TradeoffReport(label, T_ms)
    if not events:
        return out
    n_buckets = max(1, math.ceil(spec.duration_s / bucket_s - 1e-9))
    buckets: list[list[RequestEvent]] = [[] for _ in range(n_buckets)]
    for e in events:
        buckets[min(n_buckets - 1, int(e.arrival // bucket_s))].append(e)
    for b, sel in enumerate(buckets):
        start = b * bucket_s
        stats = window_stats(sel, T_ms)
        levels = [e.level for e in sel]
        out.rows.append({
            "bucket_start_s": start,
            "concurrency": float(spec.active_clients(min(start + bucket_s / 2, spec.duration_s))),
            "mean_latency_ms": stats["mean_latency_ms"],
            "p95_latency_ms": stats["p95_latency_ms"],
            "violation_rate": stats["violation_rate"],
            "level_mode": _mode(levels) if levels else math.nan,
            "mean_perf_proxy": stats["mean_perf_proxy"],
        })
        out.histograms.append(dict(sorted(Counter(levels).items(), reverse=True)))
    return out


def events_to_csv(events: Sequence[RequestEvent]) -> str:
    buf = io.StringIO()
    names = ["request_id", "client_id", "arrival", "dequeue", "completion", "level", "queue_size",
             "ahead_at_arrival", "proxy"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for e in events:
        w.writerow([repr(getattr(e, n)) for n in names])
    return buf.getvalue()


def compare(runs: dict[str, Sequence[RequestEvent]], spec: WorkloadSpec, T_ms: float,
            windows: dict[str, tuple[float, float]] | None = None) -> list[dict]:
    """One summary row per configuration over named time windows."""
    windows = windows or {"all": (0.0, math.inf), "peak": (spec.ramp_s, math.inf)}
    table = []
    for label, events in runs.items():
        row = {"config": label}
        for wname, (a, b) in windows.items():
            s = window_stats(events, T_ms, a, b)
            row[f"{wname}_violation_rate"] = s["violation_rate"]
            row[f"{wname}_mean_latency_ms"] = s["mean_latency_ms"]
            row[f"{wname}_mean_perf_proxy"] = s["mean_perf_proxy"]
        table.append(row)
    return table


def table_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
