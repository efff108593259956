"""Metric collection, windowed aggregation and CSV/summary output."""

from __future__ import annotations

import csv
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

# series names shared by the worker runtime and the report command
RECORDS_DONE = "records_done"
SHARDS_DONE = "shards_done"
RESTARTS = "restarts"
UTILIZATION = "utilization"
OCCUPANCY_PREFIX = "occupancy."
EXECUTORS_PREFIX = "executors."


@dataclass(frozen=True)
class MetricSample:
    at: int
    worker_id: str
    series: str
    value: float


class MetricsCollector:
    """Lossless multi-producer sample sink."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[MetricSample] = []
        self._last_at: dict[tuple[str, str], int] = {}

    def record(self, sample: MetricSample) -> None:
        with self._lock:
            key = (sample.worker_id, sample.series)
            # clamp so per-(worker, series) timestamps never go backwards
            at = max(sample.at, self._last_at.get(key, 0))
            self._last_at[key] = at
            if at != sample.at:
                sample = MetricSample(at, sample.worker_id, sample.series, sample.value)
            self._samples.append(sample)

    def add(self, at: int, worker_id: str, series: str, value: float) -> None:
        self.record(MetricSample(at, worker_id, series, float(value)))

    def snapshot(self) -> list[MetricSample]:
        with self._lock:
            return list(self._samples)

    def write_csv(self, path: Union[str, Path]) -> None:
        write_csv(self.snapshot(), path)


def write_csv(samples: Iterable[MetricSample], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["at_ms", "worker_id", "series", "value"])
        for s in sorted(samples, key=lambda s: (s.at, s.worker_id, s.series)):
            w.writerow([s.at, s.worker_id, s.series, repr(s.value)])


def read_csv(path: Union[str, Path]) -> list[MetricSample]:
    with open(path, newline="") as f:
        return [
            MetricSample(int(r["at_ms"]), r["worker_id"], r["series"], float(r["value"]))
            for r in csv.DictReader(f)
        ]


@dataclass
class WindowAggregate:
    start: int
    end: int
    qps: float
    records: float
    shards: float
    occupancy: dict
    executors: dict
    utilization: Optional[float]


def qps(records: float, window_ms: float) -> float:
    return 0.0 if window_ms <= 0 else records * 1000.0 / window_ms


def aggregate(
    samples: Iterable[MetricSample],
    window: int,
    start: int = 0,
    end: Optional[int] = None,
) -> list[WindowAggregate]:
    """Bucket samples into fixed windows of ``window`` ms.

    Counter series (records, shards) are summed across workers, gauge series
    (occupancy, utilization) are averaged, executor counts are averaged per
    worker and summed across workers.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    samples = list(samples)
    if end is None:
        end = max((s.at for s in samples), default=start) + 1
    n = max(1, -(-(end - start) // window))
    records = [0.0] * n
    shards = [0.0] * n
    gauges: list[dict] = [defaultdict(list) for _ in range(n)]
    execs: list[dict] = [defaultdict(list) for _ in range(n)]
    for s in samples:
        if not start <= s.at < start + n * window:
            continue
        i = (s.at - start) // window
        if s.series == RECORDS_DONE:
            records[i] += s.value
        elif s.series == SHARDS_DONE:
            shards[i] += s.value
        elif s.series.startswith(EXECUTORS_PREFIX):
            execs[i][(s.series[len(EXECUTORS_PREFIX):], s.worker_id)].append(s.value)
        elif s.series.startswith(OCCUPANCY_PREFIX) or s.series == UTILIZATION:
            gauges[i][s.series].append(s.value)
    out = []
    for i in range(n):
        occ = {k[len(OCCUPANCY_PREFIX):]: sum(v) / len(v) for k, v in gauges[i].items() if k.startswith(OCCUPANCY_PREFIX)}
        util = gauges[i].get(UTILIZATION)
        per_stage: dict[str, float] = defaultdict(float)
        for (stage, _w), vals in execs[i].items():
            per_stage[stage] += sum(vals) / len(vals)
        out.append(
            WindowAggregate(
                start=start + i * window,
                end=start + (i + 1) * window,
                qps=qps(records[i], window),
                records=records[i],
                shards=shards[i],
                occupancy=dict(sorted(occ.items())),
                executors=dict(sorted(per_stage.items())),
                utilization=(sum(util) / len(util)) if util else None,
            )
        )
    return out


def summarize(
    samples: Iterable[MetricSample],
    job_start: int,
    last_commit: Optional[int],
    window: int,
    restarts: int = 0,
    failovers: int = 0,
    error_rows: int = 0,
) -> dict:
    samples = list(samples)
    total = sum(s.value for s in samples if s.series == RECORDS_DONE)
    jct = (last_commit - job_start) if last_commit is not None else 0
    windows = aggregate(samples, window, start=job_start, end=(last_commit or job_start) + 1)
    return {
        "qps_mean": qps(total, jct),
        "qps_peak": max((w.qps for w in windows), default=0.0),
        "jct_ms": jct,
        "records": int(total),
        "restarts": restarts,
        "failovers": failovers,
        "error_rows": error_rows,
    }
