"""Shared builders for tests."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from batchinfer.jobspec import JobSpec, parse_job


class FakeClock:
    """Manually advanced clock with the SimClock surface the control plane uses."""

    def __init__(self, now: int = 0, time_scale: float = 1.0):
        self.now = now
        self.time_scale = time_scale

    def now_ms(self) -> int:
        return int(self.now)

    def now_exact_ms(self) -> float:
        return float(self.now)

    def real_seconds(self, sim_ms: float) -> float:
        return sim_ms * self.time_scale / 1000.0


BASE_JOB = {
    "engine": {"worker_num": 1, "priority": 1.0, "devices": 4},
    "data": {"source_path": "data", "shard_size": 50, "batch_size": 10},
    "writer": {"writer_num": 1},
    "runner": {
        "pipeline": [{"node_id": "m", "cost_per_record_ms": 0.0}],
        "queue_capacity": 4,
    },
}


def job_dict(**sections) -> dict:
    """BASE_JOB with per-section overrides merged in (one level deep)."""
    d = copy.deepcopy(BASE_JOB)
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return d


def make_job(data_dir: Path, **sections) -> JobSpec:
    d = job_dict(**sections)
    d["data"]["source_path"] = str(data_dir)
    return parse_job(yaml.safe_dump(d))


def write_job(path: Path, data_dir: Path, **sections) -> Path:
    d = job_dict(**sections)
    d["data"]["source_path"] = str(data_dir)
    path.write_text(yaml.safe_dump(d))
    return path
