"""Runs one job end to end against the simulated cluster."""

from __future__ import annotations

import json
import logging
import shutil
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

from . import metrics as m
from .cluster import NodeSpec, Scenario, SimCluster
from .controller import Controller, ScalePolicy, VerdictStatus
from .core import FailureKind, SimClock
from .dds import ShardQueue
from .io import DatasetManifest, DatasetReader, IntegrityReport, verify_output
from .jobspec import JobSpec
from .worker import Worker

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTEGRITY = 1
EXIT_SCHEMA = 2
EXIT_UNRETRYABLE = 3
EXIT_STALLED = 4


@dataclass
class RunResult:
    exit_code: int
    verdict: VerdictStatus
    summary: dict
    integrity: Optional[IntegrityReport]
    out_dir: Path
    workers: dict = field(default_factory=dict)

    @property
    def jct_ms(self) -> int:
        return self.summary["jct_ms"]


class JobRunner:
    """Owns the clock, control plane, sharding service and every worker of one job."""

    def __init__(
        self,
        job: JobSpec,
        scenario: Scenario,
        out_dir: Union[str, Path],
        seed: Optional[int] = None,
        time_scale: float = 1.0,
        max_wall_s: Optional[float] = None,
        poll_ms: float = 10.0,
    ):
        self.job = job
        self.seed = scenario.seed if seed is None else int(seed)
        self.scenario = scenario if seed is None else replace(scenario, seed=self.seed)
        self.out_dir = Path(out_dir)
        self.time_scale = time_scale
        self.max_wall_s = max_wall_s
        self.poll_ms = poll_ms
        self.pipeline = job.pipeline_spec(seed=self.seed)
        self.workers: dict[str, Worker] = {}
        self._lock = threading.Lock()

    # -- launcher protocol for the controller -------------------------------

    def start_worker(self, node: NodeSpec) -> None:
        w = Worker(
            node, self.pipeline, self.dds, self.reader, self.sink_dir, self.clock,
            metrics=self.metrics, faults=self.scenario.worker_faults, on_self_crash=self._self_crash,
        )
        with self._lock:
            self.workers[node.node_id] = w
        w.start()

    def drain_worker(self, node_id: str) -> None:
        self.workers[node_id].drain()

    def worker_finished(self, node_id: str) -> bool:
        return self.workers[node_id].finished

    def _on_crash(self, node_id: str, kind: FailureKind) -> None:
        with self._lock:
            w = self.workers.get(node_id)
        if w is not None:
            w.kill()

    def _self_crash(self, node_id: str, kind: FailureKind) -> None:
        self.cluster.crash_node(node_id, kind)

    # -- main loop ----------------------------------------------------------

    def _write_inputs(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "job.json", "w") as f:
            json.dump(self.job.to_json(), f, indent=2, sort_keys=True)
        with open(self.out_dir / "scenario.json", "w") as f:
            json.dump(self.scenario.to_json(), f, indent=2, sort_keys=True)
        with open(self.out_dir / "run.json", "w") as f:
            json.dump({"seed": self.seed, "time_scale": self.time_scale}, f, indent=2)

    def run(self) -> RunResult:
        self._write_inputs()
        self.sink_dir = self.out_dir / "output"
        if self.sink_dir.exists():
            shutil.rmtree(self.sink_dir)
        self.sink_dir.mkdir(parents=True)
        manifest = DatasetManifest.load(self.job.data.source_path)
        self.reader = DatasetReader(manifest)
        self.metrics = m.MetricsCollector()

        with open(self.out_dir / "dds_transcript.jsonl", "w") as dds_log, \
                open(self.out_dir / "cluster_events.jsonl", "w") as ev_log, \
                open(self.out_dir / "actions.jsonl", "w") as act_log:
            self.clock = SimClock(self.time_scale)
            self.dds = ShardQueue.partition(
                manifest.dataset_size,
                self.job.data.shard_size,
                mode=self.job.sharding_mode,
                even_slots=max(1, self.job.engine.worker_num),
                clock=self.clock.now_ms,
                transcript=dds_log,
            )
            self.cluster = SimCluster(self.scenario, self.clock, ev_log, on_crash=self._on_crash)
            eng = self.job.engine
            policy = ScalePolicy(eng.worker_num, eng.priority, min(eng.min_workers, eng.worker_num), eng.scale_check_interval_ms)
            self.controller = Controller(policy, self.cluster, self.dds, self, act_log)
            job_start = self.clock.now_ms()
            stalled = self._loop(policy)
            for w in list(self.workers.values()):
                w.stop()
            for w in list(self.workers.values()):
                w.join(5.0)
            wall = self.clock.real_seconds(self.clock.now_exact_ms())

        verdict = self.controller.verdict.status
        integrity = None
        if verdict is VerdictStatus.Running and self.dds.is_complete():
            verdict = VerdictStatus.Completed
        if verdict is VerdictStatus.Completed:
            integrity = verify_output(manifest, self.sink_dir)
            with open(self.out_dir / "integrity.json", "w") as f:
                json.dump(integrity.to_json(), f, indent=2)

        samples = self.metrics.snapshot()
        self.metrics.write_csv(self.out_dir / "metrics.csv")
        commits = [s.at for s in samples if s.series == m.RECORDS_DONE]
        summary = m.summarize(
            samples,
            job_start,
            max(commits) if commits else None,
            window=max(1, int(self.pipeline.autoscale.tick_interval)),
            restarts=sum(w.restarts.value for w in self.workers.values()),
            failovers=self.controller.failovers,
            error_rows=integrity.error_rows if integrity else 0,
        )
        summary.update(
            verdict=verdict.value,
            integrity_passed=bool(integrity and integrity.passed),
            dataset_size=manifest.dataset_size,
            workers_started=len(self.workers),
            sharding_mode=self.job.sharding_mode.value,
            wall_seconds=round(wall, 3),
        )
        if self.controller.verdict.failure_kind is not None:
            summary["failure_kind"] = self.controller.verdict.failure_kind.value
            summary["failed_node"] = self.controller.verdict.node_id
        with open(self.out_dir / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)

        if verdict is VerdictStatus.FailedUnretryable:
            code = EXIT_UNRETRYABLE
        elif stalled or verdict is not VerdictStatus.Completed:
            code = EXIT_STALLED
        else:
            code = EXIT_OK if integrity.passed else EXIT_INTEGRITY
        return RunResult(code, verdict, summary, integrity, self.out_dir, dict(self.workers))

    def _loop(self, policy: ScalePolicy) -> bool:
        """Drive events and reconcile ticks until the job ends. Returns True if it stalled."""
        sub = self.cluster.subscribe()
        schedule = list(self.scenario.target_schedule)
        self.controller.reconcile()
        last_reconcile = self.clock.now_ms()
        poll_s = max(self.clock.real_seconds(self.poll_ms), 0.001)
        t_wall = time.monotonic()
        while True:
            for ev in sub.poll():
                self.controller.handle_event(ev)
            now = self.clock.now_ms()
            while schedule and schedule[0][0] <= now:
                _, target = schedule.pop(0)
                self.controller.set_target(target)
                self.controller.reconcile()
                last_reconcile = now
            draining_done = any(
                e.draining and self.workers[n].finished for n, e in self.controller.workers.items()
            )
            if draining_done or now - last_reconcile >= policy.scale_check_interval:
                self.controller.reconcile()
                last_reconcile = now
            if self.controller.verdict.terminal or self.dds.is_complete():
                return False
            if self.max_wall_s is not None and time.monotonic() - t_wall > self.max_wall_s:
                log.error("job did not finish within %.1f s; progress %s", self.max_wall_s, self.dds.progress())
                return True
            time.sleep(poll_s)


def run_job(
    job: JobSpec,
    scenario: Scenario,
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    time_scale: float = 1.0,
    max_wall_s: Optional[float] = None,
) -> RunResult:
    return JobRunner(job, scenario, out_dir, seed=seed, time_scale=time_scale, max_wall_s=max_wall_s).run()
