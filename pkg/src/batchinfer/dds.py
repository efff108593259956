"""Stateful data sharding service.

The queue owns every shard and performs every state transition. Workers pull
shards with :meth:`ShardQueue.acquire_shard`, report completion after their
output is committed, and the controller reclaims the in-flight shards of
crashed or retired workers. Reports carry the attempt number they were issued
with so a late report from a fenced-out owner cannot complete a shard twice.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO, Union

from .core import ConfigurationError, ProtocolError, Shard, ShardState, WorkerId

log = logging.getLogger(__name__)


class ShardingMode(enum.Enum):
    DDS = "DDS"
    EvenPartition = "EvenPartition"


class Exhausted:
    """Sentinel returned by acquire_shard when nothing is pending.

    Shards may still be DOING elsewhere, so this does not mean the job is done.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Exhausted"


EXHAUSTED = Exhausted()


class ReportResult(enum.Enum):
    Accepted = "Accepted"
    StaleAttempt = "StaleAttempt"


class WorkerRejected(ProtocolError):
    pass


@dataclass(frozen=True)
class ProgressReport:
    total: int
    todo: int
    doing: int
    done: int
    per_worker_done: dict = field(default_factory=dict)


def _shard_ranges(dataset_size: int, shard_size: int):
    start = 0
    while start < dataset_size:
        end = min(start + shard_size, dataset_size)
        yield start, end
        start = end


class ShardQueue:
    """Global shard queue. All public methods are atomic under one lock."""

    def __init__(
        self,
        shards: list[Shard],
        mode: ShardingMode = ShardingMode.DDS,
        even_slots: int = 1,
        clock: Optional[Callable[[], int]] = None,
        transcript: Optional[TextIO] = None,
    ):
        self._lock = threading.Lock()
        self._clock = clock or (lambda: 0)
        self._transcript = transcript
        self.mode = mode
        self.shards: dict[int, Shard] = {s.shard_id: s for s in shards}
        self.doing: dict[WorkerId, set[int]] = {}
        self.done: set[int] = set()
        self._workers: set[WorkerId] = set()
        self._per_worker_done: dict[WorkerId, int] = {}

        if mode is ShardingMode.DDS:
            self._slots = [deque(s.shard_id for s in shards)]
        else:
            if even_slots < 1:
                raise ConfigurationError("even partition needs at least one worker slot")
            # contiguous, as-equal-as-possible groups of shards, one per worker
            self._slots = []
            ids = [s.shard_id for s in shards]
            n = len(ids)
            for k in range(even_slots):
                lo = k * n // even_slots
                hi = (k + 1) * n // even_slots
                self._slots.append(deque(ids[lo:hi]))
        self._slot_owner: list[Optional[WorkerId]] = [None] * len(self._slots)
        self._worker_slot: dict[WorkerId, int] = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def partition(cls, dataset_size: int, shard_size: int, **kwargs) -> "ShardQueue":
        if shard_size < 1:
            raise ConfigurationError("shard_size must be >= 1")
        if dataset_size < 0:
            raise ConfigurationError("dataset_size must be >= 0")
        shards = [
            Shard(shard_id=i, start=a, end=b)
            for i, (a, b) in enumerate(_shard_ranges(dataset_size, shard_size))
        ]
        return cls(shards, **kwargs)

    # -- internals --------------------------------------------------------

    def _log(self, op: str, args: dict, result) -> None:
        if self._transcript is None:
            return
        line = json.dumps({"op": op, "args": args, "result": result, "ts": self._clock()})
        self._transcript.write(line + "\n")

    def _slot_for(self, worker: WorkerId) -> Optional[int]:
        if self.mode is ShardingMode.DDS:
            return 0
        slot = self._worker_slot.get(worker)
        if slot is not None:
            return slot
        # adopt the first slot whose owner is gone (failover in even mode)
        for i, owner in enumerate(self._slot_owner):
            if owner is None:
                self._slot_owner[i] = worker
                self._worker_slot[worker] = i
                return i
        return None

    @property
    def pending(self) -> list[int]:
        with self._lock:
            return [sid for slot in self._slots for sid in slot]

    # -- protocol ---------------------------------------------------------

    def register_worker(self, worker: WorkerId) -> None:
        with self._lock:
            self._workers.add(worker)
            self._per_worker_done.setdefault(worker, 0)
            if self.mode is ShardingMode.EvenPartition:
                self._slot_for(worker)
            self._log("register_worker", {"worker": worker}, "ok")

    def is_registered(self, worker: WorkerId) -> bool:
        with self._lock:
            return worker in self._workers

    def acquire_shard(self, worker: WorkerId) -> Union[Shard, Exhausted]:
        with self._lock:
            if worker not in self._workers:
                self._log("acquire_shard", {"worker": worker}, "Rejected")
                raise WorkerRejected(f"worker {worker!r} is not registered")
            slot = self._slot_for(worker)
            if slot is None or not self._slots[slot]:
                self._log("acquire_shard", {"worker": worker}, "Exhausted")
                return EXHAUSTED
            sid = self._slots[slot].popleft()
            shard = self.shards[sid].transition(
                ShardState.DOING, assigned_worker=worker, assigned_at=self._clock()
            )
            self.shards[sid] = shard
            self.doing.setdefault(worker, set()).add(sid)
            self._log(
                "acquire_shard",
                {"worker": worker},
                {"shard_id": sid, "attempt": shard.attempt},
            )
            return shard

    def report_done(self, worker: WorkerId, shard_id: int, attempt: int) -> ReportResult:
        with self._lock:
            shard = self.shards.get(shard_id)
            args = {"worker": worker, "shard_id": shard_id, "attempt": attempt}
            if shard is None:
                self._log("report_done", args, "ProtocolError")
                raise ProtocolError(f"unknown shard {shard_id}")
            if (
                shard.state is not ShardState.DOING
                or shard.assigned_worker != worker
                or shard.attempt != attempt
            ):
                self._log("report_done", args, ReportResult.StaleAttempt.value)
                return ReportResult.StaleAttempt
            self.shards[shard_id] = shard.transition(ShardState.DONE, assigned_worker=None)
            self.doing[worker].discard(shard_id)
            self.done.add(shard_id)
            self._per_worker_done[worker] = self._per_worker_done.get(worker, 0) + 1
            self._log("report_done", args, ReportResult.Accepted.value)
            return ReportResult.Accepted

    def reclaim_worker(self, worker: WorkerId) -> list[int]:
        """Return a worker's DOING shards to the tail of the queue and unregister it."""
        with self._lock:
            ids = sorted(self.doing.pop(worker, ()))
            slot = self._worker_slot.pop(worker, None)
            if self.mode is ShardingMode.DDS:
                slot = 0
            elif slot is not None:
                self._slot_owner[slot] = None
            for sid in ids:
                shard = self.shards[sid]
                self.shards[sid] = shard.transition(
                    ShardState.TODO, assigned_worker=None, attempt=shard.attempt + 1
                )
                if slot is None:
                    # even mode, worker had no slot: should not hold shards
                    slot = 0
                self._slots[slot].append(sid)
            self._workers.discard(worker)
            self._log("reclaim_worker", {"worker": worker}, ids)
            return ids

    def progress(self) -> ProgressReport:
        with self._lock:
            doing = sum(len(v) for v in self.doing.values())
            return ProgressReport(
                total=len(self.shards),
                todo=sum(len(s) for s in self._slots),
                doing=doing,
                done=len(self.done),
                per_worker_done=dict(self._per_worker_done),
            )

    def is_complete(self) -> bool:
        with self._lock:
            return len(self.done) == len(self.shards)

    def check_invariants(self) -> None:
        """Assert the conservation and ownership invariants. Used by tests and debug runs."""
        with self._lock:
            pending = [sid for slot in self._slots for sid in slot]
            doing = [sid for ids in self.doing.values() for sid in ids]
            all_ids = pending + doing + list(self.done)
            assert len(all_ids) == len(self.shards), "shard count not conserved"
            assert set(all_ids) == set(self.shards), "shard appears in two sets"
            for sid in pending:
                assert self.shards[sid].state is ShardState.TODO
            for w, ids in self.doing.items():
                for sid in ids:
                    s = self.shards[sid]
                    assert s.state is ShardState.DOING and s.assigned_worker == w
            for sid in self.done:
                assert self.shards[sid].state is ShardState.DONE
