"""Simulated cluster control plane.

Stands in for a container orchestrator: grants nodes out of an on-demand and a
spot capacity pool, plays back scripted fault and capacity events, and keeps
an ordered event log that subscribers poll.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, TextIO, Union

from .core import ConfigurationError, FailureKind, ProtocolError, SeededRng, SimClock

log = logging.getLogger(__name__)


class NodeClass(enum.Enum):
    OnDemand = "OnDemand"
    Spot = "Spot"


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    speed_factor: float = 1.0
    cores: int = 1
    node_class: NodeClass = NodeClass.OnDemand
    ordinal: int = 0

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise ValueError("speed_factor must be > 0")


class EventKind(enum.Enum):
    NodeStarted = "NodeStarted"
    NodeCrashed = "NodeCrashed"
    CapacityChanged = "CapacityChanged"


@dataclass(frozen=True)
class ClusterEvent:
    at: int
    kind: EventKind
    node_id: Optional[str] = None
    failure_kind: Optional[FailureKind] = None
    available_on_demand: Optional[int] = None
    available_spot: Optional[int] = None

    @classmethod
    def started(cls, at: int, node_id: str) -> "ClusterEvent":
        return cls(at, EventKind.NodeStarted, node_id=node_id)

    @classmethod
    def crashed(cls, at: int, node_id: str, kind: FailureKind) -> "ClusterEvent":
        return cls(at, EventKind.NodeCrashed, node_id=node_id, failure_kind=kind)

    @classmethod
    def capacity(cls, at: int, on_demand: int, spot: int) -> "ClusterEvent":
        return cls(at, EventKind.CapacityChanged, available_on_demand=on_demand, available_spot=spot)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"at": self.at, "kind": self.kind.value}
        if self.node_id is not None:
            out["node"] = self.node_id
        if self.failure_kind is not None:
            out["failure_kind"] = self.failure_kind.value
        if self.kind is EventKind.CapacityChanged:
            out["available_on_demand"] = self.available_on_demand
            out["available_spot"] = self.available_spot
        return out


@dataclass(frozen=True)
class EventTemplate:
    """A scripted event. ``node`` may be a node id, a grant ordinal, or None
    (pick a running node at fire time; preemptions only pick spot nodes)."""

    at_ms: int
    kind: EventKind
    node: Union[str, int, None] = None
    failure_kind: Optional[FailureKind] = None
    on_demand: Optional[int] = None
    spot: Optional[int] = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"at_ms": self.at_ms, "kind": self.kind.value, "node": self.node}
        if self.failure_kind is not None:
            out["failure_kind"] = self.failure_kind.value
        if self.kind is EventKind.CapacityChanged:
            out["on_demand"] = self.on_demand
            out["spot"] = self.spot
        return out

    @classmethod
    def from_json(cls, d: dict) -> "EventTemplate":
        kind = EventKind(d["kind"])
        fk = d.get("failure_kind")
        if kind is EventKind.NodeCrashed and fk is None:
            raise ConfigurationError("NodeCrashed event needs failure_kind")
        return cls(
            at_ms=int(d["at_ms"]),
            kind=kind,
            node=d.get("node"),
            failure_kind=FailureKind(fk) if fk is not None else None,
            on_demand=d.get("on_demand"),
            spot=d.get("spot"),
        )


@dataclass(frozen=True)
class HangFault:
    """Make one stage batch hang. ``attempts`` None means every attempt hangs."""

    worker: str
    stage: str
    batch: int
    attempts: Optional[int] = 1

    def matches(self, worker: str, stage: str, batch: int, attempt: int) -> bool:
        if self.worker not in ("*", worker) or self.stage != stage or self.batch != batch:
            return False
        return self.attempts is None or attempt < self.attempts


@dataclass(frozen=True)
class WorkerFaults:
    hangs: tuple[HangFault, ...] = ()
    record_errors: dict = field(default_factory=dict)  # record id -> ErrorKind value

    def hang_for(self, worker: str, stage: str, batch: int, attempt: int) -> bool:
        return any(h.matches(worker, stage, batch, attempt) for h in self.hangs)

    def to_json(self) -> dict:
        return {
            "hangs": [asdict(h) for h in self.hangs],
            "record_errors": [{"record": r, "kind": k} for r, k in sorted(self.record_errors.items())],
        }

    @classmethod
    def from_json(cls, d: Optional[dict]) -> "WorkerFaults":
        if not d:
            return cls()
        hangs = tuple(
            HangFault(str(h.get("worker", "*")), str(h["stage"]), int(h["batch"]), h.get("attempts", 1))
            for h in d.get("hangs", [])
        )
        errs = {int(e["record"]): str(e["kind"]) for e in d.get("record_errors", [])}
        return cls(hangs, errs)


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    initial_capacity: tuple[int, int] = (8, 0)
    events: tuple[EventTemplate, ...] = ()
    straggler_profile: dict = field(default_factory=dict)  # grant ordinal -> speed factor
    target_schedule: tuple[tuple[int, int], ...] = ()  # (at_ms, target_workers)
    worker_faults: WorkerFaults = field(default_factory=WorkerFaults)
    name: str = "custom"

    def __post_init__(self):
        times = [e.at_ms for e in self.events]
        if times != sorted(times):
            raise ConfigurationError("scenario events must be sorted by at_ms")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "initial_capacity": {"on_demand": self.initial_capacity[0], "spot": self.initial_capacity[1]},
            "events": [e.to_json() for e in self.events],
            "straggler_profile": {str(k): v for k, v in sorted(self.straggler_profile.items())},
            "target_schedule": [{"at_ms": t, "target_workers": n} for t, n in self.target_schedule],
            "worker_faults": self.worker_faults.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        cap = d.get("initial_capacity", {"on_demand": 8, "spot": 0})
        if isinstance(cap, dict):
            cap = (int(cap.get("on_demand", 0)), int(cap.get("spot", 0)))
        else:
            cap = (int(cap[0]), int(cap[1]))
        return cls(
            seed=int(d.get("seed", 0)),
            initial_capacity=cap,
            events=tuple(EventTemplate.from_json(e) for e in d.get("events", [])),
            straggler_profile={int(k): float(v) for k, v in d.get("straggler_profile", {}).items()},
            target_schedule=tuple(
                (int(t["at_ms"]), int(t["target_workers"])) for t in d.get("target_schedule", [])
            ),
            worker_faults=WorkerFaults.from_json(d.get("worker_faults")),
            name=str(d.get("name", "custom")),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class Denied:
    shortfall_on_demand: int
    shortfall_spot: int
    granted: tuple[NodeSpec, ...] = ()


class SimCluster:
    """In-process control plane. All mutations are serialized by one lock."""

    def __init__(
        self,
        scenario: Scenario,
        clock: Optional[Any] = None,
        transcript: Optional[TextIO] = None,
        on_crash: Optional[Callable[[str, FailureKind], None]] = None,
    ):
        self.scenario = scenario
        self.clock = clock or SimClock(1.0)
        self._transcript = transcript
        self._on_crash = on_crash
        self._lock = threading.Lock()
        self._rng = SeededRng(scenario.seed).stream("cluster")
        self.available = {NodeClass.OnDemand: scenario.initial_capacity[0], NodeClass.Spot: scenario.initial_capacity[1]}
        self.running: dict[str, NodeSpec] = {}
        self.by_ordinal: dict[int, str] = {}
        self._next_ordinal = 0
        self._script = list(scenario.events)
        self._script_pos = 0
        self.events: list[ClusterEvent] = []

    # -- internals --------------------------------------------------------

    def _emit(self, event: ClusterEvent) -> None:
        self.events.append(event)
        if self._transcript is not None:
            self._transcript.write(json.dumps(event.to_json()) + "\n")

    def _resolve_target(self, tpl: EventTemplate) -> Optional[str]:
        if isinstance(tpl.node, int):
            nid = self.by_ordinal.get(tpl.node)
            return nid if nid in self.running else None
        if isinstance(tpl.node, str):
            return tpl.node if tpl.node in self.running else None
        candidates = sorted(
            (n for n in self.running.values()
             if tpl.failure_kind is not FailureKind.Preemption or n.node_class is NodeClass.Spot),
            key=lambda n: n.ordinal,
        )
        if not candidates:
            return None
        return candidates[int(self._rng.integers(len(candidates)))].node_id

    def _crash_locked(self, at: int, node_id: str, kind: FailureKind) -> None:
        node = self.running.pop(node_id)
        self.available[node.node_class] += 1
        self._emit(ClusterEvent.crashed(at, node_id, kind))

    def _advance(self, now: int) -> list[tuple[str, FailureKind]]:
        crashed = []
        while self._script_pos < len(self._script) and self._script[self._script_pos].at_ms <= now:
            tpl = self._script[self._script_pos]
            self._script_pos += 1
            if tpl.kind is EventKind.NodeCrashed:
                target = self._resolve_target(tpl)
                if target is None:
                    log.info("scripted crash at %d has no eligible running node; skipped", tpl.at_ms)
                    continue
                if tpl.failure_kind is FailureKind.Preemption and self.running[target].node_class is not NodeClass.Spot:
                    log.info("preemption of on-demand node %s skipped", target)
                    continue
                self._crash_locked(tpl.at_ms, target, tpl.failure_kind)
                crashed.append((target, tpl.failure_kind))
            elif tpl.kind is EventKind.CapacityChanged:
                od = self.available[NodeClass.OnDemand] if tpl.on_demand is None else tpl.on_demand
                sp = self.available[NodeClass.Spot] if tpl.spot is None else tpl.spot
                self.available[NodeClass.OnDemand] = max(0, int(od))
                self.available[NodeClass.Spot] = max(0, int(sp))
                self._emit(ClusterEvent.capacity(tpl.at_ms, self.available[NodeClass.OnDemand], self.available[NodeClass.Spot]))
            else:
                log.info("scripted NodeStarted events are ignored; nodes start via request_nodes")
        return crashed

    def _notify(self, crashed) -> None:
        if self._on_crash is not None:
            for node_id, kind in crashed:
                self._on_crash(node_id, kind)

    # -- control plane API ------------------------------------------------

    def capacity(self) -> tuple[int, int]:
        with self._lock:
            return self.available[NodeClass.OnDemand], self.available[NodeClass.Spot]

    def request_nodes(self, count_on_demand: int, count_spot: int) -> Union[list[NodeSpec], Denied]:
        if count_on_demand < 0 or count_spot < 0:
            raise ValueError("node counts must be >= 0")
        with self._lock:
            now = self.clock.now_ms()
            crashed = self._advance(now)
            granted = []
            shortfall = {}
            for cls_, want in ((NodeClass.OnDemand, count_on_demand), (NodeClass.Spot, count_spot)):
                n = min(want, self.available[cls_])
                shortfall[cls_] = want - n
                for _ in range(n):
                    ordinal = self._next_ordinal
                    self._next_ordinal += 1
                    node = NodeSpec(
                        node_id=f"n{ordinal}",
                        speed_factor=float(self.scenario.straggler_profile.get(ordinal, 1.0)),
                        node_class=cls_,
                        ordinal=ordinal,
                    )
                    self.available[cls_] -= 1
                    self.running[node.node_id] = node
                    self.by_ordinal[ordinal] = node.node_id
                    granted.append(node)
                    self._emit(ClusterEvent.started(now, node.node_id))
        self._notify(crashed)
        if shortfall[NodeClass.OnDemand] or shortfall[NodeClass.Spot]:
            return Denied(shortfall[NodeClass.OnDemand], shortfall[NodeClass.Spot], tuple(granted))
        return granted

    def release_node(self, node_id: str) -> None:
        with self._lock:
            crashed = self._advance(self.clock.now_ms())
            node = self.running.pop(node_id, None)
            if node is not None:
                self.available[node.node_class] += 1
        self._notify(crashed)
        if node is None:
            raise ProtocolError(f"node {node_id!r} is not running")

    def crash_node(self, node_id: str, kind: FailureKind) -> bool:
        """Inject an immediate crash (e.g. a worker declaring itself dead)."""
        with self._lock:
            now = self.clock.now_ms()
            crashed = self._advance(now)
            ok = node_id in self.running
            if ok:
                self._crash_locked(now, node_id, kind)
                crashed.append((node_id, kind))
        self._notify(crashed)
        return ok

    def poll_events(self, since: int = -1) -> list[ClusterEvent]:
        """Events with since < at <= now, in order."""
        with self._lock:
            now = self.clock.now_ms()
            crashed = self._advance(now)
            out = [e for e in self.events if since < e.at <= now]
        self._notify(crashed)
        return out

    def subscribe(self) -> "Subscription":
        return Subscription(self)

    def is_running(self, node_id: str) -> bool:
        with self._lock:
            return node_id in self.running


class Subscription:
    """Cursor over the cluster event log; each event is returned exactly once."""

    def __init__(self, cluster: SimCluster):
        self._cluster = cluster
        self._pos = 0

    def poll(self) -> list[ClusterEvent]:
        c = self._cluster
        with c._lock:
            crashed = c._advance(c.clock.now_ms())
            out = c.events[self._pos:]
            self._pos = len(c.events)
        c._notify(crashed)
        return out


# ---------------------------------------------------------------------------
# Canned scenarios


def steady(seed: int = 0, on_demand: int = 8, spot: int = 8) -> Scenario:
    return Scenario(seed=seed, initial_capacity=(on_demand, spot), name="steady")


def churn(seed: int = 0, horizon_ms: int = 60_000, preemptions: int = 3, failures: int = 1) -> Scenario:
    rng = SeededRng(seed).stream("scenario")
    events = []
    for _ in range(preemptions):
        events.append(EventTemplate(int(rng.integers(1, horizon_ms)), EventKind.NodeCrashed, None, FailureKind.Preemption))
    for _ in range(failures):
        events.append(EventTemplate(int(rng.integers(1, horizon_ms)), EventKind.NodeCrashed, None, FailureKind.HardwareFailure))
    events.sort(key=lambda e: e.at_ms)
    return Scenario(seed=seed, initial_capacity=(4, 8), events=tuple(events), name="churn")


def valley_scale_up(seed: int = 0, at_ms: int = 5_000, extra_spot: int = 2) -> Scenario:
    return Scenario(
        seed=seed,
        initial_capacity=(2, 0),
        events=(EventTemplate(at_ms, EventKind.CapacityChanged, on_demand=None, spot=extra_spot),),
        name="valley-scale-up",
    )


def random_fault_scenario(
    seed: int,
    horizon_ms: int,
    workers: int,
    *,
    stages: tuple[str, ...] = ("predict",),
    max_batches: int = 20,
) -> Scenario:
    """Randomized fault mix: preemptions, hardware failures, a scale-down and injected hangs."""
    rng = SeededRng(seed).stream("scenario")
    events = []
    for _ in range(int(rng.integers(1, 4))):
        events.append(EventTemplate(int(rng.integers(1, horizon_ms)), EventKind.NodeCrashed, None, FailureKind.Preemption))
    for _ in range(int(rng.integers(0, 3))):
        events.append(EventTemplate(int(rng.integers(1, horizon_ms)), EventKind.NodeCrashed, None, FailureKind.HardwareFailure))
    events.sort(key=lambda e: e.at_ms)
    schedule = []
    if workers > 2 and rng.random() < 0.7:
        schedule.append((int(rng.integers(horizon_ms // 4, horizon_ms)), int(rng.integers(max(1, workers - 3), workers))))
    hangs = []
    for _ in range(int(rng.integers(1, 3))):
        hangs.append(
            HangFault(
                worker=f"n{int(rng.integers(workers))}",
                stage=stages[int(rng.integers(len(stages)))],
                batch=int(rng.integers(max_batches)),
                attempts=None if rng.random() < 0.2 else 1,
            )
        )
    n_spot = workers // 2
    return Scenario(
        seed=seed,
        initial_capacity=(workers - n_spot + 2, n_spot + 2),
        events=tuple(events),
        target_schedule=tuple(schedule),
        worker_faults=WorkerFaults(hangs=tuple(hangs)),
        name=f"random-{seed}",
    )


CANNED = {"steady": steady, "churn": churn, "valley-scale-up": valley_scale_up}
