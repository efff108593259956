"""Elastic controller: failover on node crashes and on-demand/spot scaling."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional, Protocol, TextIO

from .cluster import ClusterEvent, Denied, EventKind, NodeClass, NodeSpec, SimCluster
from .core import ConfigurationError, FailureKind, is_retryable
from .dds import ShardQueue

log = logging.getLogger(__name__)


@dataclass
class ScalePolicy:
    target_workers: int
    priority: float = 1.0
    min_workers: int = 0
    scale_check_interval: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.priority <= 1.0:
            raise ConfigurationError("priority must lie in [0, 1]")
        if self.min_workers > self.target_workers:
            raise ConfigurationError("min_workers must be <= target_workers")


class VerdictStatus(enum.Enum):
    Running = "Running"
    Completed = "Completed"
    FailedUnretryable = "FailedUnretryable"


@dataclass(frozen=True)
class JobVerdict:
    status: VerdictStatus = VerdictStatus.Running
    failure_kind: Optional[FailureKind] = None
    node_id: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.status is not VerdictStatus.Running


@dataclass(frozen=True)
class Action:
    name: str
    args: dict = field(default_factory=dict)


def split_by_priority(target: int, priority: float) -> tuple[int, int]:
    """Split a worker count into (on_demand, spot), rounding on-demand up."""
    if not 0.0 <= priority <= 1.0:
        raise ConfigurationError("priority must lie in [0, 1]")
    # Fraction of the decimal repr keeps 10 * 0.6 from rounding up to 7
    on_demand = math.ceil(target * Fraction(repr(float(priority))))
    return on_demand, target - on_demand


class Launcher(Protocol):
    def start_worker(self, node: NodeSpec) -> None: ...
    def drain_worker(self, node_id: str) -> None: ...
    def worker_finished(self, node_id: str) -> bool: ...


@dataclass
class _Entry:
    node: NodeSpec
    draining: bool = False


class Controller:
    """Processes cluster events and reconcile ticks one at a time."""

    def __init__(
        self,
        policy: ScalePolicy,
        cluster: SimCluster,
        dds: ShardQueue,
        launcher: Launcher,
        action_log: Optional[TextIO] = None,
    ):
        self.policy = policy
        self.cluster = cluster
        self.dds = dds
        self.launcher = launcher
        self._action_log = action_log
        self.verdict = JobVerdict()
        self.workers: dict[str, _Entry] = {}
        self.failovers = 0
        self.actions: list[Action] = []

    # -- helpers ----------------------------------------------------------

    def _act(self, out: list, name: str, **args: Any) -> None:
        action = Action(name, args)
        out.append(action)
        self.actions.append(action)
        if self._action_log is not None:
            self._action_log.write(
                json.dumps({"ts": self.cluster.clock.now_ms(), "action": name, "args": args}) + "\n"
            )

    def _start(self, nodes, out: list) -> None:
        for node in nodes:
            self.workers[node.node_id] = _Entry(node)
            self.dds.register_worker(node.node_id)
            self.launcher.start_worker(node)
            self._act(out, "start_worker", node=node.node_id, node_class=node.node_class.value)

    def _request(self, on_demand: int, spot: int, out: list) -> None:
        result = self.cluster.request_nodes(on_demand, spot)
        if isinstance(result, Denied):
            self._act(
                out, "request", on_demand=on_demand, spot=spot,
                shortfall=[result.shortfall_on_demand, result.shortfall_spot],
            )
            self._start(result.granted, out)
        else:
            self._act(out, "request", on_demand=on_demand, spot=spot)
            self._start(result, out)

    def active(self) -> list[NodeSpec]:
        return [e.node for e in self.workers.values() if not e.draining]

    def set_target(self, target_workers: int) -> None:
        self.policy.target_workers = max(int(target_workers), self.policy.min_workers)

    # -- event handling ---------------------------------------------------

    def handle_event(self, event: ClusterEvent) -> list[Action]:
        out: list[Action] = []
        if self.verdict.terminal:
            return out
        if event.kind is EventKind.NodeCrashed:
            entry = self.workers.pop(event.node_id, None)
            if entry is None:
                log.info("crash of unknown node %s ignored", event.node_id)
                return out
            reclaimed = self.dds.reclaim_worker(event.node_id)
            self._act(out, "reclaim", node=event.node_id, shards=reclaimed)
            if is_retryable(event.failure_kind):
                self.failovers += 1
                if entry.draining:
                    return out
                cls_ = entry.node.node_class
                self._request(int(cls_ is NodeClass.OnDemand), int(cls_ is NodeClass.Spot), out)
            else:
                self.verdict = JobVerdict(VerdictStatus.FailedUnretryable, event.failure_kind, event.node_id)
                self._act(out, "verdict", status=self.verdict.status.value,
                          failure_kind=event.failure_kind.value, node=event.node_id)
        elif event.kind is EventKind.CapacityChanged:
            out.extend(self.reconcile())
        return out

    def reconcile(self) -> list[Action]:
        out: list[Action] = []
        if self.verdict.terminal:
            return out

        for node_id, entry in list(self.workers.items()):
            if entry.draining and self.launcher.worker_finished(node_id):
                leftover = self.dds.reclaim_worker(node_id)
                del self.workers[node_id]
                self.cluster.release_node(node_id)
                self._act(out, "release", node=node_id, reclaimed=leftover)

        active = self.active()
        target = self.policy.target_workers
        surplus = len(active) - target
        if surplus > 0:
            # spot first, newest first within a class
            order = sorted(active, key=lambda n: (n.node_class is NodeClass.OnDemand, -n.ordinal))
            for node in order[:surplus]:
                self.workers[node.node_id].draining = True
                self.launcher.drain_worker(node.node_id)
                self._act(out, "drain", node=node.node_id)
            return out

        if surplus < 0:
            want_od, want_spot = split_by_priority(target, self.policy.priority)
            cur_od = sum(1 for n in active if n.node_class is NodeClass.OnDemand)
            cur_spot = len(active) - cur_od
            avail_od, avail_spot = self.cluster.capacity()
            need_od = min(max(0, want_od - cur_od), avail_od)
            need_spot = min(max(0, want_spot - cur_spot), avail_spot)
            room = target - len(active)
            need_od = min(need_od, room)
            need_spot = min(need_spot, room - need_od)
            if need_od or need_spot:
                self._request(need_od, need_spot, out)
        return out
