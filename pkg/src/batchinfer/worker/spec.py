"""Pipeline configuration: stages, predictor DAG nodes and autoscaler knobs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from ..core import ConfigurationError

LOADER = "loader"
WRITER = "writer"


@dataclass(frozen=True)
class Fanout:
    """Outputs-per-input distribution of a synthetic model.

    kind is "constant" (always ``value``), "poisson" (mean ``value``) or
    "uniform" (integer in [low, high]).
    """

    kind: str = "constant"
    value: float = 1.0
    low: int = 0
    high: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "poisson", "uniform"):
            raise ConfigurationError(f"unknown fanout kind {self.kind!r}")
        if self.kind == "constant" and (self.value < 0 or int(self.value) != self.value):
            raise ConfigurationError("constant fanout must be a non-negative integer")
        if self.kind == "poisson" and self.value < 0:
            raise ConfigurationError("poisson fanout mean must be >= 0")
        if self.kind == "uniform" and not 0 <= self.low <= self.high:
            raise ConfigurationError("uniform fanout needs 0 <= low <= high")

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        return float(self.value)

    def draw(self, u: float) -> int:
        """Inverse-CDF draw from a uniform ``u`` in [0, 1)."""
        if self.kind == "constant":
            return int(self.value)
        if self.kind == "uniform":
            return self.low + min(int(u * (self.high - self.low + 1)), self.high - self.low)
        lam = self.value
        p = math.exp(-lam)
        cdf = p
        k = 0
        while u >= cdf and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return k


@dataclass(frozen=True)
class SyntheticModel:
    cost_per_record: float = 0.0  # scenario ms
    failure_rate: float = 0.0
    fanout: Fanout = field(default_factory=Fanout)

    def __post_init__(self):
        if self.cost_per_record < 0:
            raise ConfigurationError("cost_per_record must be >= 0")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ConfigurationError("failure_rate must lie in [0, 1]")


@dataclass(frozen=True)
class PredictorNode:
    node_id: str
    model: SyntheticModel = field(default_factory=SyntheticModel)
    target_batch_size: int = 1
    executors: int = 1
    max_executors: int = 1
    device_demand: int = 1
    inputs: tuple[str, ...] = ()  # parent nodes; empty means fed by the loader

    def __post_init__(self):
        if self.node_id in (LOADER, WRITER):
            raise ConfigurationError(f"node id {self.node_id!r} is reserved")
        if self.target_batch_size < 1:
            raise ConfigurationError("target_batch_size must be >= 1")
        if not 1 <= self.executors <= self.max_executors:
            raise ConfigurationError(f"node {self.node_id}: need 1 <= executors <= max_executors")
        if self.device_demand < 0:
            raise ConfigurationError("device_demand must be >= 0")


@dataclass(frozen=True)
class StageConfig:
    cost_per_record: float = 0.0  # scenario ms
    initial_executors: int = 1
    max_executors: int = 1

    def __post_init__(self):
        if not 1 <= self.initial_executors <= self.max_executors:
            raise ConfigurationError("need 1 <= initial_executors <= max_executors")
        if self.cost_per_record < 0:
            raise ConfigurationError("cost_per_record must be >= 0")


@dataclass(frozen=True)
class AutoscaleConfig:
    enabled: bool = False
    low_watermark: float = 0.1
    high_watermark: float = 0.9
    util_threshold: float = 0.7
    consecutive_ticks: int = 3
    tick_interval: float = 100.0  # scenario ms
    cooldown_ticks: int = 5

    def __post_init__(self):
        if not 0.0 <= self.low_watermark < self.high_watermark <= 1.0:
            raise ConfigurationError("need 0 <= low_watermark < high_watermark <= 1")
        if self.consecutive_ticks < 1:
            raise ConfigurationError("consecutive_ticks must be >= 1")
        if self.tick_interval <= 0:
            raise ConfigurationError("tick_interval must be > 0")
        if self.cooldown_ticks < 0:
            raise ConfigurationError("cooldown_ticks must be >= 0")


@dataclass(frozen=True)
class PipelineSpec:
    nodes: tuple[PredictorNode, ...]
    loader: StageConfig = field(default_factory=StageConfig)
    writer: StageConfig = field(default_factory=StageConfig)
    queue_capacity: int = 4
    batch_size: int = 16
    devices: Optional[int] = None  # abstract device units per worker
    timeout_ms: float = 0.0  # 0 disables timeout-retry
    max_retries: int = 2
    autoscale: AutoscaleConfig = field(default_factory=AutoscaleConfig)
    seed: int = 0
    sequential: bool = False  # baseline: one executor runs all stages back to back

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ConfigurationError("queue_capacity must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.nodes:
            raise ConfigurationError("pipeline needs at least one predictor node")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate predictor node ids")
        known = set(ids)
        for n in self.nodes:
            for p in n.inputs:
                if p not in known:
                    raise ConfigurationError(f"node {n.node_id} reads from unknown node {p!r}")
        self.topo_order()  # raises on cycles
        sinks = [n for n in ids if not self.children(n)]
        if len(sinks) != 1:
            raise ConfigurationError(f"pipeline DAG must have exactly one sink, found {sinks}")
        demand = sum(n.executors * n.device_demand for n in self.nodes)
        if demand > self.device_units:
            raise ConfigurationError(f"initial executors need {demand} device units, only {self.device_units}")

    @property
    def device_units(self) -> int:
        if self.devices is not None:
            return self.devices
        return sum(n.executors * n.device_demand for n in self.nodes)

    def node(self, node_id: str) -> PredictorNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def children(self, node_id: str) -> list[str]:
        return [n.node_id for n in self.nodes if node_id in n.inputs]

    def roots(self) -> list[str]:
        return [n.node_id for n in self.nodes if not n.inputs]

    @property
    def sink(self) -> str:
        return next(n.node_id for n in self.nodes if not self.children(n.node_id))

    def topo_order(self) -> list[str]:
        indeg = {n.node_id: len(n.inputs) for n in self.nodes}
        ready = [n.node_id for n in self.nodes if not n.inputs]
        order = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for c in self.children(cur):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise ConfigurationError("pipeline DAG has a cycle")
        return order
