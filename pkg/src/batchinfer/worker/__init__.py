"""Per-node worker: staged pipeline, predictor DAG, autoscaler, timeout-retry."""

from .autoscale import Autoscaler, Observation, ScaleAction
from .ensemble import Ensemble
from .runtime import StageQueue, Worker
from .spec import (
    LOADER,
    WRITER,
    AutoscaleConfig,
    Fanout,
    PipelineSpec,
    PredictorNode,
    StageConfig,
    SyntheticModel,
)
from .synthetic import DEGRADED, Attempt, BatchTimeout, Halted, Item, execute_batch, timeout_retry

__all__ = [
    "LOADER", "WRITER", "Attempt", "AutoscaleConfig", "Autoscaler", "BatchTimeout", "DEGRADED",
    "Ensemble", "Fanout", "Halted", "Item", "Observation", "PipelineSpec", "PredictorNode",
    "ScaleAction", "StageConfig", "StageQueue", "SyntheticModel", "Worker", "execute_batch",
    "timeout_retry",
]
