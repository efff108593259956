"""Job specification file schema.

A job file (JSON or YAML) has four sections mirroring the user-facing
configuration objects: ``engine`` (resources), ``data`` (source and loader
concurrency), ``writer`` (sink and writer concurrency) and ``runner``
(predictor DAG, concurrency, autoscaler). Fields beyond those, such as
timeouts, watermarks and synthetic costs, are extensions of this artifact.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import ConfigurationError
from .dds import ShardingMode
from .worker.spec import AutoscaleConfig, Fanout, PipelineSpec, PredictorNode, StageConfig, SyntheticModel


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EngineConfig(_Model):
    worker_num: int = Field(1, ge=0)
    priority: float = Field(1.0, ge=0.0, le=1.0)
    cpu: int = Field(1, ge=1)
    memory: int = Field(1024, ge=0)
    devices: Optional[int] = Field(None, ge=0)
    min_workers: int = Field(0, ge=0)
    scale_check_interval_ms: float = Field(1000.0, gt=0)


class DataConfig(_Model):
    source_path: str
    num_workers: int = Field(1, ge=1)
    max_workers: Optional[int] = Field(None, ge=1)
    shard_size: int = Field(ge=1)
    batch_size: int = Field(16, ge=1)
    preprocess_cost_ms: float = Field(0.0, ge=0)


class WriterConfig(_Model):
    output_path: Optional[str] = None
    writer_num: int = Field(1, ge=1)
    max_writers: Optional[int] = Field(None, ge=1)
    write_cost_ms: float = Field(0.0, ge=0)


class FanoutConfig(_Model):
    kind: Literal["constant", "poisson", "uniform"] = "constant"
    value: float = 1.0
    low: int = 0
    high: int = 0


class PredictorConfig(_Model):
    node_id: str
    cost_per_record_ms: float = Field(0.0, ge=0)
    failure_rate: float = Field(0.0, ge=0.0, le=1.0)
    fanout: Union[FanoutConfig, int] = 1
    target_batch_size: Optional[int] = Field(None, ge=1)
    executors: Optional[int] = Field(None, ge=1)
    max_executors: Optional[int] = Field(None, ge=1)
    device_demand: int = Field(1, ge=0)
    inputs: list[str] = []


class AutoscaleSection(_Model):
    enabled: bool = False
    low_watermark: float = Field(0.1, ge=0.0, le=1.0)
    high_watermark: float = Field(0.9, ge=0.0, le=1.0)
    util_threshold: float = Field(0.7, ge=0.0, le=1.0)
    consecutive_ticks: int = Field(3, ge=1)
    tick_interval_ms: float = Field(100.0, gt=0)
    cooldown_ticks: int = Field(5, ge=0)

    @model_validator(mode="after")
    def _watermarks(self):
        if self.low_watermark >= self.high_watermark:
            raise ValueError("low_watermark must be below high_watermark")
        return self


class RunnerConfig(_Model):
    pipeline: list[PredictorConfig] = Field(min_length=1)
    predictor_num: int = Field(1, ge=1)
    autoscale: AutoscaleSection = AutoscaleSection()
    timeout_ms: float = Field(0.0, ge=0)
    max_retries: int = Field(2, ge=0)
    queue_capacity: int = Field(4, ge=1)
    sequential: bool = False
    seed: Optional[int] = None


class JobSpec(_Model):
    engine: EngineConfig = EngineConfig()
    data: DataConfig
    writer: WriterConfig = WriterConfig()
    runner: RunnerConfig
    sharding_mode: ShardingMode = ShardingMode.DDS

    @field_validator("sharding_mode", mode="before")
    @classmethod
    def _mode(cls, v):
        return ShardingMode(v) if isinstance(v, str) else v

    def to_json(self) -> dict:
        return self.model_dump(mode="json")

    def pipeline_spec(self, seed: int = 0) -> PipelineSpec:
        r = self.runner
        nodes = []
        for p in r.pipeline:
            fan = Fanout(kind="constant", value=p.fanout) if isinstance(p.fanout, int) else Fanout(**p.fanout.model_dump())
            executors = p.executors or r.predictor_num
            nodes.append(
                PredictorNode(
                    node_id=p.node_id,
                    model=SyntheticModel(p.cost_per_record_ms, p.failure_rate, fan),
                    target_batch_size=p.target_batch_size or self.data.batch_size,
                    executors=executors,
                    max_executors=max(p.max_executors or executors, executors),
                    device_demand=p.device_demand,
                    inputs=tuple(p.inputs),
                )
            )
        a = r.autoscale
        return PipelineSpec(
            nodes=tuple(nodes),
            loader=StageConfig(
                self.data.preprocess_cost_ms,
                self.data.num_workers,
                max(self.data.max_workers or self.data.num_workers, self.data.num_workers),
            ),
            writer=StageConfig(
                self.writer.write_cost_ms,
                self.writer.writer_num,
                max(self.writer.max_writers or self.writer.writer_num, self.writer.writer_num),
            ),
            queue_capacity=r.queue_capacity,
            batch_size=self.data.batch_size,
            devices=self.engine.devices,
            timeout_ms=r.timeout_ms,
            max_retries=r.max_retries,
            autoscale=AutoscaleConfig(
                a.enabled, a.low_watermark, a.high_watermark, a.util_threshold,
                a.consecutive_ticks, a.tick_interval_ms, a.cooldown_ticks,
            ),
            seed=r.seed if r.seed is not None else seed,
            sequential=r.sequential,
        )


class JobSpecError(ConfigurationError):
    """Schema violation; ``diagnostics`` holds one "file:line: message" entry per problem."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            _line_map(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


def _locate(lines: dict, loc: tuple) -> int:
    loc = tuple(x for x in loc if not (isinstance(x, str) and x in ("FanoutConfig", "int", "function-after")))
    for n in range(len(loc), -1, -1):
        if loc[:n] in lines:
            return lines[loc[:n]]
    return 1


def parse_job(text: str, source: str = "<job>") -> JobSpec:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise JobSpecError([f"{source}:{line}: parse error: {getattr(e, 'problem', e)}"]) from e
    if not isinstance(data, dict):
        raise JobSpecError([f"{source}:1: job spec must be a mapping"])
    lines = _line_map(node)
    try:
        job = JobSpec.model_validate(data)
    except ValidationError as e:
        diags = []
        for err in e.errors():
            loc = tuple(err["loc"])
            where = ".".join(str(x) for x in loc) or "<root>"
            diags.append(f"{source}:{_locate(lines, loc)}: {where}: {err['msg']}")
        raise JobSpecError(diags) from e
    try:
        job.pipeline_spec()
    except ConfigurationError as e:
        raise JobSpecError([f"{source}:{_locate(lines, ('runner', 'pipeline'))}: runner.pipeline: {e}"]) from e
    return job


def load_job(path: Union[str, Path]) -> JobSpec:
    path = Path(path)
    job = parse_job(path.read_text(), str(path))
    src = Path(job.data.source_path)
    if not src.is_absolute():
        job.data.source_path = str((path.parent / src).resolve())
    return job
