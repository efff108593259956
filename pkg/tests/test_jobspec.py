import json

import pytest

from batchinfer.dds import ShardingMode
from batchinfer.jobspec import JobSpecError, load_job, parse_job

GOOD = """\
engine:
  worker_num: 4
  priority: 0.6
  devices: 2
data:
  source_path: data
  num_workers: 2
  max_workers: 4
  shard_size: 100
  batch_size: 8
writer:
  writer_num: 1
runner:
  pipeline:
    - node_id: det
      cost_per_record_ms: 4
      fanout: {kind: poisson, value: 3}
    - node_id: cls
      cost_per_record_ms: 1
      inputs: [det]
      target_batch_size: 16
  predictor_num: 1
  autoscale:
    enabled: true
    consecutive_ticks: 2
  timeout_ms: 500
sharding_mode: EvenPartition
"""


def diag_lines(text):
    with pytest.raises(JobSpecError) as ei:
        parse_job(text, "job.yaml")
    return ei.value.diagnostics


def test_parse_good():
    job = parse_job(GOOD)
    assert job.sharding_mode is ShardingMode.EvenPartition
    p = job.pipeline_spec(seed=3)
    assert [n.node_id for n in p.nodes] == ["det", "cls"]
    assert p.node("det").target_batch_size == 8 and p.node("cls").target_batch_size == 16
    assert p.node("det").model.fanout.mean == 3.0
    assert (p.loader.initial_executors, p.loader.max_executors) == (2, 4)
    assert p.autoscale.enabled and p.autoscale.consecutive_ticks == 2
    assert (p.timeout_ms, p.devices, p.seed) == (500, 2, 3)


def test_json_round_trip():
    job = parse_job(GOOD)
    assert parse_job(json.dumps(job.to_json())) == job


def test_unknown_field_points_at_its_line():
    text = GOOD.replace("  batch_size: 8\n", "  batch_size: 8\n  batchsize: 9\n")
    (d,) = diag_lines(text)
    assert d.startswith("job.yaml:11: data.batchsize:")


def test_bad_type_in_nested_list():
    text = GOOD.replace("cost_per_record_ms: 1\n", "cost_per_record_ms: fast\n")
    (d,) = diag_lines(text)
    assert d.startswith("job.yaml:19: runner.pipeline.1.cost_per_record_ms:")


def test_out_of_range_priority():
    (d,) = diag_lines(GOOD.replace("priority: 0.6", "priority: 1.6"))
    assert d.startswith("job.yaml:3: engine.priority:")


def test_missing_required_field():
    (d,) = diag_lines(GOOD.replace("  shard_size: 100\n", ""))
    assert d.startswith("job.yaml:5: data.shard_size:") and "required" in d.lower()


def test_several_errors_reported_together():
    text = GOOD.replace("priority: 0.6", "priority: 2").replace("batch_size: 8", "batch_size: 0")
    ds = diag_lines(text)
    assert [d.split(":")[1] for d in ds] == ["3", "10"]


def test_dag_error_located_at_pipeline():
    text = GOOD.replace("inputs: [det]", "inputs: [nope]")
    (d,) = diag_lines(text)
    assert d.startswith("job.yaml:14: runner.pipeline:") and "nope" in d


def test_watermark_order():
    text = GOOD.replace("    enabled: true\n", "    enabled: true\n    low_watermark: 0.95\n")
    (d,) = diag_lines(text)
    assert "low_watermark" in d and d.startswith("job.yaml:23: runner.autoscale:")


def test_yaml_syntax_error_line():
    (d,) = diag_lines(GOOD.replace("  num_workers: 2", "  num_workers: [2"))
    assert d.startswith("job.yaml:") and "parse error" in d


def test_not_a_mapping():
    assert diag_lines("- 1\n- 2\n") == ["job.yaml:1: job spec must be a mapping"]


def test_load_job_resolves_source_relative_to_file(tmp_path):
    (tmp_path / "jobs").mkdir()
    p = tmp_path / "jobs" / "j.yaml"
    p.write_text(GOOD)
    assert load_job(p).data.source_path == str((tmp_path / "jobs" / "data").resolve())


def test_shipped_examples_are_valid():
    from pathlib import Path

    from batchinfer.cluster import Scenario

    root = Path(__file__).parent.parent / "jobs"
    for p in sorted(root.glob("*.yaml")):
        load_job(p).pipeline_spec()
    sc = Scenario.load(root / "scenarios" / "faults.json")
    assert sc.straggler_profile == {3: 0.5} and sc.target_schedule == ((8000, 3),)
