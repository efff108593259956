import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from batchinfer.cli import main
from batchinfer.cluster import Scenario
from batchinfer.jobspec import parse_job
from batchinfer.runner import run_job
from helpers import write_job


@pytest.fixture
def data10k(tmp_path):
    assert main(["gen-data", "--size", "10000", "--seed", "1", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def scenario_file(path: Path, **fields) -> Path:
    d = {"seed": 0, "initial_capacity": {"on_demand": 8, "spot": 0}}
    d.update(fields)
    path.write_text(json.dumps(d))
    return path


def output_bytes(run_dir: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted((run_dir / "output").glob("shard-*.jsonl"))}


def test_gen_data_manifest_hash_is_stable(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        assert main(["gen-data", "--size", "500", "--seed", "9", "--out", str(tmp_path / name)]) == 0
        hashes.append(capsys.readouterr().out.split("manifest sha256 ")[1].strip())
    assert hashes[0] == hashes[1] and len(hashes[0]) == 64


def test_happy_path_run_and_verify(tmp_path, data10k, capsys):
    job = write_job(tmp_path / "job.yaml", data10k, engine={"worker_num": 2},
                    data={"shard_size": 500, "batch_size": 50})
    out = tmp_path / "run"
    code = main(["run", "--job", str(job), "--scenario", "steady", "--out", str(out), "--time-scale", "0.01"])
    summary = json.loads(capsys.readouterr().out)
    assert code == 0
    assert summary["jct_ms"] > 0 and summary["integrity_passed"] and summary["records"] == 10_000
    for f in ("job.json", "scenario.json", "run.json", "metrics.csv", "dds_transcript.jsonl",
              "cluster_events.jsonl", "actions.jsonl", "summary.json", "integrity.json"):
        assert (out / f).exists(), f
    assert main(["verify", "--data", str(data10k), "--output", str(out)]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_verify_fails_on_deleted_shard(tmp_path, data10k, capsys):
    job = write_job(tmp_path / "job.yaml", data10k, data={"shard_size": 1000, "batch_size": 100})
    out = tmp_path / "run"
    assert main(["run", "--job", str(job), "--out", str(out), "--time-scale", "0.01"]) == 0
    (out / "output" / "shard-3.jsonl").unlink()
    capsys.readouterr()
    assert main(["verify", "--data", str(data10k), "--output", str(out / "output")]) == 1
    text = capsys.readouterr().out
    assert text.strip().endswith("FAIL") and '"missing": [\n    3000' in text


def test_config_error_exits_3(tmp_path, data10k, capsys):
    job = write_job(tmp_path / "job.yaml", data10k, engine={"worker_num": 2},
                    data={"shard_size": 100, "batch_size": 50},
                    runner={"pipeline": [{"node_id": "m", "cost_per_record_ms": 1.0}]})
    sc = scenario_file(tmp_path / "s.json", events=[
        {"at_ms": 1000, "kind": "NodeCrashed", "node": "n1", "failure_kind": "ConfigError"}])
    code = main(["run", "--job", str(job), "--scenario", str(sc), "--out", str(tmp_path / "run"),
                 "--time-scale", "0.01"])
    summary = json.loads(capsys.readouterr().out)
    assert code == 3
    assert (summary["verdict"], summary["failure_kind"], summary["failed_node"]) == \
        ("FailedUnretryable", "ConfigError", "n1")


def test_schema_error_exits_2_with_line(tmp_path, data10k, capsys):
    job = tmp_path / "job.yaml"
    job.write_text("data:\n  source_path: data\n  shard_size: -1\nrunner:\n  pipeline: [{node_id: m}]\n")
    assert main(["run", "--job", str(job), "--out", str(tmp_path / "run")]) == 2
    assert capsys.readouterr().err.startswith(f"{job}:3: data.shard_size:")


def test_bad_scenario_exits_2(tmp_path, data10k, capsys):
    job = write_job(tmp_path / "job.yaml", data10k)
    bad = tmp_path / "s.json"
    bad.write_text('{"events": [{"at_ms": 1, "kind": "Explode"}]}')
    assert main(["run", "--job", str(job), "--scenario", str(bad), "--out", str(tmp_path / "run")]) == 2


def _even_job(tmp_path, data):
    return write_job(tmp_path / "even.yaml", data, engine={"worker_num": 4},
                     data={"shard_size": 250, "batch_size": 25},
                     runner={"pipeline": [{"node_id": "det", "fanout": {"kind": "poisson", "value": 2},
                                           "failure_rate": 0.05},
                                          {"node_id": "cls", "inputs": ["det"]}]},
                     sharding_mode="EvenPartition")


def test_even_partition_runs_are_identical(tmp_path, data10k):
    job = _even_job(tmp_path, data10k)
    for name in ("r1", "r2"):
        assert main(["run", "--job", str(job), "--out", str(tmp_path / name), "--seed", "5",
                     "--time-scale", "0.01"]) == 0
    a, b = output_bytes(tmp_path / "r1"), output_bytes(tmp_path / "r2")
    assert len(a) == 40 and a == b


def test_run_directory_is_self_describing(tmp_path, data10k):
    job = _even_job(tmp_path, data10k)
    first = tmp_path / "first"
    assert main(["run", "--job", str(job), "--out", str(first), "--seed", "5", "--time-scale", "0.01"]) == 0
    # rebuild the run using only what the run directory holds
    job2 = parse_job((first / "job.json").read_text())
    sc2 = Scenario.load(first / "scenario.json")
    run = json.loads((first / "run.json").read_text())
    res = run_job(job2, sc2, tmp_path / "second", seed=run["seed"], time_scale=run["time_scale"])
    assert res.exit_code == 0
    assert output_bytes(first) == output_bytes(tmp_path / "second")


def test_report_prints_speedup(tmp_path, data10k, capsys):
    runs = []
    for mode in ("EvenPartition", "DDS"):
        job = write_job(tmp_path / f"{mode}.yaml", data10k, engine={"worker_num": 2},
                        data={"shard_size": 500, "batch_size": 50}, sharding_mode=mode)
        out = tmp_path / mode
        assert main(["run", "--job", str(job), "--out", str(out), "--time-scale", "0.01"]) == 0
        runs.append(out)
    capsys.readouterr()
    assert main(["report", *map(str, runs), "--plot-dir", str(tmp_path / "plots")]) == 0
    text = capsys.readouterr().out
    ja, jb = (json.loads((r / "summary.json").read_text())["jct_ms"] for r in runs)
    assert f"speedup JCT(EvenPartition)/JCT(DDS) = {ja / jb:.3f}" in text
    assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == ["DDS.png", "EvenPartition.png"]


def test_module_entry_point_and_log_env(tmp_path):
    env = dict(os.environ, BATCHINFER_LOG="info")
    r = subprocess.run([sys.executable, "-m", "batchinfer", "gen-data", "--size", "3", "--out", str(tmp_path / "d")],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "wrote 3 records" in r.stdout
    r = subprocess.run([sys.executable, "-m", "batchinfer", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
