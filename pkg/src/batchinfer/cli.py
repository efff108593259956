"""Command line entry point: ``batchinfer run | gen-data | verify | report``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import cluster as cl
from . import metrics as m
from .io import DatasetManifest, generate_dataset, verify_output
from .jobspec import JobSpecError, load_job
from .runner import EXIT_OK, EXIT_SCHEMA, run_job

log = logging.getLogger("batchinfer")


def _load_scenario(arg: str | None, seed: int | None) -> cl.Scenario:
    if arg is None:
        return cl.steady(seed or 0)
    if arg in cl.CANNED:
        return cl.CANNED[arg](seed or 0)
    return cl.Scenario.load(arg)


def cmd_run(args) -> int:
    try:
        job = load_job(args.job)
    except JobSpecError as e:
        for d in e.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as e:
        print(f"{args.job}: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        scenario = _load_scenario(args.scenario, args.seed)
    except (OSError, ValueError, KeyError) as e:
        print(f"{args.scenario}: invalid scenario: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    result = run_job(job, scenario, args.out, seed=args.seed, time_scale=args.time_scale, max_wall_s=args.max_wall)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return result.exit_code


def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.size, args.payload_bytes, args.seed, args.out, args.records_per_file)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"wrote {manifest.dataset_size} records in {len(manifest.files)} file(s) to {args.out}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def cmd_verify(args) -> int:
    manifest = DatasetManifest.load(args.data)
    sink = Path(args.output)
    if (sink / "output").is_dir():
        sink = sink / "output"
    report = verify_output(manifest, sink)
    print(json.dumps(report.to_json() | {"missing": report.missing[:20], "duplicates": report.duplicates[:20]}, indent=2))
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else 1


def _plot(run_dir: Path, windows, plot_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    t = [w.start / 1000 for w in windows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(t, [w.qps for w in windows])
    ax1.set_ylabel("records/s")
    ax1.set_title(run_dir.name)
    stages = sorted({s for w in windows for s in w.executors})
    for s in stages:
        ax2.step(t, [w.executors.get(s, 0) for w in windows], where="post", label=s)
    ax2.set_ylabel("executors")
    ax2.set_xlabel("time (s)")
    if stages:
        ax2.legend(loc="upper right", fontsize="small")
    out = plot_dir / f"{run_dir.name}.png"
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return [out]


def cmd_report(args) -> int:
    summaries = []
    for d in args.runs:
        run_dir = Path(d)
        summary = json.loads((run_dir / "summary.json").read_text())
        samples = m.read_csv(run_dir / "metrics.csv")
        windows = m.aggregate(samples, args.window, end=max(summary["jct_ms"], 1))
        summaries.append((run_dir, summary))
        print(f"{run_dir}: jct_ms={summary['jct_ms']} qps_mean={summary['qps_mean']:.1f} "
              f"qps_peak={summary['qps_peak']:.1f} restarts={summary['restarts']} "
              f"failovers={summary['failovers']} error_rows={summary['error_rows']}")
        if not args.no_plot:
            for p in _plot(run_dir, windows, Path(args.plot_dir) if args.plot_dir else run_dir):
                print(f"  plot: {p}")
    if len(summaries) == 2:
        (a, sa), (b, sb) = summaries
        if sb["jct_ms"] > 0:
            print(f"speedup JCT({a.name})/JCT({b.name}) = {sa['jct_ms'] / sb['jct_ms']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchinfer", description="Elastic batch inference on a simulated cluster")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a job to completion")
    r.add_argument("--job", required=True)
    r.add_argument("--scenario", help="scenario JSON file or canned name: " + ", ".join(cl.CANNED))
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--time-scale", type=float, default=1.0)
    r.add_argument("--max-wall", type=float, default=None, help="give up after this many real seconds")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--payload-bytes", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--records-per-file", type=int, default=100_000)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("verify", help="check a run's output against its dataset")
    v.add_argument("--data", required=True, help="dataset directory or manifest.json")
    v.add_argument("--output", required=True, help="run directory or its output/ directory")
    v.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="summarize runs and plot their metrics")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--window", type=int, default=1000, help="aggregation window in ms")
    rep.add_argument("--plot-dir")
    rep.add_argument("--no-plot", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BATCHINFER_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
