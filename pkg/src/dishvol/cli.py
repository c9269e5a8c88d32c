"""Command line interface.

Subcommands: ``synth`` (generate scene directories with ground truth),
``estimate`` (one image pair to a volume report), ``batch`` (a directory
of pairs to JSON-lines estimate records), and ``metrics`` (records plus
ground truth to MAPE/CV tables, CSV, and figures).

Exit codes: 0 success, 2 input error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import DishvolError, PipelineError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    from .synth import SceneSpec, make_test_scenes, write_scene_dir

    out = Path(args.out)
    if args.spec:
        spec = SceneSpec.from_json_dict(json.loads(Path(args.spec).read_text()))
        write_scene_dir(spec, out)
        print(f"wrote scene to {out}")
        return EXIT_OK
    scenes = make_test_scenes(args.count, master_seed=args.seed or 0)
    for name, spec in scenes:
        write_scene_dir(spec, out / name)
    print(f"wrote {len(scenes)} scenes under {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .pipeline import report_to_json, run_pipeline

    cfg = _load_cfg(args)
    report, artifacts = run_pipeline(args.pair_dir, cfg, seed=cfg.seed)
    text = report_to_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    timings = report.diagnostics.get("timings_s", {})
    print(f"total volume: {report.total_ml:.2f} mL "
          f"(stages: {timings})", file=sys.stderr)
    if args.debug_dir:
        from .report import render_debug_artifacts
        written = render_debug_artifacts(artifacts, report, args.debug_dir)
        print("debug artifacts: " + ", ".join(str(p) for p in written),
              file=sys.stderr)
    return EXIT_OK


def _batch_one(job):
    """Worker: one (pair_dir, run_index) estimate; must stay picklable."""
    pair_dir, run, config_dict, base_seed = job
    from .config import config_from_dict
    from .pipeline import run_pipeline

    cfg = config_from_dict(config_dict)
    name = Path(pair_dir).name
    seed = int(zlib.crc32(f"{base_seed}:{name}:{run}".encode()) & 0x7FFFFFFF)
    try:
        report, _ = run_pipeline(pair_dir, cfg, seed=seed)
        records = [{"pair": name, "run": run, "label": int(k),
                    "volume_ml": float(v)}
                   for k, v in sorted(report.items.items())]
        return name, run, records, None
    except DishvolError as exc:
        return name, run, [], str(exc)


def cmd_batch(args) -> int:
    cfg = _load_cfg(args)
    root = Path(args.root)
    pair_dirs = sorted(d for d in root.iterdir()
                       if d.is_dir() and (d / "img1.png").exists())
    if not pair_dirs:
        raise FileNotFoundError(f"no pair directories under {root}")
    jobs = [(str(d), run, cfg.to_json_dict(), cfg.seed)
            for d in pair_dirs for run in range(args.repeats)]

    results = []
    failures = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for name, run, recs, err in pool.map(_batch_one, jobs):
                (failures if err else results).append(
                    (name, run, recs, err))
    else:
        for job in jobs:
            name, run, recs, err = _batch_one(job)
            (failures if err else results).append((name, run, recs, err))

    results.sort(key=lambda r: (r[0], r[1]))
    lines = [json.dumps(rec) for _, _, recs, _ in results for rec in recs]
    Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} records for {len(pair_dirs)} pairs x "
          f"{args.repeats} runs to {args.out}", file=sys.stderr)
    for name, run, _, err in sorted(failures):
        print(f"FAILED {name} run {run}: {err}", file=sys.stderr)

    if args.truth_out:
        truth = {}
        for d in pair_dirs:
            gt = d / "ground_truth.json"
            if gt.exists():
                truth[d.name] = json.loads(gt.read_text())["volumes_ml"]
        Path(args.truth_out).write_text(json.dumps(truth, indent=2,
                                                   sort_keys=True))
    if failures and not results:
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import compute_metrics, load_records
    from .report import render_metrics_report, write_metrics_csv

    records = load_records(args.records)
    truth = json.loads(Path(args.truth).read_text())
    report = compute_metrics(records, truth)
    out = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(out + "\n")
    else:
        print(out)
    if args.csv:
        write_metrics_csv(report, args.csv)
    if args.fig_dir:
        written = render_metrics_report(report, args.fig_dir)
        print("figures: " + ", ".join(str(p) for p in written),
              file=sys.stderr)
    print(f"MAPE_overall = {report.overall_mape:.2f}% over "
          f"{len(report.items)} items", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dishvol",
        description="Food volume estimation from two images of a dish")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate synthetic scene directories")
    ps.add_argument("--out", required=True)
    ps.add_argument("--count", type=int, default=21)
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--spec", default=None,
                    help="render a single scene from a JSON spec")
    ps.set_defaults(fn=cmd_synth)

    pe = sub.add_parser("estimate", help="estimate volumes for one pair")
    pe.add_argument("--pair-dir", required=True)
    pe.add_argument("--config", default=None)
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--out", default=None)
    pe.add_argument("--debug-dir", default=None)
    pe.set_defaults(fn=cmd_estimate)

    pb = sub.add_parser("batch", help="run every pair under a directory")
    pb.add_argument("--root", required=True)
    pb.add_argument("--out", required=True)
    pb.add_argument("--repeats", type=int, default=1)
    pb.add_argument("--workers", type=int, default=1)
    pb.add_argument("--config", default=None)
    pb.add_argument("--seed", type=int, default=None)
    pb.add_argument("--truth-out", default=None)
    pb.set_defaults(fn=cmd_batch)

    pm = sub.add_parser("metrics", help="aggregate records against truth")
    pm.add_argument("--records", required=True)
    pm.add_argument("--truth", required=True)
    pm.add_argument("--out", default=None)
    pm.add_argument("--csv", default=None)
    pm.add_argument("--fig-dir", default=None)
    pm.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (FileNotFoundError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DishvolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
