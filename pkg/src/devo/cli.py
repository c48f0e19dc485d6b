"""Command-line entry point: ``devo run|synth|eval|convert``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

from . import evaluation, io, pipeline, synth
from .errors import ConfigError, DatasetError, DevoError, ParseError
from .pipeline import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, PipelineConfig

log = logging.getLogger("devo")

DEFAULT_BG_RATE = 5000.0 / (640 * 480)


def _setup_logging():
    level = os.environ.get("DEVO_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load_config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = pipeline.run(args.dataset, cfg, args.output, deterministic=args.deterministic)
    stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
    print(result.message, file=stream)
    if result.trajectory_path is not None:
        print(f"trajectory: {result.trajectory_path}")
        print(f"diagnostics: {result.diagnostics_path}")
    return result.exit_code


def cmd_synth(args) -> int:
    try:
        cfg = _load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.duration <= 0 or args.depth_rate <= 0:
        print("config error: duration and depth rate must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if args.events_per_crossing < 1:
        print("config error: events per crossing must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.seed if args.seed is None else args.seed
    scene = synth.default_scene(seed)
    noise = synth.NoiseConfig(bg_rate=args.bg_rate, jitter_px=args.jitter, seed=seed)
    root, n = synth.write_dataset(args.output, scene, duration_s=args.duration,
                                  depth_rate=args.depth_rate, noise=noise,
                                  events_per_crossing=args.events_per_crossing)
    print(f"wrote {n} events to {root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = io.read_trajectory(args.est)
        gt = io.read_trajectory(args.gt)
        t_ate = evaluation.ate(est, gt, max_dt=args.max_dt)
        intervals = evaluation.rpe_intervals(est, gt, delta_t=args.rpe_dt, max_dt=args.max_dt)
    except (OSError, DevoError, ValueError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    r_rpe, t_rpe = intervals.rmse
    print(f"{r_rpe:.6f},{t_rpe:.6f},{t_ate:.6f}")
    if args.intervals:
        with open(args.intervals, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_start_s", "t_end_s", "R_rpe_deg_s", "t_rpe_cm_s"])
            for row in zip(intervals.t_start, intervals.t_end, intervals.rot_deg_s,
                           intervals.trans_cm_s):
                w.writerow([f"{v:.6f}" for v in row])
    return EXIT_OK


def cmd_convert(args) -> int:
    # Only the native format is understood; conversion re-validates and
    # rewrites it into a self-contained directory.
    try:
        ds = io.load_dataset(args.input)
        events = ds.events()
    except (DatasetError, ParseError, ValueError, OSError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    out = io.ensure_dir(args.output)
    io.write_events(out / "events.txt", events)
    io.ensure_dir(out / "depth")
    entries = []
    for i, t in enumerate(ds.depth.timestamps):
        name = f"depth/{int(t):010d}.pgm"
        shutil.copyfile(ds.depth.path(i), out / name)
        entries.append((int(t), name))
    io.write_depth_index(out / "depth.txt", entries)
    io.write_calibration(out / "calibration.json", ds.cam_e, ds.cam_d, ds.calib)
    gt_name = None
    if ds.groundtruth is not None:
        gt_name = "groundtruth.txt"
        io.write_trajectory(out / gt_name, ds.groundtruth)
    io.write_manifest(out, groundtruth=gt_name)
    print(f"converted {len(events)} events, {len(entries)} depth frames to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devo", description="Depth-event visual odometry.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="track a dataset")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--config", type=Path, help="pipeline config JSON")
    p.add_argument("--output", type=Path, default=Path("devo_out"))
    p.add_argument("--deterministic", action="store_true",
                   help="build keyframes inline instead of on a mapping thread")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--config", type=Path, help="pipeline config JSON (for the seed)")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, default=5.0, help="seconds")
    p.add_argument("--depth-rate", type=float, default=30.0, help="Hz")
    p.add_argument("--bg-rate", type=float, default=DEFAULT_BG_RATE, help="events/px/s")
    p.add_argument("--jitter", type=float, default=0.3, help="px")
    p.add_argument("--events-per-crossing", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compare a trajectory to ground truth")
    p.add_argument("--est", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--rpe-dt", type=float, default=1.0, help="seconds")
    p.add_argument("--max-dt", type=float, default=0.02, help="seconds")
    p.add_argument("--intervals", type=Path, help="write per-interval RPE rows to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="validate and rewrite a dataset")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--format", choices=["synth"], default="synth")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
