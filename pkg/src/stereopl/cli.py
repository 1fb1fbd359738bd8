"""Command-line front end.

Subcommands: `suppress` (keypoint selection with timing stats), `merge-lines`
(collinear segment merging), `ba` (optimize a serialized factor graph),
`run-sim` (seeded synthetic end-to-end run), and `eval` (trajectory metrics
from TUM or KITTI files). Inputs are fully validated before anything is
written, all artifacts land under the chosen output directory, and every
error exits nonzero with a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time

from .config import CAMERA_PRESETS, config_from_defaults, load_config
from .errors import DegenerateGeometry, FormatError, StereoPLError
from .evaluation import (
    compute_metrics,
    format_metrics_table,
    load_kitti,
    load_tum,
    save_error_plot,
    save_metrics_csv,
)
from .feature_grid import (
    DEFAULT_TOLERANCE,
    load_keypoints,
    save_keypoints,
    select_keypoints,
)
from .line_merge import (
    RHO_REL,
    THETA_TOL,
    load_segments,
    merge_segments,
    save_segments,
    to_center_origin,
)
from .optimizer import load_graph, optimize, save_graph
from .pipeline import run_pipeline, write_outputs

MODES = ("pose_only", "local_ba", "global_ba")


def _out_path(args, name: str) -> str:
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, name)


def cmd_suppress(args) -> int:
    points = load_keypoints(args.input)
    if args.repeats < 1:
        raise ValueError("--repeats must be >= 1")
    if points:
        kept = []
        wall = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            kept = select_keypoints(points, args.width, args.height,
                                    args.target, args.tolerance)
            wall.append(time.perf_counter() - t0)
        mean_ms = 1e3 * statistics.mean(wall)
        median_ms = 1e3 * statistics.median(wall)
    else:
        kept = []
        mean_ms = median_ms = 0.0
    save_keypoints(_out_path(args, args.out), kept)
    print(f"selected {len(kept)} of {len(points)} keypoints "
          f"(target {args.target})")
    print(f"wall time over {args.repeats} repeats: "
          f"mean {mean_ms:.3f} ms, median {median_ms:.3f} ms")
    return 0


def cmd_merge_lines(args) -> int:
    if (args.width is None) != (args.height is None):
        raise ValueError("--width and --height must be given together")
    segs = load_segments(args.input)
    if args.width is not None:
        segs = [to_center_origin(s, args.width, args.height) for s in segs]
    merged = merge_segments(segs, args.rho_rel, args.theta_tol)
    save_segments(_out_path(args, args.out), merged)
    print(f"merged {len(segs)} segments into {len(merged)}")
    return 0


def cmd_ba(args) -> int:
    cam = CAMERA_PRESETS[args.camera]
    graph = load_graph(args.input, cam)
    settings = config_from_defaults().lm
    report = optimize(graph, settings, mode=args.mode)
    save_graph(_out_path(args, args.out), graph)
    print(f"cost {report.initial_cost:.6g} -> {report.final_cost:.6g} "
          f"in {report.iterations} iterations ({report.reason})")
    return 0


def cmd_run_sim(args) -> int:
    if args.config is not None:
        rc = load_config(args.config, seed_override=args.seed)
    else:
        rc = config_from_defaults(seed_override=args.seed)
    out_dir = args.output_dir if args.output_dir is not None else rc.output_dir
    result = run_pipeline(rc)
    paths = write_outputs(result, out_dir)
    if args.plot:
        plot_path = os.path.join(out_dir, "error.svg")
        _plot_errors(plot_path, result.est, result.gt)
        paths["error.svg"] = plot_path
    print(format_metrics_table(result.metrics))
    print(f"keyframes {len(result.tracking.keyframe_frames)} "
          f"of {len(result.est.poses)} frames")
    print(f"wrote {len(paths)} files to {out_dir}")
    return 0


def _plot_errors(path, est, gt) -> None:
    try:
        save_error_plot(path, est, gt, align=True)
    except DegenerateGeometry:
        # straight-line truth has no unique alignment rotation
        save_error_plot(path, est, gt, align=False)


def _load_trajectory(path):
    """Column count decides the format: 8 is TUM, 12 is KITTI."""
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            n = len(line.split())
            if n == 8:
                return load_tum(path)
            if n == 12:
                return load_kitti(path)
            raise FormatError(path, line_no,
                              f"expected 8 (TUM) or 12 (KITTI) fields, got {n}")
    raise FormatError(path, 0, "no data lines")


def cmd_eval(args) -> int:
    est = _load_trajectory(args.est)
    gt = _load_trajectory(args.gt)
    metrics = compute_metrics(est, gt, align=not args.no_align,
                              with_scale=args.with_scale,
                              rpe_delta=args.rpe_delta)
    save_metrics_csv(_out_path(args, "metrics.csv"), metrics)
    table = format_metrics_table(metrics)
    with open(_out_path(args, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    if args.plot:
        save_error_plot(os.path.join(args.output_dir, "error.svg"), est, gt,
                        align=not args.no_align, with_scale=args.with_scale)
    print(table)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereopl",
        description="stereo point-line SLAM back-end tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("suppress",
                       help="grid-suppress scored keypoints from a file")
    p.add_argument("input", help="keypoint file: x y response octave")
    p.add_argument("--width", type=int, required=True, help="image width px")
    p.add_argument("--height", type=int, required=True, help="image height px")
    p.add_argument("--target", type=int, required=True,
                   help="desired keypoint count (>= 2)")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE,
                   help="relative undershoot tolerance on the target")
    p.add_argument("--repeats", type=int, default=1,
                   help="timing repeats for the wall-time statistics")
    p.add_argument("--output-dir", default="out")
    p.add_argument("--out", default="selected.txt",
                   help="output file name inside the output directory")
    p.set_defaults(func=cmd_suppress)

    p = sub.add_parser("merge-lines",
                       help="merge collinear 2D segments from a file")
    p.add_argument("input", help="segment file: x1 y1 x2 y2 (centre origin)")
    p.add_argument("--rho-rel", type=float, default=RHO_REL,
                   help="relative rho threshold for clustering")
    p.add_argument("--theta-tol", type=float, default=THETA_TOL,
                   help="theta threshold in radians")
    p.add_argument("--width", type=int,
                   help="with --height: input is corner-origin, convert first")
    p.add_argument("--height", type=int,
                   help="with --width: input is corner-origin, convert first")
    p.add_argument("--output-dir", default="out")
    p.add_argument("--out", default="merged.txt")
    p.set_defaults(func=cmd_merge_lines)

    p = sub.add_parser("ba", help="optimize a serialized factor graph")
    p.add_argument("input", help="graph file (POSE/PT/LINE/PFACTOR/LFACTOR)")
    p.add_argument("--mode", choices=MODES, default="global_ba")
    p.add_argument("--camera", choices=sorted(CAMERA_PRESETS), default="vga",
                   help="camera preset used to interpret the factors")
    p.add_argument("--output-dir", default="out")
    p.add_argument("--out", default="refined.txt")
    p.set_defaults(func=cmd_ba)

    p = sub.add_parser("run-sim",
                       help="run the synthetic end-to-end pipeline")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--output-dir",
                   help="override the configured output directory")
    p.add_argument("--plot", action="store_true",
                   help="also write an error-over-time SVG")
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("eval",
                       help="ATE/RPE between two trajectory files")
    p.add_argument("est", help="estimated trajectory (TUM or KITTI)")
    p.add_argument("gt", help="ground-truth trajectory (TUM or KITTI)")
    p.add_argument("--rpe-delta", type=int, default=1,
                   help="frame gap for relative pose error")
    p.add_argument("--no-align", action="store_true",
                   help="skip rigid alignment before ATE")
    p.add_argument("--with-scale", action="store_true",
                   help="similarity instead of rigid alignment")
    p.add_argument("--plot", action="store_true",
                   help="also write an error-over-time SVG")
    p.add_argument("--output-dir", default="out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StereoPLError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
