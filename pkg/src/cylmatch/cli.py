"""Command-line entry point.

Every subcommand accepts ``--config FILE`` and dotted overrides written as
``--section.key=value``; overrides beat the file, which beats the defaults.
Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cylinder import SizeMismatch
from .estimation import PairDiagnostics, _estimate, estimate_relative_pose, prepare_image, prepare_scan, \
    run_odometry
from .evaluation import LengthMismatch, Trajectory, evaluate, kitti_segment_errors, registration_error
from .features import WeightShapeMismatch
from .fileio import ConfigError, MalformedFile, ParseError, ReadStats, load_run_config, origin_points, \
    read_kitti_poses, read_kitti_scan, read_kitti_scan_raw, read_moving_mask, read_trajectory, write_gt_dump, \
    write_kitti_poses, write_kitti_scan, write_match_dump, write_tum_trajectory
from .geometry import DegenerateConfiguration, invert
from .gt import ConfigMismatch, generate_correspondences, mask_inaccurate
from .matching import ShapeMismatch
from .synth import make_sequence, parse_scene

log = logging.getLogger("cylmatch")

WIDE_D_COARSE = 41
FRAME_PERIOD = 0.1  # seconds between frames when no timestamps are given
DATA_ERRORS = (MalformedFile, ParseError, OSError, WeightShapeMismatch, LengthMismatch, SizeMismatch,
               ConfigMismatch, ShapeMismatch, DegenerateConfiguration)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split_overrides(extra):
    out = {}
    for tok in extra:
        key, sep, value = tok[2:].partition("=") if tok.startswith("--") else ("", "", "")
        if not sep or "." not in key:
            raise UsageError(f"unrecognised argument {tok!r} (overrides look like --section.key=value)")
        out[key] = value
    return out


def _run_config(args, extra):
    return load_run_config(args.config, _split_overrides(extra))


def _scan_files(directory):
    files = sorted(Path(directory).glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no .bin scans in {directory}")
    return files


def _load_scan_with_mask(path, mask_dir, stats):
    cloud = read_kitti_scan(path, stats)
    if mask_dir is None:
        return cloud, None
    mpath = Path(mask_dir) / (Path(path).stem + ".mask")
    if not mpath.exists():
        return cloud, None
    raw = read_kitti_scan_raw(path)
    mask = read_moving_mask(mpath, len(raw))
    # the mask follows the file's point order, including dropped origin points
    return cloud, mask[~origin_points(raw)]


def _pose_line(t):
    m = np.hstack([t.rotation, np.asarray(t.translation).reshape(3, 1)])
    return " ".join(f"{v:.9f}" for v in m.reshape(-1) + 0.0)


def cmd_odometry(args, extra):
    run = _run_config(args, extra)
    scan_dir = args.scan_dir or run.paths.input_dir
    if scan_dir is None:
        raise UsageError("odometry needs a scan directory")
    mask_dir = args.masks or run.paths.mask_dir
    stats = ReadStats()
    loaded = [_load_scan_with_mask(p, mask_dir, stats) for p in _scan_files(scan_dir)]
    if stats.dropped_points:
        log.info("dropped %d origin points", stats.dropped_points)
    clouds = [c for c, _ in loaded]
    masks = [m for _, m in loaded]
    poses, results = run_odometry(clouds, run.pipeline, masks if any(m is not None for m in masks) else None)

    out = Path(args.out)
    if run.paths.output_dir is not None and not out.is_absolute():
        out = Path(run.paths.output_dir) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    write_kitti_poses(out, poses)
    write_tum_trajectory(poses, FRAME_PERIOD * np.arange(len(poses)), out.with_suffix(".tum"))
    lines = ["frame inliers correspondences used_motion_model"]
    lines += [f"{k} {r.inlier_count} {r.correspondence_count} {int(r.used_motion_model)}"
              for k, r in enumerate(results, 1)]
    with open(out.with_suffix(".log"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    print(f"frames={len(poses)}")
    print(f"fallbacks={sum(r.used_motion_model for r in results)}")
    return 0


def cmd_register(args, extra):
    run = _run_config(args, extra)
    cfg = replace(run.pipeline, d_coarse=WIDE_D_COARSE) if args.wide else run.pipeline
    a, b = read_kitti_scan(args.scan_a), read_kitti_scan(args.scan_b)
    res = estimate_relative_pose(a, b, cfg)
    print(f"transform={_pose_line(res.transform)}")
    print(f"inliers={res.inlier_count}")
    print(f"correspondences={res.correspondence_count}")
    print(f"used_motion_model={int(res.used_motion_model)}")
    print(f"d_coarse={cfg.d_coarse}")
    if args.gt is not None:
        gt = read_kitti_poses(args.gt)
        if len(gt) != 1:
            raise LengthMismatch(f"{args.gt}: expected one pose, found {len(gt)}")
        ang, trans = registration_error(gt.poses[0], res.transform)
        print(f"angular_error_deg={ang:.9f}")
        print(f"translation_error_m={trans:.9f}")
    return 0


def cmd_eval(args, extra):
    if extra:
        _split_overrides(extra)
    gt, est = read_trajectory(args.gt), read_trajectory(args.est)
    if args.mode == "kitti":
        report = kitti_segment_errors(Trajectory(gt.poses), Trajectory(est.poses))
        print(report.table())
    else:
        report = evaluate(Trajectory(gt.poses), Trajectory(est.poses), args.delta)
    for line in report.lines():
        print(line)
    return 0


def _pair_images(args, run):
    a, b = read_kitti_scan(args.scan_a), read_kitti_scan(args.scan_b)
    return prepare_image(a, run.pipeline), prepare_image(b, run.pipeline), a, b


def cmd_gt_dump(args, extra):
    run = _run_config(args, extra)
    ref, tgt, _, _ = _pair_images(args, run)
    pose = read_kitti_poses(args.pose)
    if len(pose) != 1:
        raise LengthMismatch(f"{args.pose}: expected one pose, found {len(pose)}")
    # the file holds the pose of scan b in a's frame; supervision maps a's points into b
    corr = generate_correspondences(ref, tgt, invert(pose.poses[0]))
    if not args.no_mask:
        corr = mask_inaccurate(corr)
    write_gt_dump(args.out, corr)
    print(f"records={len(corr)}")
    return 0


def cmd_match_dump(args, extra):
    run = _run_config(args, extra)
    cfg = replace(run.pipeline, d_coarse=WIDE_D_COARSE) if args.wide else run.pipeline
    a, b = read_kitti_scan(args.scan_a), read_kitti_scan(args.scan_b)
    diag = PairDiagnostics()
    _estimate(prepare_scan(a, cfg), prepare_scan(b, cfg), cfg, diagnostics=diag)
    write_match_dump(args.out, diag.match_field)
    print(f"records={int(diag.match_field.valid.sum())}")
    return 0


def cmd_synth(args, extra):
    run = _run_config(args, extra)
    with open(args.scene, encoding="utf-8") as f:
        try:
            scene = parse_scene(f.read())
        except ValueError as exc:
            raise ParseError(args.scene, 0, str(exc)) from None
    poses = read_kitti_poses(args.poses).poses
    if not poses:
        raise LengthMismatch(f"{args.poses}: no poses")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scans = make_sequence(scene, poses, run.pipeline.cylinder, args.noise, args.seed)
    for k, s in enumerate(scans):
        write_kitti_scan(out / f"{k:06d}.bin", s.cloud)
    write_kitti_poses(out / "poses.txt", poses)
    print(f"scans={len(scans)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="cylmatch", description="Cylinder-image LiDAR matching, odometry and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("odometry", parents=[common], help="chain pairwise estimates over a scan directory")
    s.add_argument("scan_dir", nargs="?", help="directory of KITTI .bin scans (default: paths.input_dir)")
    s.add_argument("--out", required=True, help="KITTI pose output; .tum and .log are written beside it")
    s.add_argument("--masks", help="directory of <scan>.mask moving-object masks")
    s.set_defaults(func=cmd_odometry)

    s = sub.add_parser("register", parents=[common], help="estimate the pose of scan b in scan a's frame")
    s.add_argument("scan_a")
    s.add_argument("scan_b")
    s.add_argument("--wide", action="store_true", help=f"coarse search width {WIDE_D_COARSE}")
    s.add_argument("--gt", help="one KITTI pose line with the true pose of b in a")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", parents=[common], help="compare an estimated trajectory with ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--mode", choices=("kitti", "ate-rpe"), default="kitti")
    s.add_argument("--delta", type=int, default=1, help="frame gap for RPE")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gt-dump", parents=[common], help="write ground-truth cell correspondences")
    s.add_argument("scan_a")
    s.add_argument("scan_b")
    s.add_argument("--pose", required=True, help="one KITTI pose line with the pose of b in a")
    s.add_argument("--out", required=True)
    s.add_argument("--no-mask", action="store_true", help="keep cells with a large range discrepancy")
    s.set_defaults(func=cmd_gt_dump)

    s = sub.add_parser("match-dump", parents=[common], help="write the dense match field of a pair")
    s.add_argument("scan_a")
    s.add_argument("scan_b")
    s.add_argument("--out", required=True)
    s.add_argument("--wide", action="store_true")
    s.set_defaults(func=cmd_match_dump)

    s = sub.add_parser("synth", parents=[common], help="ray-cast a scene along a pose file")
    s.add_argument("scene")
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=0.0, help="range noise sigma in metres")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as exc:
        print(f"cylmatch: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"cylmatch: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"cylmatch: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # remaining validation failures come from the input data
        print(f"cylmatch: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
