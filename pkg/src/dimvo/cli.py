"""Command-line front end.

Subcommands: enhance, match-bench, vo, eval, calib, darksim, report.
Progress goes to stderr; machine-readable results go to files in the
output directory, so stdout stays clean for piping. Exit codes: 0 on
success, 1 on pipeline failures, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataio, evaluation, imgproc, matching, vo
from .errors import DimvoError
from .features import OrbConfig
from .geometry import pnp


def _log(args, msg):
    print(msg, file=sys.stderr)


def _vlog(args, msg):
    if getattr(args, "verbose", 0):
        print(msg, file=sys.stderr)


def _add_common(p):
    p.add_argument("--seed", type=int, default=42, help="RNG seed (default 42)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads; 1 gives identical output to N")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="per-frame progress on stderr")


def _add_enhancer_flags(p):
    g = p.add_argument_group("enhancer (choose at most one)")
    g.add_argument("--gamma", type=float, metavar="G",
                   help="brightening gamma correction, out = 255*(in/255)**(1/G)")
    g.add_argument("--histeq", action="store_true",
                   help="global histogram equalization on luma")
    g.add_argument("--clahe", metavar="CLIP[:TX:TY]",
                   help="tile-based equalization, e.g. 2:8:8")
    g.add_argument("--attention", metavar="BASE", nargs="?", const="gamma:2",
                   help="inverse-luma attention blend around BASE "
                        "(default gamma:2)")
    g.add_argument("--external", metavar="CMD",
                   help="external enhancer, run as: CMD <in_dir> <out_dir>")


def _enhancer_from_flags(parser, args):
    chosen = []
    if args.gamma is not None:
        chosen.append(imgproc.EnhancerConfig(kind="gamma", gamma=args.gamma))
    if args.histeq:
        chosen.append(imgproc.EnhancerConfig(kind="histeq"))
    if args.clahe:
        chosen.append(imgproc.parse_enhancer(f"clahe:{args.clahe}"))
    if args.attention:
        chosen.append(imgproc.EnhancerConfig(
            kind="attention", base=imgproc.parse_enhancer(args.attention)))
    if args.external:
        chosen.append(imgproc.EnhancerConfig(kind="external", command=args.external))
    if len(chosen) > 1:
        parser.error("conflicting enhancer flags; pick one")
    return chosen[0] if chosen else imgproc.EnhancerConfig(kind="none")


def _add_orb_flags(p):
    g = p.add_argument_group("feature extraction")
    g.add_argument("--features", type=int, default=1000, help="target keypoints")
    g.add_argument("--levels", type=int, default=8, help="pyramid levels")
    g.add_argument("--scale", type=float, default=1.2, help="pyramid scale factor")
    g.add_argument("--fast-threshold", type=int, default=20,
                   help="corner intensity delta")


def _orb_from_flags(args):
    return OrbConfig(
        n_features=args.features,
        n_levels=args.levels,
        scale_factor=args.scale,
        fast_threshold=args.fast_threshold,
    )


def _copy_sequence_metadata(seq_dir, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("times.txt", "intrinsics.txt"):
        src = Path(seq_dir) / name
        if src.is_file():
            shutil.copyfile(src, out_dir / name)


def cmd_enhance(parser, args):
    seq = dataio.load_sequence(args.in_dir)
    out_dir = Path(args.out)
    images_out = out_dir / "images"
    images_out.mkdir(parents=True, exist_ok=True)
    cfg = _enhancer_from_flags(parser, args)
    _log(args, f"enhancing {len(seq)} frames with {cfg.label()}")
    if cfg.kind == "external":
        imgproc.external_enhance(Path(args.in_dir) / "images", cfg.command, images_out)
    else:
        def job(frame):
            _, path = frame
            img = dataio.read_image(path)
            dataio.write_image(imgproc.apply_enhancer(img, cfg), images_out / path.name)

        matching._parallel_map(job, seq.frames, args.threads)
    _copy_sequence_metadata(args.in_dir, out_dir)
    _log(args, f"wrote {out_dir}")
    return 0


def cmd_match_bench(parser, args):
    seq = dataio.load_sequence(args.in_dir)
    if len(seq) < 2:
        raise DimvoError("sequence needs at least 2 frames")
    enhancers = [imgproc.parse_enhancer(s) for s in args.enhancer]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = matching.match_bench(
        seq, enhancers, _orb_from_flags(args), ratio=args.ratio,
        threshold_px=args.ransac_threshold, seed=args.seed,
        workdir=out_dir, threads=args.threads,
        progress=(lambda m: _vlog(args, m)),
    )
    matching.write_pair_csv(result, out_dir / "pairs.csv")
    matching.write_summary_csv({args.sequence_name: result}, out_dir / "summary.csv")
    for label, err in result.errors.items():
        _log(args, f"enhancer {label} failed: {err}")
    for label in result.enhancers():
        _log(args, f"{label}: mean inliers {result.mean_inliers(label):.1f}")
    if not result.pairs:
        raise DimvoError("every enhancer failed")
    return 0


def cmd_vo(parser, args):
    seq = dataio.load_sequence(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = vo.VoConfig(
        min_init_inliers=args.min_init_inliers,
        min_track_inliers=args.min_track_inliers,
        keyframe_inlier_ratio=args.keyframe_inlier_ratio,
        reproj_threshold_px=args.reproj_threshold,
        lost_patience=args.lost_patience,
        enhancer=_enhancer_from_flags(parser, args),
        orb=_orb_from_flags(args),
    )
    _log(args, f"tracking {len(seq)} frames (enhancer {cfg.enhancer.label()})")
    result = vo.run_vo(seq, cfg, seed=args.seed, threads=args.threads,
                       workdir=out_dir, progress=(lambda m: _vlog(args, m)))
    dataio.save_trajectory(result.trajectory, out_dir / "trajectory.txt")
    vo.write_status_csv(result.records, out_dir / "status.csv")
    run_info = {
        "command": list(args.echo_argv),
        "seed": args.seed,
        "enhancer": cfg.enhancer.label(),
        "orb": asdict(cfg.orb),
        "config": {
            "min_init_inliers": cfg.min_init_inliers,
            "min_track_inliers": cfg.min_track_inliers,
            "keyframe_inlier_ratio": cfg.keyframe_inlier_ratio,
            "reproj_threshold_px": cfg.reproj_threshold_px,
            "lost_patience": cfg.lost_patience,
        },
        "init_time_s": result.init_time,
        "tracking_fraction": result.tracking_fraction,
        "n_frames": len(result.records),
    }
    (out_dir / "run.json").write_text(json.dumps(run_info, indent=2) + "\n")
    _log(args, f"tracking fraction {result.tracking_fraction:.1%}, "
               f"init at {result.init_time}")
    return 0


def cmd_eval(parser, args):
    est = dataio.load_trajectory(args.est)
    gt = dataio.load_trajectory(args.gt)
    records = vo.read_status_csv(args.status)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = evaluation.evaluate_run(
        est, gt, records, sequence=args.sequence, label=args.label,
        ate_thresh=args.ate_thresh,
        aoe_thresh=float(np.deg2rad(args.aoe_thresh_deg)),
        max_dt=args.max_dt,
    )
    evaluation.write_metrics_json(run.report, out_dir / "metrics.json", extra={
        "est_file": str(Path(args.est).resolve()),
        "gt_file": str(Path(args.gt).resolve()),
        "status_file": str(Path(args.status).resolve()),
    })
    evaluation.report([run], out_dir)
    r = run.report
    _log(args, f"ATE {r.ate_rmse:.4f} m | AOE {r.aoe_rmse:.4f} rad | "
               f"CR {100 * r.cr:.1f}% (thresholds {r.ate_thresh} m, "
               f"{r.aoe_thresh:.4f} rad) | tracked {r.tracked_duration:.2f}s "
               f"of {r.total_duration:.2f}s")
    return 0


def cmd_calib(parser, args):
    """Mocap-to-camera extrinsic calibration from a planar target.

    Inputs: a correspondence file with `X Y Z u v` lines (target corners in
    the mocap frame, their detected pixels), the camera intrinsics, and the
    rig pose file (4x4 row-major T_mocap_rig, rig-to-mocap). The pose from
    the correspondences is T_cam_mocap (mocap-to-camera); the written result
    is T_rig_cam = inverse(T_mocap_rig) @ inverse(T_cam_mocap), mapping
    camera coordinates into rig coordinates.
    """
    rows = []
    for i, line in enumerate(Path(args.points).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DimvoError(f"{args.points}:{i}: expected 'X Y Z u v'")
        rows.append([float(x) for x in parts])
    if not rows:
        raise DimvoError(f"{args.points}: no correspondences")
    arr = np.array(rows)
    intr = dataio.CameraIntrinsics.from_file(args.intrinsics)
    res = pnp(arr[:, :3], arr[:, 3:], intr.k)
    t_cam_mocap = res.pose.matrix()
    t_mocap_rig = np.loadtxt(args.rig_pose).reshape(4, 4)
    t_rig_cam = np.linalg.inv(t_mocap_rig) @ np.linalg.inv(t_cam_mocap)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "camera_to_rig.txt", t_rig_cam, fmt="%.9g")
    (out_dir / "calib.json").write_text(json.dumps({
        "reproj_rms_px": float(f"{res.reproj_rms:.9g}"),
        "planar_path": bool(res.planar),
        "n_points": len(arr),
    }, indent=2) + "\n")
    _log(args, f"reprojection RMS {res.reproj_rms:.3g} px "
               f"({'planar' if res.planar else 'general'} solve)")
    return 0


def cmd_darksim(parser, args):
    seq = dataio.load_sequence(args.in_dir)
    level = dataio.DarkLevel(args.level)
    out_dir = Path(args.out)
    images_out = out_dir / "images"
    images_out.mkdir(parents=True, exist_ok=True)
    _log(args, f"darkening {len(seq)} frames to {level.value}")

    def job(item):
        i, (_, path) = item
        img = dataio.read_image(path)
        dark = dataio.synth_darken(img, level, seed=[args.seed, i])
        dataio.write_image(dark, images_out / path.name)

    matching._parallel_map(job, list(enumerate(seq.frames)), args.threads)
    _copy_sequence_metadata(args.in_dir, out_dir)
    _log(args, f"wrote {out_dir}")
    return 0


def cmd_report(parser, args):
    runs = []
    for path in args.metrics:
        report, extra = evaluation.load_metrics_json(path)
        est_file = extra.get("est_file")
        gt_file = extra.get("gt_file")
        status_file = extra.get("status_file")
        if est_file and gt_file and status_file and all(
            Path(p).is_file() for p in (est_file, gt_file, status_file)
        ):
            runs.append(evaluation.evaluate_run(
                dataio.load_trajectory(est_file),
                dataio.load_trajectory(gt_file),
                vo.read_status_csv(status_file),
                sequence=report.sequence, label=report.label,
                ate_thresh=report.ate_thresh, aoe_thresh=report.aoe_thresh,
            ))
        else:
            runs.append(report)
    paths = evaluation.report(runs, args.out)
    _log(args, "wrote " + ", ".join(str(p) for p in paths))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dimvo",
        description="Low-light visual odometry toolkit: enhance sequences, "
                    "benchmark feature matching, track, and score trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="apply one enhancer to a sequence")
    p.add_argument("--in", dest="in_dir", required=True, help="input sequence dir")
    p.add_argument("--out", required=True, help="output sequence dir")
    _add_enhancer_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("match-bench",
                       help="consecutive-frame inlier counts per enhancer")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--enhancer", action="append",
                   default=None, metavar="SPEC",
                   help="repeatable; e.g. none, histeq, gamma:2, gamma:4, "
                        "attention:gamma:2, clahe:2:8:8 (default: the five "
                        "benchmark methods)")
    p.add_argument("--sequence-name", default="sequence")
    p.add_argument("--ratio", type=float, default=0.8, help="match ratio test")
    p.add_argument("--ransac-threshold", type=float, default=1.0,
                   help="inlier threshold in px")
    _add_orb_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_match_bench)

    p = sub.add_parser("vo", help="run the monocular tracker")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    _add_enhancer_flags(p)
    _add_orb_flags(p)
    g = p.add_argument_group("tracker")
    g.add_argument("--min-init-inliers", type=int, default=100)
    g.add_argument("--min-track-inliers", type=int, default=15)
    g.add_argument("--keyframe-inlier-ratio", type=float, default=0.5)
    g.add_argument("--reproj-threshold", type=float, default=2.0)
    g.add_argument("--lost-patience", type=int, default=20)
    _add_common(p)
    p.set_defaults(func=cmd_vo)

    p = sub.add_parser("eval", help="score a trajectory against ground truth")
    p.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    p.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    p.add_argument("--status", required=True, help="per-frame status.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--ate-thresh", type=float,
                   default=evaluation.DEFAULT_ATE_THRESHOLD_M,
                   help="correct-rate translation bound in meters (default 0.3)")
    p.add_argument("--aoe-thresh-deg", type=float, default=10.0,
                   help="correct-rate rotation bound in degrees (default 10)")
    p.add_argument("--max-dt", type=float, default=evaluation.DEFAULT_MAX_DT,
                   help="timestamp association window in seconds")
    p.add_argument("--sequence", default="run")
    p.add_argument("--label", default="unlabeled",
                   help="luminosity group for report aggregation")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "calib",
        help="mocap-to-camera extrinsics from target correspondences",
        description=cmd_calib.__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--points", required=True, help="file of `X Y Z u v` lines")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--rig-pose", required=True,
                   help="4x4 row-major rig-to-mocap transform file")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_calib)

    p = sub.add_parser("darksim", help="synthetically darken a sequence")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", required=True,
                   choices=[l.value for l in dataio.DarkLevel])
    _add_common(p)
    p.set_defaults(func=cmd_darksim)

    p = sub.add_parser("report", help="aggregate metrics.json files")
    p.add_argument("--metrics", nargs="+", required=True,
                   help="metrics.json files from `dimvo eval`")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.echo_argv = argv
    try:
        return args.func(parser, args)
    except DimvoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
