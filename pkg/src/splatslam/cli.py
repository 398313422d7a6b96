"""Command line: run, render, eval, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import FORMATS, RunConfig


def _cmd_run(args) -> int:
    from .system import run_slam

    overrides = {}
    if args.dataset_format:
        overrides["dataset_format"] = args.dataset_format
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.single_thread:
        overrides["single_thread"] = "true"
    if args.out:
        overrides["output_dir"] = args.out
    cfg = RunConfig.from_file(args.config, **overrides) if args.config else RunConfig.from_text("", **overrides)
    cfg.validate()
    report = run_slam(cfg)
    print(json.dumps(report.metrics, indent=2))
    return 0


def _cmd_render(args) -> int:
    from .export import load_ply, load_trajectory, save_png
    from .rasterizer import render
    from .scene import CameraIntrinsics

    gmap = load_ply(args.map)
    traj = load_trajectory(args.pose)
    if not traj:
        print("pose file is empty", file=sys.stderr)
        return 2
    fx, fy, cx, cy, w, h = (float(v) for v in args.intrinsics.split(","))
    K = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    _, pose = traj[min(args.index, len(traj) - 1)]
    save_png(render(gmap, pose, K).color, args.out)
    return 0


def _cmd_eval(args) -> int:
    from .export import load_trajectory
    from .metrics import ate_rmse

    print(json.dumps({"ate_rmse_cm": ate_rmse(load_trajectory(args.est), load_trajectory(args.gt))}))
    return 0


def _cmd_synth(args) -> int:
    from .datasets import generate_synthetic
    from .export import export_ply, export_trajectory, save_depth_png, save_png

    ds, gmap = generate_synthetic(args.seed)
    out = Path(args.out)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    rgb_lines, depth_lines = [], []
    for k, rec in enumerate(ds.frames):
        name = f"{rec.timestamp:.6f}.png"
        save_png(rec.rgb, out / "rgb" / name)
        save_depth_png(rec.depth, out / "depth" / name, ds.intrinsics.depth_scale)
        rgb_lines.append(f"{rec.timestamp:.6f} rgb/{name}\n")
        depth_lines.append(f"{rec.timestamp:.6f} depth/{name}\n")
    (out / "rgb.txt").write_text("# timestamp filename\n" + "".join(rgb_lines))
    (out / "depth.txt").write_text("# timestamp filename\n" + "".join(depth_lines))
    export_trajectory(ds.gt_trajectory(), out / "groundtruth.txt")
    export_ply(gmap, out / "gt_map.ply")
    K = ds.intrinsics
    (out / "intrinsics.txt").write_text(f"{K.fx},{K.fy},{K.cx},{K.cy},{K.width},{K.height}\n")
    print(f"wrote {len(ds)} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatslam")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the SLAM pipeline")
    run.add_argument("--config")
    run.add_argument("--dataset-format", choices=FORMATS)
    run.add_argument("--seed", type=int)
    run.add_argument("--single-thread", action="store_true")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.set_defaults(func=_cmd_run)

    ren = sub.add_parser("render", help="render a PLY map at a trajectory pose")
    ren.add_argument("--map", required=True)
    ren.add_argument("--pose", required=True, help="TUM trajectory file")
    ren.add_argument("--index", type=int, default=0)
    ren.add_argument("--intrinsics", default="60,60,31.5,31.5,64,64", help="fx,fy,cx,cy,width,height")
    ren.add_argument("--out", required=True)
    ren.set_defaults(func=_cmd_render)

    ev = sub.add_parser("eval", help="ATE-RMSE between two TUM trajectories")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.set_defaults(func=_cmd_eval)

    syn = sub.add_parser("synth", help="write the synthetic scene as a TUM-style sequence")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True)
    syn.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)
