"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 runtime (planning-stuck) error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from multicam_nbv.harness import ExperimentConfig, PowerModel, run_experiment, write_outputs
from multicam_nbv.planner import PlanningStuck
from multicam_nbv.scene import SceneError, load_scene, make_drydock, save_scene
from multicam_nbv.sensor import Pose, camera_pose, default_rig, load_rig, render_depth, write_pgm

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("multicam_nbv")


class ConfigError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seeds(text: str) -> list[int]:
    """'5' means seeds 0..4; '3,7,11' is an explicit list."""
    vals = _int_list(text)
    if len(vals) == 1 and "," not in text:
        if vals[0] < 1:
            raise argparse.ArgumentTypeError("seed count must be >= 1")
        return list(range(vals[0]))
    return vals


def _floats(n: int):
    def parse(text: str) -> list[float]:
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {len(vals)}")
        return vals
    return parse


def cmd_gen_scene(args) -> int:
    scene = make_drydock(args.length, args.width, args.depth, args.wall_thickness)
    save_scene(scene, args.out)
    if not args.quiet:
        print(f"{len(scene.boxes)} boxes written to {args.out}")
    return EXIT_OK


def build_config(args) -> tuple[ExperimentConfig, Path | None]:
    base = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        config = ExperimentConfig.load(path)
        base = path.parent
    else:
        config = ExperimentConfig()
    overrides = {}
    if args.scene:
        overrides["scene"] = str(Path(args.scene).resolve())
    if args.rig:
        overrides["rigs"] = [str(Path(r).resolve()) for r in args.rig]
    if args.cameras:
        overrides["rigs"] = args.cameras
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.stride is not None:
        overrides["stride"] = args.stride
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        config = replace(config, **overrides)
    for p in [config.scene] if isinstance(config.scene, str) else []:
        if not (Path(p) if base is None or Path(p).is_absolute() else base / p).exists():
            raise ConfigError(f"scene file {p} does not exist")
    return config, base


def cmd_run(args) -> int:
    try:
        config, base = build_config(args)
        scene = config.build_scene(base)
        rigs = config.build_rigs(base)
    except (ConfigError, SceneError, ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("running %d variant(s) x %d seed(s), T=%d", len(rigs), len(config.seeds), config.iterations)
    try:
        result = run_experiment(config, scene, rigs)
    except (PlanningStuck, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = write_outputs(result, config, args.out, PowerModel())
    log.info("selected M=%s; outputs in %s", summary["selected_M"], args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        scene = load_scene(args.scene)
        if args.rig:
            rig = load_rig(args.rig)
        else:
            rig = default_rig(args.cameras)
        x, y, z, yaw = args.pose
        pose = Pose((x, y, z), yaw)
    except (SceneError, ValueError, TypeError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lo, hi = (np.asarray(b) for b in scene.bounds)
    if np.any(pose.xyz < lo) or np.any(pose.xyz > hi):
        print(f"error: pose {pose.position} is outside the scene bounds", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mount in rig.mounts:
        depth = render_depth(scene, camera_pose(pose, mount), mount.intrinsics)
        write_pgm(depth, out / f"depth_{mount.name}.pgm")
    if not args.quiet:
        print(f"{rig.M} depth images written to {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multicam-nbv", description="Multi-camera exploration simulator.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[common], help="write the parametric dry-dock scene as JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--length", type=float, default=20.0)
    g.add_argument("--width", type=float, default=12.0)
    g.add_argument("--depth", type=float, default=6.0)
    g.add_argument("--wall-thickness", type=float, default=0.5)
    g.set_defaults(func=cmd_gen_scene)

    r = sub.add_parser("run", parents=[common], help="run the camera-count experiment and select a design")
    r.add_argument("--config", help="experiment config JSON")
    r.add_argument("--scene", help="scene JSON (overrides config)")
    r.add_argument("--rig", action="append", help="rig JSON; repeat for several variants")
    r.add_argument("--cameras", type=_int_list, help="camera-count presets, e.g. 1,3,5")
    r.add_argument("--seeds", type=_seeds, help="seed count or comma-separated seed list")
    r.add_argument("--iters", type=int, help="iterations per episode")
    r.add_argument("--stride", type=int, help="pixel stride for point clouds")
    r.add_argument("--jobs", type=int, help="parallel episode workers")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("render", parents=[common], help="write one 16-bit PGM depth image per camera")
    d.add_argument("--scene", required=True)
    d.add_argument("--rig", help="rig JSON (default: camera-count preset)")
    d.add_argument("--cameras", type=int, default=5)
    d.add_argument("--pose", type=_floats(4), required=True, help="x,y,z,yaw")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
