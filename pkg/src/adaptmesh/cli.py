"""``adaptmesh`` command line: smooth, simulate, reconstruct, train-agent, evaluate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import ActionBins, curve_csv, load_weights, train_agent
from .config import SCHEMA_VERSION, RunConfig
from .field import NeuralPointMap
from .env import SimEnvironment, agent_policy, constant_policy, run_reconstruction
from .geometry import (PointCloud, build_scanblock, load_point_cloud, load_trajectory, partition_frames,
                       save_point_cloud, save_trajectory)
from .mesher import export_mesh, load_mesh, sample_mesh_points
from .metrics import QualityReport, quality_report
from .normals import process_block_normals
from .pipeline import prepare_sequence, scene_report
from .sim import Scene, load_scene_file, make_trajectory, save_scene_file, simulate_sequence


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ------------------------------------------------------------------ helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "voxel", None) is not None:
        cfg = replace(cfg, meshing=replace(cfg.meshing, voxel=args.voxel))
    if getattr(args, "region_margin", None) is not None:
        cfg = replace(cfg, meshing=replace(cfg.meshing, margin_factor=args.region_margin))
    overrides = {k: getattr(args, a) for k, a in (("radius", "radius"), ("k_max", "kmax"), ("beta", "beta"),
                                                  ("eta", "eta"), ("n_segments", "segments"))
                 if getattr(args, a, None) is not None}
    if overrides:
        cfg = replace(cfg, smoothing=replace(cfg.smoothing, **overrides))
    return cfg


def _frame_files(frames_dir: Path) -> list:
    files = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in (".ply", ".xyz")
                   and p.stem.startswith("frame_"))
    if not files:
        raise CommandError("input", f"no frame_*.ply / frame_*.xyz files in {frames_dir}")
    return files


def load_frames(frames_dir) -> list:
    """``[(pose, sensor-frame cloud)]`` from a directory written by ``simulate``."""
    frames_dir = Path(frames_dir)
    traj = frames_dir / "trajectory.txt"
    if not traj.exists():
        raise CommandError("input", f"missing {traj}")
    _, poses = load_trajectory(traj)
    files = _frame_files(frames_dir)
    if len(files) != len(poses):
        raise CommandError("input", f"{len(files)} frames but {len(poses)} poses")
    return [(p, load_point_cloud(f)) for p, f in zip(poses, files)]


def _load_points(path) -> np.ndarray:
    """Points of a cloud file, or area samples of a mesh file."""
    path = Path(path)
    try:
        mesh = load_mesh(path)
    except (ValueError, IndexError):
        mesh = None
    if mesh is not None and len(mesh):
        return sample_mesh_points(mesh, 0.05, seed=0)
    return load_point_cloud(path).points


def _write_report(report: QualityReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(QualityReport.CSV_HEADER + "\n" + report.csv_row() + "\n")


# ------------------------------------------------------------------ commands

def cmd_smooth(args) -> int:
    cfg = _config(args)
    frames = load_frames(args.frames)
    clouds = []
    for chunk in partition_frames(frames, cfg.scene.block_frames):
        block = build_scanblock(chunk, len(chunk))
        res = process_block_normals(block, cfg.smoothing, smooth=not args.no_smooth)
        world = block.base_pose
        normals = res.normals @ world.rotation.T
        clouds.append((world.apply(block.cloud.points), normals))
    pts = np.concatenate([c[0] for c in clouds])
    nrm = np.concatenate([c[1] for c in clouds])
    save_point_cloud(PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)), args.out, "ply")
    print(f"wrote {len(pts)} oriented points to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    spec, scanner, traj = load_scene_file(args.spec)
    seed = args.seed if args.seed is not None else 0
    scene = Scene(spec)
    stamps, poses = make_trajectory(scene, scanner, traj)
    frames = simulate_sequence(scene, scanner, poses, seed=spec.seed * 7 + seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (_, cloud) in enumerate(frames):
        save_point_cloud(cloud, out / f"frame_{i:05d}.ply", "ply")
    save_trajectory(out / "trajectory.txt", stamps, poses)
    save_point_cloud(PointCloud(scene.ground_truth().points), out / "gt.ply", "ply")
    save_scene_file(out / "scene.cfg", spec, scanner, traj)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    env_cfg = cfg.env_config(smooth_normals=not args.no_smooth)
    frames = load_frames(args.frames)
    blocks = prepare_sequence(frames, env_cfg.pipeline)
    if args.weights:
        net = load_weights(args.weights)
        policy = agent_policy(net, net.bins)
    else:
        policy = constant_policy(cfg.action)
    nmap = NeuralPointMap.load(args.resume) if args.resume else None
    rec = run_reconstruction(blocks, policy, env_cfg, seed=cfg.seed, nmap=nmap)
    mesh = rec.mesh()
    export_mesh(mesh, args.out)
    if args.map_out:
        rec.map.save(args.map_out)
    print(f"wrote mesh with {len(mesh.vertices)} vertices, {len(mesh)} triangles to {args.out}")
    if args.gt:
        report = scene_report(mesh, load_point_cloud(args.gt).points, env_cfg.pipeline)
        print(report.table())
        if args.report:
            _write_report(report, args.report)
    return 0


def cmd_train_agent(args) -> int:
    cfg = _config(args)
    scene_dir = Path(args.scenes)
    files = sorted(scene_dir.glob("*.cfg")) if scene_dir.is_dir() else [scene_dir]
    if not files:
        raise CommandError("input", f"no *.cfg scene files in {scene_dir}")
    scenes = [load_scene_file(f) for f in files]
    env = SimEnvironment(scenes, cfg.env_config(), ActionBins(), seed=cfg.seed)
    iters = args.iters if args.iters is not None else cfg.ppo.iterations
    out = Path(args.out)
    result = train_agent(env, cfg.ppo, seed=cfg.seed, iterations=iters, checkpoint=out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    csv_path.write_text(curve_csv(result.curve))
    print(f"trained {iters} iterations; weights {out}, curve {csv_path}")
    return 0


def cmd_evaluate(args) -> int:
    pred = _load_points(args.mesh)
    gt = _load_points(args.gt)
    if not len(pred) or not len(gt):
        raise CommandError("input", "empty mesh or ground truth")
    report = quality_report(pred, gt, args.threshold)
    print(QualityReport.CSV_HEADER)
    print(report.csv_row())
    print(report.table())
    if args.report:
        _write_report(report, args.report)
    return 0


def cmd_dump_config(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.dump(args.out)
    else:
        import json
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptmesh", description="Adaptive neural-SDF meshing of scanned cavities.")
    p.add_argument("--version", action="version",
                   version=f"adaptmesh {__version__} (config schema {SCHEMA_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("smooth", help="estimate, orient and smooth normals of a frame sequence")
    sp.add_argument("--frames", required=True, help="directory with frame_*.ply and trajectory.txt")
    sp.add_argument("--out", required=True, help="output PLY with normals")
    sp.add_argument("--no-smooth", action="store_true", help="skip L0 smoothing")
    sp.add_argument("--radius", type=float, help="neighbourhood radius (m)")
    sp.add_argument("--kmax", type=int, help="maximum neighbours")
    sp.add_argument("--beta", type=float, help="initial coupling weight")
    sp.add_argument("--eta", type=float, help="edge-preservation weight")
    sp.add_argument("--segments", type=int, help="centroid polyline segments")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_smooth)

    sp = sub.add_parser("simulate", help="scan a synthetic scene")
    sp.add_argument("--spec", required=True, help="scene description (key = value file)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="range-noise seed offset")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="mesh a frame sequence")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--out", required=True, help="mesh file (.obj or .ply)")
    sp.add_argument("--weights", help="trained agent; fixed default action if omitted")
    sp.add_argument("--gt", help="ground-truth cloud for a quality report")
    sp.add_argument("--report", help="write the quality report as CSV")
    sp.add_argument("--voxel", type=float, help="marching-cubes voxel (m)")
    sp.add_argument("--region-margin", type=float, help="meshing margin in units of tr")
    sp.add_argument("--map-out", help="save the neural point map")
    sp.add_argument("--resume", help="start from a saved neural point map")
    sp.add_argument("--no-smooth", action="store_true", help="use unsmoothed normals")
    common(sp)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("train-agent", help="train the parameter policy with PPO")
    sp.add_argument("--scenes", required=True, help="directory of scene .cfg files (or one file)")
    sp.add_argument("--iters", type=int, help="PPO iterations")
    sp.add_argument("--out", required=True, help="weights file")
    sp.add_argument("--csv", help="reward curve CSV (default: weights path with .csv)")
    common(sp)
    sp.set_defaults(func=cmd_train_agent)

    sp = sub.add_parser("evaluate", help="accuracy, completeness, Chamfer-L1 and F-score")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--threshold-cm", "--threshold", dest="threshold", type=float, default=15.0,
                    help="F-score threshold (cm)")
    sp.add_argument("--report", help="write the report as CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("dump-config", help="print the effective configuration")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: io: {exc.filename}: not found", file=sys.stderr)
    except (ValueError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
