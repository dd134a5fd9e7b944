"""Command-line entry point: fuse, track, ba, extract, eval-gradients, eval-ate.

Defaults mirror the reconstruction setup this package targets: 2 cm voxels,
truncation at 5 voxels, 3.5 m depth cutoff, 75 degree normal-angle filter,
10% keyframe ratio, regularizer weight 0.01 cm^-2. Any flag can be overridden
from a key=value config file (config values win). All pipelines are
single-threaded and deterministic; --threads is accepted for interface
compatibility and values above 1 change nothing.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .datasets import (Sequence, Trajectory, associate_timestamps, ate_rmse,
                       load_tum_sequence, read_trajectory, write_trajectory)
from .extraction import extract_surfels, extract_surfels_upsampled, layered_marching_cubes
from .fusion import FusionParams, estimate_normals, integrate_frame
from .geometry import Pose
from .photometric import (BaParams, Keyframe, bundle_adjust, mean_voxel_color,
                          select_keyframes)
from .ply import write_mesh_ply, write_surfel_ply
from .synthetic import (default_eval_intrinsics, fuse_scene,
                        gradient_deviation_stats, random_sphere_scene,
                        write_gradient_slice_images, write_stats_csv,
                        write_stats_plot_data)
from .tracking import TrackingParams, track_frame
from .volume import load_volume, save_volume

__all__ = ["main", "track_sequence", "fuse_with_trajectory"]


def _fusion_params(args) -> FusionParams:
    return FusionParams(voxel_size=args.voxel_size, trunc_factor=args.trunc,
                        depth_cutoff=args.depth_cutoff,
                        normal_angle_max=args.normal_angle)


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--voxel-size", type=float, default=0.02, help="voxel size in meters")
    p.add_argument("--trunc", type=float, default=5.0, help="truncation in voxels")
    p.add_argument("--depth-cutoff", type=float, default=3.5,
                   help="ignore depth beyond this many meters")
    p.add_argument("--normal-angle", type=float, default=75.0,
                   help="max angle between normal and viewing ray, degrees")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None,
                   help="key=value file; entries override the flags")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for compatibility; execution is single-threaded")
    p.add_argument("--seed", type=int, default=42)


def fuse_with_trajectory(seq: Sequence, traj: Trajectory, params: FusionParams,
                         max_gap: float = 0.02):
    """Fuse every sequence frame that has a trajectory pose within max_gap."""
    vol = params.new_volume()
    times = [f.timestamp for f in seq.frames]
    pairs = associate_timestamps(times, traj.timestamps, max_gap)
    for i, j in pairs:
        depth = seq.frames[i].load_depth()
        normals = estimate_normals(depth)
        integrate_frame(vol, depth, normals, traj.poses[j], params)
    return vol


def track_sequence(seq: Sequence, params: FusionParams,
                   tracking: TrackingParams | None = None):
    """Frame-to-model pipeline: track frame i against frames 0..i-1, then fuse it.

    Frame 0 defines the world frame. Returns (volume, trajectory).
    """
    tracking = tracking or TrackingParams()
    vol = params.new_volume()
    timestamps = []
    poses = []
    current = Pose.identity()
    for i, frame in enumerate(seq.frames):
        depth = frame.load_depth()
        if i > 0:
            current = track_frame(vol, depth, current, tracking).pose
        normals = estimate_normals(depth)
        integrate_frame(vol, depth, normals, current, params)
        timestamps.append(frame.timestamp)
        poses.append(current)
    return vol, Trajectory(np.asarray(timestamps), poses)


def _cmd_fuse(args) -> int:
    seq = load_tum_sequence(args.sequence)
    params = _fusion_params(args)
    if args.traj:
        vol = fuse_with_trajectory(seq, read_trajectory(args.traj), params)
    else:
        vol, _ = track_sequence(seq, params)
    save_volume(vol, args.out)
    print("fused %d frames -> %d voxels -> %s" % (len(seq), vol.n_voxels, args.out))
    return 0


def _cmd_track(args) -> int:
    seq = load_tum_sequence(args.sequence)
    params = _fusion_params(args)
    tracking = TrackingParams(subsample_stride=args.stride)
    vol, traj = track_sequence(seq, params, tracking)
    write_trajectory(traj, args.out)
    if args.save_volume:
        save_volume(vol, args.save_volume)
    print("tracked %d frames -> %s" % (len(traj), args.out))
    return 0


def _cmd_ba(args) -> int:
    seq = load_tum_sequence(args.sequence)
    vol = load_volume(args.volume)
    traj = read_trajectory(args.traj)

    times = [f.timestamp for f in seq.frames]
    pairs = associate_timestamps(times, traj.timestamps, 0.02)
    posed = [(seq.frames[i], traj.poses[j], traj.timestamps[j]) for i, j in pairs]
    chosen = select_keyframes(posed, args.keyframe_ratio)
    keyframes = []
    kf_times = []
    for frame, pose, stamp in chosen:
        color = frame.load_color()
        if color is None:
            continue
        depth = frame.load_depth() if args.depth_visibility else None
        keyframes.append(Keyframe(len(keyframes), color, pose, depth))
        kf_times.append(stamp)
    if len(keyframes) < 2:
        raise ValueError("need at least 2 color keyframes for bundle adjustment")

    params = BaParams(keyframe_ratio=args.keyframe_ratio,
                      regularizer_weight=args.reg_weight,
                      max_outer_iterations=args.iterations,
                      pose_only=args.pose_only,
                      decoupled=not args.coupled)
    report = bundle_adjust(vol, keyframes, params)

    out_traj = Trajectory(np.asarray(kf_times), [kf.pose for kf in keyframes])
    write_trajectory(out_traj, args.out_traj)
    if args.out_volume:
        save_volume(vol, args.out_volume)
    if args.out_cloud:
        keys, colors, has_color = mean_voxel_color(vol, keyframes)
        color_table = np.where(has_color[:, None], colors, 0.5)
        full = np.full((vol.n_voxels, 3), 0.5)
        rows = vol.find_rows(keys)
        full[rows] = color_table
        cloud = extract_surfels(vol, colors=full)
        write_surfel_ply(args.out_cloud, cloud)
    print("ba: %d keyframes, %d outer iterations, energy %.6g -> %s"
          % (len(keyframes), report.outer_iterations,
             report.energy_history[-1] if report.energy_history else float("nan"),
             args.out_traj))
    return 0


def _cmd_extract(args) -> int:
    vol = load_volume(args.volume)
    if args.mesh:
        mesh = layered_marching_cubes(vol, weight_min=args.weight_min)
        write_mesh_ply(args.out, mesh)
        print("mesh: %d vertices, %d triangles -> %s"
              % (len(mesh.vertices), len(mesh.triangles), args.out))
    else:
        cloud = extract_surfels_upsampled(vol) if args.upsample else extract_surfels(vol)
        write_surfel_ply(args.out, cloud)
        print("surfels: %d -> %s" % (len(cloud), args.out))
    return 0


def _cmd_eval_gradients(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = random_sphere_scene(args.seed, n_spheres=args.spheres,
                                n_frames=args.frames,
                                noise_enabled=not args.no_noise)
    params = FusionParams(voxel_size=args.voxel_size, trunc_factor=args.trunc)
    vol = fuse_scene(scene, default_eval_intrinsics(), params)
    stats = gradient_deviation_stats(vol, scene, max_band=args.max_band)
    csv_path = out_dir / "gradient_deviation.csv"
    write_stats_csv(stats, csv_path)
    write_stats_plot_data(stats, out_dir / "gradient_deviation.dat")
    if args.slices:
        write_gradient_slice_images(vol, scene, out_dir)
    stored = stats.row("stored", args.max_band)[0]
    central = stats.row("central", args.max_band)[0]
    print("voxels: %d; band %d: stored mean %.2f deg, central FD mean %.2f deg -> %s"
          % (vol.n_voxels, args.max_band, stored, central, csv_path))
    return 0


def _cmd_eval_ate(args) -> int:
    rmse = ate_rmse(read_trajectory(args.estimated), read_trajectory(args.groundtruth),
                    max_gap=args.max_gap)
    print("%.2f" % rmse)
    return 0


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    overrides = {}
    with open(args.config) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value" % (args.config, lineno))
            key, _, val = line.partition("=")
            overrides[key.strip().replace("-", "_")] = val.strip()
    for key, val in overrides.items():
        if not hasattr(args, key):
            raise ValueError("config key %r does not match any flag" % key)
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, val.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(args, key, int(val))
        elif isinstance(current, float):
            setattr(args, key, float(val))
        else:
            setattr(args, key, val)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradsdf",
        description="Gradient-augmented sparse SDF reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse a sequence into a volume snapshot")
    p.add_argument("sequence", help="TUM-layout sequence directory")
    p.add_argument("--traj", help="trajectory file; omitted = track as you go")
    p.add_argument("--out", required=True, help="output volume snapshot")
    _add_fusion_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("track", help="frame-to-model tracking, writes a trajectory")
    p.add_argument("sequence")
    p.add_argument("--out", required=True, help="output trajectory (TUM text format)")
    p.add_argument("--save-volume", help="also write the fused volume snapshot")
    p.add_argument("--stride", type=int, default=2, help="tracking pixel stride")
    _add_fusion_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("ba", help="photometric bundle adjustment over keyframes")
    p.add_argument("sequence")
    p.add_argument("--volume", required=True, help="initial volume snapshot")
    p.add_argument("--traj", required=True, help="initial trajectory")
    p.add_argument("--out-traj", required=True, help="optimized keyframe trajectory")
    p.add_argument("--out-volume", help="write the refined volume")
    p.add_argument("--out-cloud", help="write a colored surfel PLY")
    p.add_argument("--keyframe-ratio", type=float, default=0.10)
    p.add_argument("--reg-weight", type=float, default=0.01,
                   help="distance regularizer weight, cm^-2")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--pose-only", action="store_true")
    p.add_argument("--coupled", action="store_true",
                   help="joint pose system instead of decoupled sweeps")
    p.add_argument("--depth-visibility", action="store_true",
                   help="use depth frames for the occlusion test")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_ba)

    p = sub.add_parser("extract", help="extract surfels or a mesh from a volume")
    p.add_argument("volume")
    p.add_argument("--out", required=True, help="output PLY path")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--upsample", action="store_true",
                       help="2x upsampled surfel cloud")
    group.add_argument("--mesh", action="store_true", help="layered marching cubes mesh")
    p.add_argument("--weight-min", type=float, default=1e-3,
                   help="minimum corner weight for meshing")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("eval-gradients",
                       help="synthetic gradient-quality study (CSV + plot data)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--voxel-size", type=float, default=0.01)
    p.add_argument("--trunc", type=float, default=10.0)
    p.add_argument("--spheres", type=int, default=5)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--max-band", type=int, default=10)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--slices", action="store_true", help="write normal-map slice PNGs")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_eval_gradients)

    p = sub.add_parser("eval-ate", help="trajectory RMSE in cm after rigid alignment")
    p.add_argument("estimated")
    p.add_argument("groundtruth")
    p.add_argument("--max-gap", type=float, default=0.02)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_eval_ate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, parser)
        if getattr(args, "threads", 1) < 1:
            raise ValueError("--threads must be >= 1")
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single machine-readable error line
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
