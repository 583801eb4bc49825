"""Command-line pipeline driver.

One subcommand per pipeline stage (synthetic data generation, disparity,
back-projection, pairwise ICP, multiway fusion) plus a ``pipeline``
meta-command that chains them from a config file. Every command is
deterministic given its inputs, flags, and seeds; diagnostics go to
stderr, data to files or stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import geom, io, posegraph, registration, stereo, synth
from .cloud import (
    DepthMap,
    PinholeIntrinsics,
    PointCloud,
    backproject,
    estimate_normals,
    transform_cloud,
)
from .errors import InvalidParameter, ParseError, StereoReconError
from .geom import RigidTransform, Twist
from .registration import IcpParams
from .stereo import StereoRig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable parameter, overridable per flag or config file."""

    focal_px: float = 120.0
    baseline_m: float = 0.1
    cx: float | None = None  # None -> image center
    cy: float | None = None
    block_radius: int = 3
    max_disparity: int = 64
    uniqueness: float = 0.9
    min_disparity: float = 0.5
    voxel_coarse: float = 0.1
    voxel_fine: float = 0.02
    max_corr: float = 0.15
    max_iters: int = 30
    tol: float = 1e-6
    min_correspondences: int = 6
    loop_window: int = 3
    refine_rounds: int = 1
    threads: int = 1
    seed: int = 0
    depth_scale: float = 1000.0
    normal_k: int = 30
    huber_delta: float = 1.0
    graph_iters: int = 50

    def icp_params(self, max_corr: float | None = None) -> IcpParams:
        return IcpParams(
            max_correspondence_dist=max_corr if max_corr is not None else self.max_corr,
            max_iterations=self.max_iters,
            rel_rmse_tol=self.tol,
            min_correspondences=self.min_correspondences,
        )


_FIELD_TYPES = {
    "focal_px": float, "baseline_m": float, "cx": float, "cy": float,
    "block_radius": int, "max_disparity": int, "uniqueness": float,
    "min_disparity": float, "voxel_coarse": float, "voxel_fine": float,
    "max_corr": float, "max_iters": int, "tol": float,
    "min_correspondences": int, "loop_window": int,
    "refine_rounds": int, "threads": int, "seed": int, "depth_scale": float,
    "normal_k": int, "huber_delta": float, "graph_iters": int,
}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise InvalidParameter(f"cannot read config {path}: {err}") from err
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


# Config keys that name inputs/outputs for the pipeline meta-command
# rather than numeric parameters.
_PATH_KEYS = ("stereo_dir", "depth_dir", "odometry", "output_dir", "color_dir")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    config = PipelineConfig()
    file_path = getattr(args, "config", None)
    if file_path:
        overrides = {}
        for key, value in parse_config_file(file_path).items():
            if key in _PATH_KEYS:
                continue
            if key not in _FIELD_TYPES:
                raise InvalidParameter(f"unknown config key {key!r}")
            try:
                overrides[key] = _FIELD_TYPES[key](value)
            except ValueError:
                raise InvalidParameter(
                    f"config key {key!r} has malformed value {value!r}"
                ) from None
        config = replace(config, **overrides)
    flag_overrides = {
        f.name: getattr(args, f.name)
        for f in fields(PipelineConfig)
        if getattr(args, f.name, None) is not None
    }
    return replace(config, **flag_overrides)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    for name, kind in _FIELD_TYPES.items():
        parser.add_argument(
            f"--{name.replace('_', '-')}", type=kind, default=None, dest=name
        )


def _intrinsics(config: PipelineConfig, width: int, height: int) -> PinholeIntrinsics:
    cx = config.cx if config.cx is not None else (width - 1) / 2
    cy = config.cy if config.cy is not None else (height - 1) / 2
    return PinholeIntrinsics(
        fx=config.focal_px, fy=config.focal_px, cx=cx, cy=cy,
        width=width, height=height,
    )


def _load_cloud_with_normals(path, config: PipelineConfig) -> PointCloud:
    cloud = io.read_ply(path)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, k=min(config.normal_k, len(cloud) - 1))
    return cloud


def _print_transform(transform: RigidTransform) -> None:
    for row in transform.as_matrix():
        print(" ".join(f"{v:.17g}" for v in row))


# ---------------------------------------------------------------------------
# Commands


def cmd_disparity(args) -> int:
    config = resolve_config(args)
    left = io.read_gray(args.left)
    right = io.read_gray(args.right)
    disparity = stereo.compute_disparity(
        left,
        right,
        block_radius=config.block_radius,
        max_disparity=config.max_disparity,
        uniqueness_ratio=config.uniqueness,
        threads=config.threads,
    )
    valid = disparity.valid_mask
    logger.info("disparity: %.1f%% valid pixels", 100.0 * valid.mean())

    if args.out_disparity:
        # normalized visualization: 0 = invalid, valid mapped to (0, 1]
        viz = np.zeros(disparity.data.shape)
        if valid.any():
            viz[valid] = (disparity.data[valid] + 1.0) / (config.max_disparity + 1.0)
        io.write_gray(stereo.GrayImage(viz), args.out_disparity)
    if args.out_depth:
        rig = StereoRig(
            focal_px=config.focal_px,
            baseline_m=config.baseline_m,
            cx=config.cx if config.cx is not None else (left.width - 1) / 2,
            cy=config.cy if config.cy is not None else (left.height - 1) / 2,
        )
        depth = stereo.disparity_to_depth(disparity, rig, config.min_disparity)
        io.write_depth(depth, args.out_depth, scale=config.depth_scale)
    return 0


def cmd_backproject(args) -> int:
    config = resolve_config(args)
    depth = io.read_depth(args.depth, scale=config.depth_scale)
    intr = _intrinsics(config, depth.width, depth.height)
    color = io.read_rgb(args.color) if args.color else None
    cloud = backproject(depth, intr, color)
    io.write_ply(cloud, args.out, encoding=args.encoding)
    logger.info("wrote %d points to %s", len(cloud), args.out)
    return 0


def _parse_init_pose(text: str) -> RigidTransform:
    values = [float(t) for t in text.replace(",", " ").split()]
    if len(values) != 16:
        raise InvalidParameter("--init needs 16 matrix entries")
    return RigidTransform.from_matrix(np.array(values).reshape(4, 4), tol=1e-6)


def cmd_icp(args) -> int:
    config = resolve_config(args)
    source = io.read_ply(args.source)
    target = io.read_ply(args.target)
    init = _parse_init_pose(args.init) if args.init else RigidTransform.identity()
    params = config.icp_params()
    if args.point_to_point:
        result = registration.icp_point_to_point(source, target, init, params)
    else:
        if not target.has_normals:
            target = estimate_normals(target, k=min(config.normal_k, len(target) - 1))
        result = registration.icp_point_to_plane(source, target, init, params)

    _print_transform(result.transform)
    print(
        f"fitness {result.fitness:.6f} inlier_rmse {result.inlier_rmse:.9g} "
        f"iterations {result.iterations} converged {result.converged} "
        f"objective {result.objective:.9g}"
    )
    if args.out_transformed:
        io.write_ply(transform_cloud(source, result.transform), args.out_transformed)
    return 0


def _run_multiway(
    fragments: list[PointCloud],
    odometry: list[RigidTransform],
    config: PipelineConfig,
) -> tuple[posegraph.PoseGraph, PointCloud]:
    graph = None
    seeds = odometry
    for round_no in range(max(1, config.refine_rounds)):
        graph = posegraph.build_pose_graph(
            fragments,
            seeds,
            loop_window=config.loop_window,
            coarse_voxel=config.voxel_coarse,
            fine_voxel=config.voxel_fine,
            params=config.icp_params(),
        )
        graph = posegraph.optimize_pose_graph(
            graph, max_iterations=config.graph_iters, huber_delta=config.huber_delta
        )
        seeds = list(graph.nodes)
        logger.info("refine round %d: %d edges", round_no + 1, len(graph.edges))
    merged = posegraph.integrate(fragments, graph, voxel_size=config.voxel_fine)
    return graph, merged


def cmd_multiway(args) -> int:
    config = resolve_config(args)
    fragment_paths = sorted(Path(args.fragments).glob("*.ply"))
    if not fragment_paths:
        raise InvalidParameter(f"no .ply fragments in {args.fragments}")
    fragments = [io.read_ply(p) for p in fragment_paths]
    odometry = io.read_trajectory(args.odometry).poses()
    if len(odometry) != len(fragments):
        raise InvalidParameter(
            f"{len(odometry)} odometry poses for {len(fragments)} fragments"
        )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(fragments) == 1:
        graph = posegraph.PoseGraph((RigidTransform.identity(),), ())
        merged = posegraph.integrate(fragments, graph, voxel_size=config.voxel_fine)
    else:
        graph, merged = _run_multiway(fragments, odometry, config)

    io.write_trajectory(
        io.TrajectoryFile(tuple(enumerate(graph.nodes))),
        out_dir / "trajectory_optimized.txt",
    )
    io.write_pose_graph(graph, out_dir / "pose_graph.txt")
    io.write_ply(merged, out_dir / "merged.ply")
    logger.info(
        "multiway: %d fragments, %d edges, %d merged points",
        len(fragments), len(graph.edges), len(merged),
    )
    return 0


def cmd_synth(args) -> int:
    config = resolve_config(args)
    scene = synth.load_scene(args.scene) if args.scene else synth.default_room_scene(
        seed=config.seed
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    poses = synth.default_trajectory(n_views=args.views)
    intr = synth.default_intrinsics(args.width, args.height)
    emit = set(args.emit.split(","))
    unknown = emit - {"depth", "cloud", "stereo"}
    if unknown:
        raise InvalidParameter(f"unknown --emit kinds: {sorted(unknown)}")

    rng = np.random.default_rng(config.seed)
    for k, pose in enumerate(poses):
        depth = synth.render_depth(scene, pose, intr)
        if args.depth_noise > 0:
            noisy = depth.data.copy()
            mask = depth.valid_mask
            noisy[mask] += rng.normal(0.0, args.depth_noise, size=int(mask.sum()))
            noisy[noisy <= 0] = np.nan
            depth = DepthMap(noisy)
        if "depth" in emit:
            io.write_depth(depth, out_dir / f"depth_{k:03d}.png", scale=config.depth_scale)
        if "cloud" in emit:
            io.write_ply(backproject(depth, intr), out_dir / f"cloud_{k:03d}.ply")
        if "stereo" in emit:
            texture = synth.random_texture(args.width, args.height, seed=config.seed + k)
            left, right = synth.make_stereo_pair(texture, args.stereo_shift)
            io.write_gray(left, out_dir / f"left_{k:03d}.png")
            io.write_gray(right, out_dir / f"right_{k:03d}.png")

    io.write_trajectory(
        io.TrajectoryFile(tuple(enumerate(poses))), out_dir / "trajectory_gt.txt"
    )
    odometry = list(poses)
    if args.odom_noise_rot > 0 or args.odom_noise_trans > 0:
        odometry = [poses[0]]
        for k in range(1, len(poses)):
            relative = geom.compose(geom.invert(poses[k - 1]), poses[k])
            noise = geom.exp(
                Twist(
                    rng.normal(size=3) * np.radians(args.odom_noise_rot) / np.sqrt(3),
                    rng.normal(size=3) * args.odom_noise_trans / np.sqrt(3),
                )
            )
            odometry.append(
                geom.compose(odometry[-1], geom.compose(relative, noise))
            )
    io.write_trajectory(
        io.TrajectoryFile(tuple(enumerate(odometry))), out_dir / "odometry.txt"
    )
    logger.info("synth: wrote %d views to %s", len(poses), out_dir)
    return 0


def _pipeline_fragments(values: dict[str, str], config: PipelineConfig) -> list[PointCloud]:
    if "stereo_dir" in values:
        stereo_dir = Path(values["stereo_dir"])
        lefts = sorted(stereo_dir.glob("left_*"))
        if not lefts:
            raise InvalidParameter(f"no left_* images in {stereo_dir}")
        fragments = []
        for left_path in lefts:
            right_path = left_path.with_name(
                left_path.name.replace("left_", "right_", 1)
            )
            left = io.read_gray(left_path)
            right = io.read_gray(right_path)
            disparity = stereo.compute_disparity(
                left, right, config.block_radius, config.max_disparity,
                config.uniqueness, threads=config.threads,
            )
            rig = StereoRig(
                focal_px=config.focal_px, baseline_m=config.baseline_m,
                cx=config.cx if config.cx is not None else (left.width - 1) / 2,
                cy=config.cy if config.cy is not None else (left.height - 1) / 2,
            )
            depth = stereo.disparity_to_depth(disparity, rig, config.min_disparity)
            fragments.append(backproject(depth, _intrinsics(config, left.width, left.height)))
        return fragments
    if "depth_dir" in values:
        depth_paths = sorted(Path(values["depth_dir"]).glob("depth_*"))
        if not depth_paths:
            raise InvalidParameter(f"no depth_* images in {values['depth_dir']}")
        fragments = []
        for path in depth_paths:
            depth = io.read_depth(path, scale=config.depth_scale)
            fragments.append(
                backproject(depth, _intrinsics(config, depth.width, depth.height))
            )
        return fragments
    raise InvalidParameter("pipeline config needs stereo_dir or depth_dir")


def cmd_pipeline(args) -> int:
    values = parse_config_file(args.config_file)
    namespace = argparse.Namespace(config=args.config_file)
    config = resolve_config(namespace)
    if "output_dir" not in values:
        raise InvalidParameter("pipeline config needs output_dir")
    if "odometry" not in values:
        raise InvalidParameter("pipeline config needs odometry")
    out_dir = Path(values["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    fragments = _pipeline_fragments(values, config)
    for k, fragment in enumerate(fragments):
        io.write_ply(fragment, out_dir / f"fragment_{k:03d}.ply")
    odometry = io.read_trajectory(values["odometry"]).poses()
    if len(odometry) != len(fragments):
        raise InvalidParameter(
            f"{len(odometry)} odometry poses for {len(fragments)} fragments"
        )
    if len(fragments) == 1:
        graph = posegraph.PoseGraph((RigidTransform.identity(),), ())
        merged = posegraph.integrate(fragments, graph, voxel_size=config.voxel_fine)
    else:
        graph, merged = _run_multiway(fragments, odometry, config)
    io.write_trajectory(
        io.TrajectoryFile(tuple(enumerate(graph.nodes))),
        out_dir / "trajectory_optimized.txt",
    )
    io.write_pose_graph(graph, out_dir / "pose_graph.txt")
    io.write_ply(merged, out_dir / "merged.ply")
    logger.info("pipeline: %d fragments -> %d merged points", len(fragments), len(merged))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereorecon",
        description="Stereo depth, ICP registration, and multiway fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("disparity", help="block-matching disparity and depth")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("--out-disparity", help="normalized 8-bit visualization PNG")
    p.add_argument("--out-depth", help="16-bit depth PNG")
    _add_config_flags(p)
    p.set_defaults(func=cmd_disparity)

    p = sub.add_parser("backproject", help="depth map to PLY point cloud")
    p.add_argument("depth")
    p.add_argument("--color", help="RGB image sampled per pixel")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--encoding", choices=("ascii", "binary_little_endian"),
        default="binary_little_endian",
    )
    _add_config_flags(p)
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("icp", help="pairwise registration of two PLY clouds")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--init", help="16 row-major matrix entries")
    p.add_argument("--point-to-point", action="store_true")
    p.add_argument("--out-transformed", help="write the transformed source PLY")
    _add_config_flags(p)
    p.set_defaults(func=cmd_icp)

    p = sub.add_parser("multiway", help="fuse a directory of PLY fragments")
    p.add_argument("fragments", help="directory of fragment .ply files")
    p.add_argument("odometry", help="trajectory file seeding the registration")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_multiway)

    p = sub.add_parser("synth", help="generate synthetic views of a scene")
    p.add_argument("--scene", help="scene file (default: built-in room)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--emit", default="depth,cloud", help="comma list: depth,cloud,stereo")
    p.add_argument("--stereo-shift", type=int, default=7)
    p.add_argument("--depth-noise", type=float, default=0.0, help="Gaussian sigma (m)")
    p.add_argument("--odom-noise-rot", type=float, default=0.0, help="deg per step")
    p.add_argument("--odom-noise-trans", type=float, default=0.0, help="m per step")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config file")
    p.add_argument("config_file")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StereoReconError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
