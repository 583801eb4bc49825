"""Stereo depth, point-cloud registration, and multiway fusion toolkit.

Pipeline: rectified stereo pairs (or ingested depth maps) become metric
depth, depth becomes camera-frame point clouds, and multiple viewpoint
clouds are fused into one globally consistent model via point-to-plane ICP
and pose-graph optimization.
"""

from .cloud import (
    DepthMap,
    PinholeIntrinsics,
    PointCloud,
    SpatialIndex,
    align_scale_shift,
    backproject,
    estimate_normals,
    nearest,
    transform_cloud,
    voxel_downsample,
)
from .geom import RigidTransform, Twist, apply, compose, exp, invert, log
from .posegraph import PoseEdge, PoseGraph, build_pose_graph, integrate, optimize_pose_graph
from .registration import (
    CorrespondenceSet,
    IcpParams,
    IcpResult,
    icp_point_to_plane,
    icp_point_to_point,
    pairwise_register,
)
from .stereo import (
    DisparityMap,
    GrayImage,
    StereoRig,
    compute_disparity,
    disparity_to_depth,
    downsample_image,
)
from .synth import SceneSpec, make_stereo_pair, render_depth, sample_scene

__version__ = "0.1.0"

__all__ = [
    "DepthMap", "PinholeIntrinsics", "PointCloud", "SpatialIndex",
    "align_scale_shift", "backproject", "estimate_normals", "nearest",
    "transform_cloud", "voxel_downsample",
    "RigidTransform", "Twist", "apply", "compose", "exp", "invert", "log",
    "PoseEdge", "PoseGraph", "build_pose_graph", "integrate", "optimize_pose_graph",
    "CorrespondenceSet", "IcpParams", "IcpResult",
    "icp_point_to_plane", "icp_point_to_point", "pairwise_register",
    "DisparityMap", "GrayImage", "StereoRig",
    "compute_disparity", "disparity_to_depth", "downsample_image",
    "SceneSpec", "make_stereo_pair", "render_depth", "sample_scene",
    "__version__",
]
