"""Sparse gradient-augmented signed distance volumes for 3D reconstruction.

The core structure stores, per voxel, a truncated signed distance, a fusion
weight and an accumulated gradient vector, giving single-lookup distance and
gradient queries for direct depth tracking, implicit photometric refinement,
and cheap surfel/mesh extraction from hash-map-style sparse storage.
"""

from .extraction import (SurfelCloud, TriangleMesh, extract_surfels,
                         extract_surfels_upsampled, layered_marching_cubes)
from .fusion import (FusionParams, NormalMap, estimate_normals, integrate_frame,
                     normalized_gradient, weight)
from .geometry import (ColorFrame, DepthFrame, Intrinsics, Pose, backproject,
                       bilinear_sample, project, se3_exp)
from .photometric import (BaParams, Keyframe, ba_energy, bundle_adjust,
                          mean_voxel_color, optimize_distances, optimize_poses,
                          photometric_energy, project_voxel_surface_point,
                          select_keyframes)
from .tracking import (TrackingParams, TrackResult, icp_point_to_plane,
                       icp_point_to_point, residual_and_jacobian, track_frame)
from .volume import (GradientSdfVolume, GradVoxel, lookup_count_audit,
                     load_volume, save_volume, world_to_key)

__version__ = "0.1.0"

__all__ = [
    "BaParams",
    "ColorFrame",
    "DepthFrame",
    "FusionParams",
    "GradVoxel",
    "GradientSdfVolume",
    "Intrinsics",
    "Keyframe",
    "NormalMap",
    "Pose",
    "SurfelCloud",
    "TrackResult",
    "TrackingParams",
    "TriangleMesh",
    "ba_energy",
    "backproject",
    "bilinear_sample",
    "bundle_adjust",
    "estimate_normals",
    "extract_surfels",
    "extract_surfels_upsampled",
    "integrate_frame",
    "icp_point_to_plane",
    "icp_point_to_point",
    "layered_marching_cubes",
    "load_volume",
    "lookup_count_audit",
    "mean_voxel_color",
    "normalized_gradient",
    "optimize_distances",
    "optimize_poses",
    "photometric_energy",
    "project",
    "project_voxel_surface_point",
    "residual_and_jacobian",
    "save_volume",
    "se3_exp",
    "select_keyframes",
    "track_frame",
    "weight",
    "world_to_key",
]
