"""Depth-frame integration: normal estimation, ray marching, running averages.

Each valid pixel marches sample points along its viewing ray through the
truncation band around the measured depth. Every voxel the ray touches gets a
projective distance estimate d = z_voxel_center - D (positive behind the
observed surface, i.e. inside), a linear weight, and the pixel's inward
world-frame normal accumulated into its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthFrame, Pose, pixel_rays
from .volume import EPS_GRADIENT, GradientSdfVolume, GradVoxel, pack_keys, world_to_key

__all__ = [
    "FusionParams",
    "NormalMap",
    "estimate_normals",
    "weight",
    "normalized_gradient",
    "integrate_frame",
]


@dataclass
class FusionParams:
    """Fusion defaults: 2 cm voxels, truncation 5 voxels, 3.5 m cutoff, 75 deg filter."""

    voxel_size: float = 0.02
    trunc_factor: float = 5.0
    depth_cutoff: float = 3.5
    normal_angle_max: float = 75.0
    ray_step: float | None = None        # defaults to voxel_size / 2
    max_ray_offset: float | None = None  # defaults to voxel_size / 2

    def __post_init__(self):
        if self.trunc_factor < 1.0:
            raise ValueError("trunc_factor must be >= 1")
        if not (0.0 < self.normal_angle_max < 90.0):
            raise ValueError("normal_angle_max must lie in (0, 90) degrees")
        if self.ray_step is None:
            self.ray_step = self.voxel_size / 2.0
        if self.ray_step > self.voxel_size:
            raise ValueError("ray_step must not exceed voxel_size")
        if self.max_ray_offset is None:
            self.max_ray_offset = self.voxel_size / 2.0
        if self.max_ray_offset <= 0.0:
            raise ValueError("max_ray_offset must be positive")

    @property
    def truncation(self) -> float:
        return self.trunc_factor * self.voxel_size

    def new_volume(self) -> GradientSdfVolume:
        return GradientSdfVolume(self.voxel_size, self.truncation)


@dataclass
class NormalMap:
    """Per-pixel unit normals in the camera frame, oriented toward the camera."""

    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray    # (H, W) bool


def estimate_normals(depth: DepthFrame) -> NormalMap:
    """Normals from the cross product of central differences of back-projected points.

    A pixel is invalid when any of its four neighbors (or itself) has invalid
    depth; border pixels are always invalid. Normals are flipped to face the
    camera (negative dot with the viewing ray).
    """
    intr = depth.intrinsics
    z = depth.values
    valid = depth.valid_mask()
    points = pixel_rays(intr) * np.where(valid, z, np.nan)[..., None]

    h, w = z.shape
    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals, ok)

    dpu = points[1:-1, 2:] - points[1:-1, :-2]
    dpv = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(dpu, dpv)
    norms = np.linalg.norm(n, axis=-1)

    inner_ok = (valid[1:-1, 1:-1]
                & valid[1:-1, 2:] & valid[1:-1, :-2]
                & valid[2:, 1:-1] & valid[:-2, 1:-1]
                & (norms > 0.0))
    with np.errstate(invalid="ignore"):
        n = np.where(norms[..., None] > 0.0, n / np.where(norms[..., None] > 0, norms[..., None], 1.0), 0.0)
        # orient toward the camera: n . p < 0
        flip = np.einsum("ijk,ijk->ij", n, points[1:-1, 1:-1]) > 0.0
    n[flip] = -n[flip]
    n[~inner_ok] = 0.0
    normals[1:-1, 1:-1] = np.nan_to_num(n)
    ok[1:-1, 1:-1] = inner_ok
    return NormalMap(normals, ok)


def weight(d, truncation: float):
    """Linear fusion weight: 1 on the observed side, decaying to 0 at +truncation."""
    d = np.asarray(d, dtype=float)
    if np.any(np.abs(d) > truncation * (1.0 + 1e-12)):
        raise ValueError("distance outside truncation band; clamp first")
    w = np.where(d <= 0.0, 1.0, 1.0 - d / truncation)
    return float(w) if w.ndim == 0 else w


def normalized_gradient(voxel: GradVoxel) -> np.ndarray:
    """Unit gradient of a voxel record; raises if the accumulated norm is tiny."""
    norm = float(np.linalg.norm(voxel.grad))
    if norm <= EPS_GRADIENT:
        raise ValueError("degenerate gradient (norm %.3g)" % norm)
    return np.asarray(voxel.grad, dtype=float) / norm


def integrate_frame(vol: GradientSdfVolume, depth: DepthFrame, normals: NormalMap,
                    pose: Pose, params: FusionParams) -> GradientSdfVolume:
    """Fuse one posed depth frame into the volume (mutates and returns vol).

    Pixels failing the validity, cutoff or normal-angle filters are skipped.
    A voxel is only updated by rays passing within half a voxel of its center
    (a corner-clipping ray measures the depth of a different surface column,
    and the projective estimate z_center - D picks up an error of lateral
    offset x surface tilt). Within the frame each voxel is updated at most
    once; among qualifying rays the one nearest the center wins, ties broken
    by traversal order.
    """
    intr = depth.intrinsics
    if (intr.height, intr.width) != normals.valid.shape:
        raise ValueError("depth and normal map sizes differ")
    trunc = vol.truncation
    v_s = vol.voxel_size

    z = depth.values
    rays = pixel_rays(intr)
    with np.errstate(invalid="ignore"):
        keep = depth.valid_mask() & (z <= params.depth_cutoff) & normals.valid
    # normal-to-ray angle filter
    ray_norms = np.linalg.norm(rays, axis=-1)
    cos_angle = -np.einsum("ijk,ijk->ij", normals.normals, rays) / ray_norms
    keep &= cos_angle >= np.cos(np.deg2rad(params.normal_angle_max))
    if not np.any(keep):
        return vol

    ray_flat = rays[keep]                      # (P, 3)
    depth_flat = z[keep]                       # (P,)
    normal_flat = normals.normals[keep]        # (P, 3)
    ray_norms_flat = ray_norms[keep]           # (P,)

    offsets = np.arange(-trunc, trunc + 0.5 * params.ray_step, params.ray_step)
    sample_z = depth_flat[:, None] + offsets[None, :]          # (P, S)
    in_front = sample_z > 1e-6
    p_cam = ray_flat[:, None, :] * sample_z[..., None]          # (P, S, 3)
    p_world = p_cam @ pose.rotation.T + pose.translation

    keys = world_to_key(p_world, v_s)                           # (P, S, 3)
    centers = keys.astype(float) * v_s
    # camera-frame depth of each voxel center
    z_center = (centers - pose.translation) @ pose.rotation[:, 2]
    d = z_center - depth_flat[:, None]
    band = in_front & (np.abs(d) <= trunc)

    if not np.any(band):
        return vol
    pix_idx = np.broadcast_to(np.arange(len(ray_flat))[:, None], band.shape)[band]
    keys_c = keys[band]
    d_c = np.clip(d[band], -trunc, trunc)
    # squared perpendicular distance from the voxel center to the pixel ray
    offset = centers[band] - pose.translation
    ray_w = (ray_flat / ray_norms_flat[:, None]) @ pose.rotation.T
    along = np.einsum("ij,ij->i", offset, ray_w[pix_idx])
    perp2 = np.einsum("ij,ij->i", offset, offset) - along * along

    w_c = weight(d_c, trunc)
    pos_w = (w_c > 0.0) & (perp2 <= params.max_ray_offset**2)
    keys_c, d_c, w_c, pix_idx, perp2 = (keys_c[pos_w], d_c[pos_w], w_c[pos_w],
                                        pix_idx[pos_w], perp2[pos_w])
    if len(keys_c) == 0:
        return vol

    # one update per voxel per frame: the ray passing nearest the center wins
    packed = pack_keys(keys_c)
    order = np.lexsort((perp2, packed))
    sorted_packed = packed[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_packed[1:] != sorted_packed[:-1]
    chosen = order[first]

    n_cam = normal_flat[pix_idx[chosen]]
    n_in = -(n_cam @ pose.rotation.T)
    vol.update(keys_c[chosen], d_c[chosen], w_c[chosen], n_in)
    return vol
