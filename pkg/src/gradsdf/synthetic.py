"""Synthetic scenes and the gradient-quality study.

Renders depth images of random sphere scenes (optionally with Kinect-like
axial noise), fuses them at ground-truth poses, and compares the stored
per-voxel gradients against forward/backward/central finite differences and
the analytic ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionParams, estimate_normals, integrate_frame
from .geometry import ColorFrame, DepthFrame, Intrinsics, Pose, pixel_rays
from .volume import GradientSdfVolume, VolumeQueryError

__all__ = [
    "SphereScene",
    "DeviationStats",
    "IncompleteStencilError",
    "random_sphere_scene",
    "orbit_trajectory",
    "look_at_pose",
    "default_eval_intrinsics",
    "render_sphere_depth",
    "render_sphere_color",
    "render_color_from_depth",
    "render_plane_depth",
    "fuse_scene",
    "gt_sphere_gradient",
    "finite_difference_gradient",
    "gradient_deviation_stats",
    "write_stats_csv",
    "write_stats_plot_data",
    "write_gradient_slice_images",
]

# Kinect-like quadratic axial noise model, sigma(z) = KINECT_NOISE_COEFF * z^2.
KINECT_NOISE_COEFF = 1.425e-3

FD_SCHEMES = ("forward", "backward", "central")


class IncompleteStencilError(VolumeQueryError):
    """A finite-difference neighbor voxel is missing."""


@dataclass
class SphereScene:
    """Spheres plus a camera trajectory; deterministic under a fixed seed."""

    spheres: list            # [(center (3,), radius)]
    trajectory: list         # [Pose]
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        self.spheres = [(np.asarray(c, dtype=float).reshape(3), float(r))
                        for c, r in self.spheres]
        if any(r <= 0.0 for _, r in self.spheres):
            raise ValueError("sphere radii must be positive")

    def centroid(self) -> np.ndarray:
        return np.mean([c for c, _ in self.spheres], axis=0)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(R, eye)


def orbit_trajectory(center, n_poses: int, radius: float, rng,
                     radius_jitter: float = 0.15, elevation: float = 0.35,
                     elevation_jitter: float = 0.25) -> list:
    """Poses on a jittered orbit around `center`, all looking at it."""
    center = np.asarray(center, dtype=float)
    poses = []
    for k in range(n_poses):
        az = 2.0 * np.pi * k / n_poses + rng.uniform(-0.05, 0.05)
        el = elevation * np.sin(2.0 * np.pi * k / n_poses * 2.0) \
            + rng.uniform(-elevation_jitter, elevation_jitter)
        r = radius + rng.uniform(-radius_jitter, radius_jitter)
        eye = center + r * np.array([np.cos(az) * np.cos(el),
                                     np.sin(az) * np.cos(el),
                                     np.sin(el)])
        poses.append(look_at_pose(eye, center))
    return poses


def random_sphere_scene(seed: int, n_spheres: int = 5, n_frames: int = 60,
                        noise_enabled: bool = True,
                        radius_range=(0.15, 0.4), box_half: float = 0.5,
                        orbit_radius: float | None = None,
                        orbit_clearance: float = 0.35) -> SphereScene:
    """Random non-overlapping spheres in a box with an orbiting camera.

    The orbit radius defaults to the scene extent plus a clearance, keeping
    every camera outside the spheres regardless of the draw.
    """
    rng = np.random.default_rng(seed)
    spheres = []
    attempts = 0
    while len(spheres) < n_spheres:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place non-overlapping spheres")
        c = rng.uniform(-box_half, box_half, size=3)
        r = rng.uniform(*radius_range)
        if all(np.linalg.norm(c - c2) > r + r2 + 0.02 for c2, r2 in spheres):
            spheres.append((c, r))
    centroid = np.mean([c for c, _ in spheres], axis=0)
    if orbit_radius is None:
        extent = max(np.linalg.norm(c - centroid) + r for c, r in spheres)
        orbit_radius = extent + orbit_clearance
    trajectory = orbit_trajectory(centroid, n_frames, orbit_radius, rng)
    return SphereScene(spheres, trajectory, noise_enabled, seed)


def default_eval_intrinsics() -> Intrinsics:
    return Intrinsics(fx=140.0, fy=140.0, cx=99.5, cy=74.5, width=200, height=150)


def render_sphere_depth(scene: SphereScene, pose: Pose, intr: Intrinsics,
                        rng=None) -> DepthFrame:
    """Nearest ray-sphere intersection depth per pixel; NaN where no sphere is hit.

    With scene.noise_enabled (and an rng), Gaussian axial noise with
    sigma(z) = 1.425e-3 * z^2 is added to the depth values.
    """
    eye = pose.translation
    for c, r in scene.spheres:
        if np.linalg.norm(eye - c) <= r:
            raise ValueError("camera inside a sphere")
    rays = pixel_rays(intr).reshape(-1, 3)
    ray_norm = np.linalg.norm(rays, axis=1)
    dirs_w = (rays / ray_norm[:, None]) @ pose.rotation.T

    s_best = np.full(len(rays), np.inf)
    for c, r in scene.spheres:
        oc = eye - c
        b = dirs_w @ oc
        disc = b * b - (oc @ oc - r * r)
        hit = disc >= 0.0
        s = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        s = np.where(s > 0.0, s, np.inf)
        s_best = np.minimum(s_best, s)

    z = np.where(np.isfinite(s_best), s_best / ray_norm, np.nan)
    if scene.noise_enabled:
        if rng is None:
            rng = np.random.default_rng(scene.seed)
        sigma = KINECT_NOISE_COEFF * np.square(np.nan_to_num(z))
        z = z + sigma * rng.standard_normal(len(z))
    return DepthFrame(z.reshape(intr.height, intr.width), intr)


def render_color_from_depth(depth: DepthFrame, pose: Pose, texture,
                            background: float = 0.5) -> ColorFrame:
    """Color image by texturing the surface a depth frame sees.

    `texture` maps (N, 3) world points to (N, 3) RGB in [0, 1]; pixels without
    valid depth get the constant background intensity.
    """
    intr = depth.intrinsics
    z = depth.values.reshape(-1)
    rays = pixel_rays(intr).reshape(-1, 3)
    hit = np.isfinite(z) & (z > 0.0)
    channels = np.full((len(rays), 3), background)
    if np.any(hit):
        p_world = pose.apply(rays[hit] * z[hit, None])
        channels[hit] = np.clip(texture(p_world), 0.0, 1.0)
    return ColorFrame(channels.reshape(intr.height, intr.width, 3), intr)


def render_sphere_color(scene: SphereScene, pose: Pose, intr: Intrinsics,
                        texture, background: float = 0.5) -> ColorFrame:
    """Ray-cast color image of a sphere scene (noise-free geometry)."""
    depth = render_sphere_depth(
        SphereScene(scene.spheres, scene.trajectory, False, scene.seed), pose, intr)
    return render_color_from_depth(depth, pose, texture, background)


def render_plane_depth(point, normal, pose: Pose, intr: Intrinsics) -> DepthFrame:
    """Analytic depth of the plane through `point` with outward `normal` (world frame)."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(point, dtype=float)
    rays = pixel_rays(intr).reshape(-1, 3)
    dirs_w = rays @ pose.rotation.T
    denom = dirs_w @ n
    num = (p0 - pose.translation) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        z = num / denom
    z = np.where((np.abs(denom) > 1e-12) & (z > 0.0), z, np.nan)
    return DepthFrame(z.reshape(intr.height, intr.width), intr)


def fuse_scene(scene: SphereScene, intr: Intrinsics, params: FusionParams,
               poses=None) -> GradientSdfVolume:
    """Render each trajectory pose, estimate normals and fuse at ground truth."""
    vol = params.new_volume()
    poses = scene.trajectory if poses is None else poses
    for i, pose in enumerate(poses):
        rng = np.random.default_rng([scene.seed, i]) if scene.noise_enabled else None
        depth = render_sphere_depth(scene, pose, intr, rng=rng)
        normals = estimate_normals(depth)
        integrate_frame(vol, depth, normals, pose, params)
    return vol


def gt_sphere_gradient(point, center) -> np.ndarray:
    """Ground-truth SDF gradient of a sphere: the radial unit vector."""
    diff = np.asarray(point, dtype=float) - np.asarray(center, dtype=float)
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        raise ValueError("gradient undefined at the sphere center")
    return diff / norm


def _nearest_sphere_gt(points: np.ndarray, scene: SphereScene,
                       medial_margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-point radial gt gradients and a validity mask excluding the medial region."""
    dists = np.stack([np.abs(np.linalg.norm(points - c, axis=1) - r)
                      for c, r in scene.spheres], axis=1)
    order = np.argsort(dists, axis=1)
    nearest = order[:, 0]
    ok = np.ones(len(points), dtype=bool)
    if dists.shape[1] > 1:
        second = order[:, 1]
        rows = np.arange(len(points))
        # within one voxel of the medial surface between two spheres
        ok &= (dists[rows, second] - dists[rows, nearest]) / 2.0 >= medial_margin
    grads = np.zeros((len(points), 3))
    for i, (c, _) in enumerate(scene.spheres):
        sel = nearest == i
        diff = points[sel] - c
        norms = np.linalg.norm(diff, axis=1)
        good = norms > 0.0
        grads[sel] = np.where(good[:, None], diff / np.where(good[:, None], norms[:, None], 1.0), 0.0)
        ok[sel] &= good
    return grads, ok


def finite_difference_gradient(vol: GradientSdfVolume, key, scheme: str) -> np.ndarray:
    """Per-axis finite-difference gradient of the stored distances at a voxel.

    scheme is one of forward / backward / central; raises IncompleteStencilError
    when a required neighbor is missing.
    """
    if scheme not in FD_SCHEMES:
        raise ValueError("unknown scheme %r" % scheme)
    key = np.asarray(key, dtype=np.int64).reshape(3)
    grads, valid = finite_difference_gradients(vol, key.reshape(1, 3), scheme)
    if not valid[0]:
        raise IncompleteStencilError(
            "incomplete stencil for %s differences at %s" % (scheme, tuple(key.tolist())))
    return grads[0]


def finite_difference_gradients(vol: GradientSdfVolume, keys, scheme: str
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized finite differences for (N, 3) keys; returns (grads, valid)."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    n = len(keys)
    v_s = vol.voxel_size
    eye = np.eye(3, dtype=np.int64)

    def psi_at(offset):
        rows = vol.find_rows(keys + offset)
        ok = rows >= 0
        vals = np.where(ok, vol.psi[np.where(ok, rows, 0)], 0.0)
        return vals, ok

    grads = np.zeros((n, 3))
    valid = np.ones(n, dtype=bool)
    for axis in range(3):
        if scheme == "forward":
            nxt, ok_n = psi_at(eye[axis])
            here, ok_h = psi_at(np.zeros(3, dtype=np.int64))
            grads[:, axis] = (nxt - here) / v_s
            valid &= ok_n & ok_h
        elif scheme == "backward":
            here, ok_h = psi_at(np.zeros(3, dtype=np.int64))
            prv, ok_p = psi_at(-eye[axis])
            grads[:, axis] = (here - prv) / v_s
            valid &= ok_h & ok_p
        else:
            nxt, ok_n = psi_at(eye[axis])
            prv, ok_p = psi_at(-eye[axis])
            grads[:, axis] = (nxt - prv) / (2.0 * v_s)
            valid &= ok_n & ok_p
    grads[~valid] = 0.0
    return grads, valid


@dataclass
class DeviationStats:
    """Angular deviation (degrees) from ground truth per scheme and band threshold."""

    thresholds: np.ndarray                  # (X,) in voxel units
    schemes: dict = field(default_factory=dict)  # name -> dict(mean/median/p95 -> (X,))
    counts: np.ndarray | None = None        # voxels per threshold

    def row(self, scheme: str, threshold: int) -> tuple[float, float, float]:
        i = int(np.where(self.thresholds == threshold)[0][0])
        s = self.schemes[scheme]
        return s["mean"][i], s["median"][i], s["p95"][i]


def _angles_deg(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    dots = np.clip(np.einsum("ij,ij->i", est, gt)
                   / np.maximum(np.linalg.norm(est, axis=1), 1e-300), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def gradient_deviation_stats(vol: GradientSdfVolume, scene: SphereScene,
                             max_band: int = 10) -> DeviationStats:
    """Mean/median/p95 angular deviation per scheme over increasing band widths.

    Statistics at threshold x cover every voxel with |psi| <= x * voxel_size
    that has complete data for all schemes (stored gradient plus the three
    finite-difference stencils) and an unambiguous ground-truth direction.

    Under the free-space-negative sign convention the analytic gradient of a
    sphere's distance field is the inward radial direction, so estimates are
    compared against the negated radial vector.
    """
    keys = vol.keys
    v_s = vol.voxel_size
    centers = keys.astype(float) * v_s

    gt, gt_ok = _nearest_sphere_gt(centers, scene, medial_margin=v_s)
    gt = -gt
    ghat, stored_ok = vol.normalized_gradients()
    estimates = {"stored": ghat}
    complete = gt_ok & stored_ok
    for scheme in FD_SCHEMES:
        grads, ok = finite_difference_gradients(vol, keys, scheme)
        estimates[scheme] = grads
        complete &= ok

    angles = {name: _angles_deg(est[complete], gt[complete])
              for name, est in estimates.items()}
    abs_psi = np.abs(vol.psi[complete])

    thresholds = np.arange(1, max_band + 1)
    stats = DeviationStats(thresholds=thresholds,
                           counts=np.zeros(max_band, dtype=np.int64))
    for name in estimates:
        stats.schemes[name] = {k: np.full(max_band, np.nan) for k in ("mean", "median", "p95")}
    for i, x in enumerate(thresholds):
        sel = abs_psi <= x * v_s
        stats.counts[i] = int(sel.sum())
        if stats.counts[i] == 0:
            continue
        for name in estimates:
            a = angles[name][sel]
            stats.schemes[name]["mean"][i] = float(np.mean(a))
            stats.schemes[name]["median"][i] = float(np.median(a))
            stats.schemes[name]["p95"][i] = float(np.percentile(a, 95.0))
    return stats


def write_stats_csv(stats: DeviationStats, path) -> None:
    """CSV rows: threshold, scheme, mean, median, p95."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "scheme", "mean", "median", "p95"])
        for i, x in enumerate(stats.thresholds):
            for name, s in stats.schemes.items():
                writer.writerow([int(x), name,
                                 "%.6f" % s["mean"][i],
                                 "%.6f" % s["median"][i],
                                 "%.6f" % s["p95"][i]])


def write_stats_plot_data(stats: DeviationStats, path) -> None:
    """Gnuplot-friendly columns: threshold then mean/median/p95 per scheme."""
    names = list(stats.schemes)
    with open(path, "w") as f:
        header = ["threshold"]
        for name in names:
            header += ["%s_%s" % (name, k) for k in ("mean", "median", "p95")]
        f.write("# " + " ".join(header) + "\n")
        for i, x in enumerate(stats.thresholds):
            row = ["%d" % int(x)]
            for name in names:
                s = stats.schemes[name]
                row += ["%.6f" % s[k][i] for k in ("mean", "median", "p95")]
            f.write(" ".join(row) + "\n")


def write_gradient_slice_images(vol: GradientSdfVolume, scene: SphereScene,
                                out_dir, n_slices: int = 5) -> list:
    """Normal-map slice PNGs, color-coded (n + 1) / 2, one file per scheme and slice.

    Slices are taken perpendicular to z through the occupied bounding box; the
    ground-truth radial direction is written alongside the estimates.
    """
    from pathlib import Path
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kmin, kmax = vol.bounding_box()
    zs = np.linspace(kmin[2], kmax[2], n_slices + 2).astype(np.int64)[1:-1]
    nx = int(kmax[0] - kmin[0] + 1)
    ny = int(kmax[1] - kmin[1] + 1)

    keys = vol.keys
    ghat, stored_ok = vol.normalized_gradients()
    centers = keys.astype(float) * vol.voxel_size
    gt, gt_ok = _nearest_sphere_gt(centers, scene, medial_margin=vol.voxel_size)
    gt = -gt  # inward: the gradient convention of the stored field
    fields = {"gt": (gt, gt_ok), "stored": (ghat, stored_ok)}
    for scheme in FD_SCHEMES:
        grads, ok = finite_difference_gradients(vol, keys, scheme)
        norms = np.linalg.norm(grads, axis=1)
        ok &= norms > 0.0
        grads = np.where(ok[:, None], grads / np.where(ok[:, None], norms[:, None], 1.0), 0.0)
        fields[scheme] = (grads, ok)

    written = []
    for z in zs:
        in_slice = keys[:, 2] == z
        ix = (keys[in_slice, 0] - kmin[0]).astype(int)
        iy = (keys[in_slice, 1] - kmin[1]).astype(int)
        for name, (vecs, ok) in fields.items():
            img = np.zeros((ny, nx, 3), dtype=np.uint8)
            good = ok[in_slice]
            rgb = np.clip((vecs[in_slice][good] + 1.0) / 2.0, 0.0, 1.0)
            img[iy[good], ix[good]] = (rgb * 255.0).astype(np.uint8)
            path = out_dir / ("slice_z%+04d_%s.png" % (int(z), name))
            Image.fromarray(img, mode="RGB").save(path)
            written.append(path)
    return written
