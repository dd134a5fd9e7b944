"""Implicit photometric refinement of keyframe poses and voxel distances.

Every surface-band voxel encodes a surface point p_s = v - psi * ghat. The
cost penalizes, per voxel and color channel, the deviation of each keyframe's
intensity at the projected surface point from the mean over keyframes, plus a
regularizer anchoring distances to their depth-fused initialization.

Pose optimization comes in two flavors: per-frame energies minimized
simultaneously against frozen means (linear in the frame count), and a joint
system over all poses that differentiates through the means (quadratic in the
frame count, frame 0 fixed as gauge). Distances are refined per voxel with the
gradient direction held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import ColorFrame, DepthFrame, Pose, bilinear_gradient_batch, \
    bilinear_sample_batch, project_batch, se3_exp
from .volume import EPS_GRADIENT, GradientSdfVolume

__all__ = [
    "Keyframe",
    "BaParams",
    "BaReport",
    "ObservationTable",
    "select_keyframes",
    "project_voxel_surface_point",
    "surface_voxel_rows",
    "gather_observations",
    "photometric_energy",
    "ba_energy",
    "optimize_poses",
    "optimize_distances",
    "bundle_adjust",
    "mean_voxel_color",
]


@dataclass
class Keyframe:
    """Color keyframe whose pose is optimized in place; depth is optional and
    only used for the visibility (occlusion) test."""

    id: int
    color: ColorFrame
    pose: Pose
    depth: DepthFrame | None = None


@dataclass
class BaParams:
    keyframe_ratio: float = 0.10
    robust_delta: float | None = 0.1       # Huber width in intensity units; None = quadratic
    regularizer_weight: float = 0.01       # lambda, cm^-2
    max_outer_iterations: int = 10
    pose_only: bool = False
    decoupled: bool = True
    surface_band: float | None = None      # meters; defaults to one voxel
    depth_band_voxels: float = 3.0         # visibility depth-consistency width
    convergence_threshold: float = 1e-6    # on the largest twist update

    def __post_init__(self):
        if not (0.0 < self.keyframe_ratio <= 1.0):
            raise ValueError("keyframe_ratio must lie in (0, 1]")
        if self.regularizer_weight < 0.0:
            raise ValueError("regularizer_weight must be >= 0")


@dataclass
class BaReport:
    outer_iterations: int
    converged: bool
    energy_history: list = field(default_factory=list)
    max_pose_update: float = float("inf")


def select_keyframes(frames, ratio: float) -> list:
    """Every ceil(1/ratio)-th element starting at index 0."""
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must lie in (0, 1]")
    step = math.ceil(1.0 / ratio)
    return list(frames)[::step]


@dataclass
class ObservationTable:
    """Dense observation arrays over keyframes x voxels.

    visibility[i, j] is 1 when voxel j's surface point lands strictly inside
    frame i with positive depth (and passes the optional depth test);
    intensities / pixels / gradients are only meaningful where visible.
    """

    keys: np.ndarray          # (J, 3) voxel keys
    rows: np.ndarray          # (J,) rows into the volume arrays
    surface_points: np.ndarray  # (J, 3)
    ghat: np.ndarray          # (J, 3) fixed gradient directions
    visibility: np.ndarray    # (F, J) bool
    pixels: np.ndarray        # (F, J, 2)
    intensities: np.ndarray   # (F, J, 3)
    gradients: np.ndarray | None = None  # (F, J, 3, 2) image gradients

    @property
    def n_obs(self) -> np.ndarray:
        return self.visibility.sum(axis=0)

    def means(self) -> np.ndarray:
        """Per-voxel mean intensity over visible frames, zero where unseen."""
        n = self.n_obs
        s = np.where(self.visibility[..., None], self.intensities, 0.0).sum(axis=0)
        return s / np.maximum(n, 1)[:, None]


def surface_voxel_rows(vol: GradientSdfVolume, band: float | None = None
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows, keys and unit gradients of voxels with |psi| <= band and a usable gradient."""
    band = vol.voxel_size if band is None else band
    ghat, ok = vol.normalized_gradients()
    sel = ok & (np.abs(vol.psi) <= band) & (vol.weights > 0.0)
    rows = np.nonzero(sel)[0]
    return rows, vol.keys[rows], ghat[rows]


def _visibility_and_pixels(vol, surface_points, keyframe, depth_band_voxels):
    p_cam = keyframe.pose.apply_inverse(surface_points)
    intr = keyframe.color.intrinsics
    uv, in_front = project_batch(intr, p_cam)
    nu = in_front & (uv[:, 0] >= 0.0) & (uv[:, 0] <= intr.width - 1) \
        & (uv[:, 1] >= 0.0) & (uv[:, 1] <= intr.height - 1)
    if keyframe.depth is not None:
        # occlusion test on all four bilinear neighbors: a surface point whose
        # footprint straddles a depth discontinuity (silhouette) is invisible
        band = depth_band_voxels * vol.voxel_size
        h, w = keyframe.depth.values.shape
        u0 = np.clip(np.floor(uv[:, 0]).astype(int), 0, w - 1)
        v0 = np.clip(np.floor(uv[:, 1]).astype(int), 0, h - 1)
        u1 = np.minimum(u0 + 1, w - 1)
        v1 = np.minimum(v0 + 1, h - 1)
        with np.errstate(invalid="ignore"):
            for vv, uu in ((v0, u0), (v0, u1), (v1, u0), (v1, u1)):
                d_obs = keyframe.depth.values[vv, uu]
                nu &= np.isfinite(d_obs) & (d_obs > 0.0) \
                    & (np.abs(p_cam[:, 2] - d_obs) <= band)
    return uv, nu, p_cam


def project_voxel_surface_point(vol: GradientSdfVolume, key, keyframe: Keyframe,
                                depth_band_voxels: float = 3.0
                                ) -> tuple[np.ndarray, bool]:
    """Project one voxel's surface point into a keyframe; returns (uv, visible)."""
    voxel = vol.voxel(key)
    norm = float(np.linalg.norm(voxel.grad))
    if voxel.weight <= 0.0 or norm <= EPS_GRADIENT:
        raise ValueError("voxel has no usable gradient")
    p_s = np.asarray(key, dtype=float) * vol.voxel_size - voxel.dist * voxel.grad / norm
    uv, nu, _ = _visibility_and_pixels(vol, p_s.reshape(1, 3), keyframe, depth_band_voxels)
    return uv[0], bool(nu[0])


def gather_observations(vol: GradientSdfVolume, keyframes, rows=None,
                        band: float | None = None, with_gradients: bool = False,
                        depth_band_voxels: float = 3.0) -> ObservationTable:
    """Project surface points of the selected voxels into every keyframe."""
    if rows is None:
        rows, keys, ghat = surface_voxel_rows(vol, band)
    else:
        rows = np.asarray(rows, dtype=np.int64)
        keys = vol.keys[rows]
        g = vol.gradients[rows]
        norms = np.linalg.norm(g, axis=1)
        if np.any(norms <= EPS_GRADIENT):
            raise ValueError("selected voxels include degenerate gradients")
        ghat = g / norms[:, None]
    psi = vol.psi[rows]
    p_s = keys.astype(float) * vol.voxel_size - psi[:, None] * ghat

    n_f, n_j = len(keyframes), len(rows)
    visibility = np.zeros((n_f, n_j), dtype=bool)
    pixels = np.zeros((n_f, n_j, 2))
    intensities = np.zeros((n_f, n_j, 3))
    gradients = np.zeros((n_f, n_j, 3, 2)) if with_gradients else None
    for i, kf in enumerate(keyframes):
        uv, nu, _ = _visibility_and_pixels(vol, p_s, kf, depth_band_voxels)
        visibility[i] = nu
        pixels[i] = uv
        for c in range(3):
            image = kf.color.channels[..., c]
            if with_gradients:
                vals, grads, ok = bilinear_gradient_batch(image, uv)
                gradients[i, :, c, :] = grads
            else:
                vals, ok = bilinear_sample_batch(image, uv)
            intensities[i, :, c] = vals
    return ObservationTable(keys, rows, p_s, ghat, visibility, pixels,
                            intensities, gradients)


def _robust_cost(r: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return r * r
    a = np.abs(r)
    return np.where(a <= delta, r * r, delta * (2.0 * a - delta))


def _robust_weights(r: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return np.ones_like(r)
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def photometric_energy(intensities, visibility, robust_delta: float | None = None) -> float:
    """Core cost over an observation table: sum of Phi(I - per-voxel mean).

    With a quadratic Phi this equals the weighted per-voxel intensity variance
    sum, N_j * Var over frames, per channel.
    """
    intensities = np.asarray(intensities, dtype=float)
    nu = np.asarray(visibility, dtype=bool)
    n = nu.sum(axis=0)
    seen = n > 0
    masked = np.where(nu[..., None], intensities, 0.0)
    means = masked.sum(axis=0) / np.maximum(n, 1)[:, None]
    r = np.where(nu[..., None], intensities - means[None], 0.0)
    cost = _robust_cost(r, robust_delta)
    return float(cost[:, seen, :].sum())


def _regularizer(psi, psi_ref, weight_cm2: float) -> float:
    delta_cm = 100.0 * (np.asarray(psi) - np.asarray(psi_ref))
    return float(weight_cm2 * np.sum(delta_cm * delta_cm))


def ba_energy(vol: GradientSdfVolume, keyframes, params: BaParams,
              psi_reference=None, rows=None) -> float:
    """Full cost at the current poses/distances: photometric term + regularizer."""
    obs = gather_observations(vol, keyframes, rows=rows, band=params.surface_band,
                              depth_band_voxels=params.depth_band_voxels)
    e = photometric_energy(obs.intensities, obs.visibility, params.robust_delta)
    if psi_reference is not None and params.regularizer_weight > 0.0:
        e += _regularizer(vol.psi[obs.rows], psi_reference, params.regularizer_weight)
    return e


def _pose_jacobian_rows(obs: ObservationTable, keyframes, frame: int,
                        intr) -> np.ndarray:
    """d residual / d twist for one frame: (J, C, 6), zero where invisible."""
    pose = keyframes[frame].pose
    nu = obs.visibility[frame]
    p_s = obs.surface_points
    p_c = pose.apply_inverse(p_s)
    z = np.where(nu, p_c[:, 2], 1.0)

    duv = np.zeros((len(p_s), 2, 3))
    duv[:, 0, 0] = intr.fx / z
    duv[:, 0, 2] = -intr.fx * p_c[:, 0] / (z * z)
    duv[:, 1, 1] = intr.fy / z
    duv[:, 1, 2] = -intr.fy * p_c[:, 1] / (z * z)

    # d p_cam / d twist under P <- exp(delta) P: [-R^T | R^T [p_s]x]
    Rt = pose.rotation.T
    dpc = np.empty((len(p_s), 3, 6))
    dpc[:, :, :3] = -Rt
    sk = np.zeros((len(p_s), 3, 3))
    sk[:, 0, 1] = -p_s[:, 2]
    sk[:, 0, 2] = p_s[:, 1]
    sk[:, 1, 0] = p_s[:, 2]
    sk[:, 1, 2] = -p_s[:, 0]
    sk[:, 2, 0] = -p_s[:, 1]
    sk[:, 2, 1] = p_s[:, 0]
    dpc[:, :, 3:] = np.einsum("ab,nbc->nac", Rt, sk)

    grad_img = obs.gradients[frame]            # (J, C, 2)
    A = np.einsum("nck,nkl,nlm->ncm", grad_img, duv, dpc)
    A[~nu] = 0.0
    return A


def _solve_damped(H: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    lam = 0.0
    for _ in range(8):
        try:
            return -cho_solve(cho_factor(H + lam * np.eye(len(H))), b)
        except np.linalg.LinAlgError:
            tr = np.trace(H)
            lam = max(1e-10 * tr, 1e-12) if lam == 0.0 else lam * 100.0
    return None


def _pose_sweep_decoupled(vol, keyframes, params, obs) -> float:
    """One simultaneous Gauss-Newton step per frame against frozen means."""
    means = obs.means()
    max_step = 0.0
    for i, kf in enumerate(keyframes):
        nu = obs.visibility[i]
        if nu.sum() == 0:
            continue
        r = np.where(nu[:, None], obs.intensities[i] - means, 0.0)
        w = _robust_weights(r, params.robust_delta) * nu[:, None]
        A = _pose_jacobian_rows(obs, keyframes, i, kf.color.intrinsics)
        H = np.einsum("nce,nc,ncd->ed", A, w, A)
        b = np.einsum("nce,nc,nc->e", A, w, r)
        step = _solve_damped(H, b)
        if step is None:
            continue
        kf.pose = se3_exp(step).compose(kf.pose)
        max_step = max(max_step, float(np.linalg.norm(step)))
    return max_step


def _pose_sweep_coupled(vol, keyframes, params, obs) -> float:
    """One joint Gauss-Newton step over all poses, frame 0 held fixed.

    The Jacobian goes through the per-voxel means, which couples every pair of
    frames observing a common voxel.
    """
    n_f = len(keyframes)
    if n_f < 2:
        raise ValueError("coupled pose optimization needs >= 2 keyframes")
    means = obs.means()
    nu = obs.visibility
    n = np.maximum(obs.n_obs, 1).astype(float)          # (J,)

    A = np.stack([_pose_jacobian_rows(obs, keyframes, i, keyframes[i].color.intrinsics)
                  for i in range(n_f)])                  # (F, J, C, 6)
    r = np.where(nu[..., None], obs.intensities - means[None], 0.0)
    w = _robust_weights(r, params.robust_delta) * nu[..., None]

    J = obs.visibility.shape[1]
    m = J * 3
    A = A.reshape(n_f, m, 6)
    r = r.reshape(n_f, m)
    w = w.reshape(n_f, m)
    n_m = np.repeat(n, 3)                                # (M,)

    wA = w[:, :, None] * A
    G1 = np.einsum("fme,fmd->fed", wA, A)                # diagonal blocks, part 1
    A_over_n = A / n_m[None, :, None]
    term_a = -np.einsum("kme,lmd->kled", w[:, :, None] * A_over_n, A)
    term_b = term_a.transpose(1, 0, 3, 2)
    s_w = w.sum(axis=0)                                  # (M,)
    term_c = np.einsum("m,kme,lmd->kled", s_w / (n_m * n_m), A, A)

    H_blocks = term_a + term_b + term_c
    H_blocks[np.arange(n_f), np.arange(n_f)] += G1

    s_wr = (w * r).sum(axis=0)                           # (M,)
    b_blocks = np.einsum("fme,fm->fe", wA, r) \
        - np.einsum("m,fme->fe", s_wr, A_over_n)

    # gauge: frame 0 fixed
    free = n_f - 1
    H = H_blocks[1:, 1:].transpose(0, 2, 1, 3).reshape(6 * free, 6 * free)
    b = b_blocks[1:].reshape(6 * free)
    step = _solve_damped(H, b)
    if step is None:
        return 0.0
    max_step = 0.0
    for i in range(free):
        xi = step[6 * i:6 * (i + 1)]
        keyframes[i + 1].pose = se3_exp(xi).compose(keyframes[i + 1].pose)
        max_step = max(max_step, float(np.linalg.norm(xi)))
    return max_step


def _distance_sweep(vol, keyframes, params, obs, psi_ref) -> float:
    """Per-voxel scalar Gauss-Newton step on the distances, gradients fixed."""
    means = obs.means()
    nu = obs.visibility
    n = obs.n_obs
    r = np.where(nu[..., None], obs.intensities - means[None], 0.0)
    w = _robust_weights(r, params.robust_delta) * nu[..., None]

    # dI/dpsi = grad_I . duv/dp_cam . (-R^T ghat), per frame and channel
    a = np.zeros(r.shape)                                 # (F, J, C)
    for i, kf in enumerate(keyframes):
        intr = kf.color.intrinsics
        p_c = kf.pose.apply_inverse(obs.surface_points)
        z = np.where(nu[i], p_c[:, 2], 1.0)
        duv = np.zeros((len(z), 2, 3))
        duv[:, 0, 0] = intr.fx / z
        duv[:, 0, 2] = -intr.fx * p_c[:, 0] / (z * z)
        duv[:, 1, 1] = intr.fy / z
        duv[:, 1, 2] = -intr.fy * p_c[:, 1] / (z * z)
        dpc_dpsi = -(obs.ghat @ kf.pose.rotation)         # (J, 3)
        duv_dpsi = np.einsum("nkl,nl->nk", duv, dpc_dpsi)  # (J, 2)
        a[i] = np.einsum("nck,nk->nc", obs.gradients[i], duv_dpsi)
    a = np.where(nu[..., None], a, 0.0)

    lam = params.regularizer_weight * 1e4                 # cm^-2 against meters
    psi = vol.psi[obs.rows]
    num = np.einsum("fjc,fjc,fjc->j", w, a, r) + lam * (psi - psi_ref)
    den = np.einsum("fjc,fjc,fjc->j", w, a, a) + lam
    ok = (n >= 2) & (den > 0.0)
    step = np.zeros(len(psi))
    step[ok] = -num[ok] / den[ok]
    vol.set_distances(obs.rows[ok], psi[ok] + step[ok])
    return float(np.max(np.abs(step))) if np.any(ok) else 0.0


def optimize_poses(vol: GradientSdfVolume, keyframes, params: BaParams | None = None
                   ) -> BaReport:
    """Refine keyframe poses only; distances stay fixed.

    Decoupled mode steps every frame simultaneously against frozen means and
    refreshes the means between sweeps; coupled mode takes joint steps with
    frame 0 fixed.
    """
    params = params or BaParams()
    if len(keyframes) < 2:
        raise ValueError("need at least 2 keyframes")
    report = BaReport(0, False)
    for outer in range(params.max_outer_iterations):
        obs = gather_observations(vol, keyframes, band=params.surface_band,
                                  with_gradients=True,
                                  depth_band_voxels=params.depth_band_voxels)
        report.energy_history.append(
            photometric_energy(obs.intensities, obs.visibility, params.robust_delta))
        if params.decoupled:
            max_step = _pose_sweep_decoupled(vol, keyframes, params, obs)
        else:
            max_step = _pose_sweep_coupled(vol, keyframes, params, obs)
        report.outer_iterations = outer + 1
        report.max_pose_update = max_step
        if max_step < params.convergence_threshold:
            report.converged = True
            break
    return report


def optimize_distances(vol: GradientSdfVolume, keyframes, params: BaParams | None = None,
                       psi_reference=None) -> BaReport:
    """Refine voxel distances only; poses stay fixed for the whole call."""
    params = params or BaParams()
    report = BaReport(0, False)
    rows0, _, _ = surface_voxel_rows(vol, params.surface_band)
    if psi_reference is None:
        psi_reference = vol.psi[rows0].copy()
    ref_by_row = dict(zip(rows0.tolist(), np.asarray(psi_reference, dtype=float)))
    for outer in range(params.max_outer_iterations):
        obs = gather_observations(vol, keyframes, band=params.surface_band,
                                  with_gradients=True,
                                  depth_band_voxels=params.depth_band_voxels)
        report.energy_history.append(
            photometric_energy(obs.intensities, obs.visibility, params.robust_delta))
        psi_ref = np.array([ref_by_row.get(int(rw), vol.psi[rw]) for rw in obs.rows])
        max_step = _distance_sweep(vol, keyframes, params, obs, psi_ref)
        report.outer_iterations = outer + 1
        report.max_pose_update = max_step
        if max_step < params.convergence_threshold:
            report.converged = True
            break
    return report


def bundle_adjust(vol: GradientSdfVolume, keyframes, params: BaParams | None = None
                  ) -> BaReport:
    """Alternating refinement: a pose sweep then a distance sweep per outer iteration."""
    params = params or BaParams()
    if len(keyframes) < 2:
        raise ValueError("need at least 2 keyframes")
    rows0, _, _ = surface_voxel_rows(vol, params.surface_band)
    ref_by_row = dict(zip(rows0.tolist(), vol.psi[rows0].copy()))
    report = BaReport(0, False)
    for outer in range(params.max_outer_iterations):
        obs = gather_observations(vol, keyframes, band=params.surface_band,
                                  with_gradients=True,
                                  depth_band_voxels=params.depth_band_voxels)
        report.energy_history.append(
            photometric_energy(obs.intensities, obs.visibility, params.robust_delta))
        if params.decoupled:
            pose_step = _pose_sweep_decoupled(vol, keyframes, params, obs)
        else:
            pose_step = _pose_sweep_coupled(vol, keyframes, params, obs)
        dist_step = 0.0
        if not params.pose_only:
            obs = gather_observations(vol, keyframes, band=params.surface_band,
                                      with_gradients=True,
                                      depth_band_voxels=params.depth_band_voxels)
            psi_ref = np.array([ref_by_row.get(int(rw), vol.psi[rw]) for rw in obs.rows])
            dist_step = _distance_sweep(vol, keyframes, params, obs, psi_ref)
        report.outer_iterations = outer + 1
        report.max_pose_update = max(pose_step, dist_step)
        if max(pose_step, dist_step) < params.convergence_threshold:
            report.converged = True
            break
    return report


def mean_voxel_color(vol: GradientSdfVolume, keyframes, rows=None,
                     depth_band_voxels: float = 3.0
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean reprojected color per voxel: (keys, colors (J, 3), has_color (J,)).

    Voxels never seen by any keyframe are flagged colorless (has_color False).
    """
    if rows is None:
        ghat, ok = vol.normalized_gradients()
        rows = np.nonzero(ok & (vol.weights > 0.0))[0]
    obs = gather_observations(vol, keyframes, rows=rows,
                              depth_band_voxels=depth_band_voxels)
    n = obs.n_obs
    colors = obs.means()
    return obs.keys, colors, n > 0
