"""Frame-to-model camera tracking on the gradient-augmented distance volume.

The tracker minimizes the sum of Huber-weighted squared signed distances of
the back-projected depth points, where distance and gradient at each point
come from the single-lookup first-order query. The closed-form point-to-point
and point-to-plane distance approximations are included as reference formulas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import DepthFrame, Pose, pixel_rays, se3_exp
from .volume import GradientSdfVolume

__all__ = [
    "TrackingParams",
    "TrackResult",
    "InsufficientOverlapError",
    "residual_and_jacobian",
    "track_frame",
    "icp_point_to_point",
    "icp_point_to_plane",
]


class InsufficientOverlapError(RuntimeError):
    """Too few valid residuals between the frame and the model."""


@dataclass
class TrackingParams:
    max_iterations: int = 20
    convergence_threshold: float = 1e-5   # on the twist-update norm
    huber_delta: float = 0.02             # meters
    subsample_stride: int = 2
    min_residuals: int = 100

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.huber_delta <= 0.0:
            raise ValueError("huber_delta must be positive")


@dataclass
class TrackResult:
    pose: Pose
    final_cost: float          # mean robust cost per residual, m^2
    iterations: int
    inlier_count: int
    cost_history: list = field(default_factory=list)


def residual_and_jacobian(vol: GradientSdfVolume, p_cam, pose: Pose) -> tuple[float, np.ndarray]:
    """Signed-distance residual and its 1x6 Jacobian for one camera-frame point.

    Under left-multiplicative (v, omega) updates the Jacobian is
    [ghat^T, (p_world x ghat)^T].
    """
    p_world = pose.apply(np.asarray(p_cam, dtype=float).reshape(3))
    d, ghat = vol.taylor_query(p_world)
    return d, np.concatenate([ghat, np.cross(p_world, ghat)])


def icp_point_to_point(p, q) -> tuple[float, np.ndarray]:
    """Unsigned nearest-point distance and gradient: d = ||p - q||."""
    diff = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise ValueError("point-to-point gradient undefined at p == q")
    return d, diff / d


def icp_point_to_plane(p, q, n) -> tuple[float, np.ndarray]:
    """Signed plane distance and gradient: d = n^T (p - q), grad = n."""
    n = np.asarray(n, dtype=float)
    d = float(n @ (np.asarray(p, dtype=float) - np.asarray(q, dtype=float)))
    return d, n


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber_cost(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, r * r, delta * (2.0 * a - delta))


def _evaluate(vol, pts_cam, pose, delta):
    """Residuals, Jacobians and mean robust cost at a pose; drops invalid points."""
    p_world = pose.apply(pts_cam)
    d, ghat, valid = vol.taylor_query_batch(p_world)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return None
    r = d[valid]
    pw = p_world[valid]
    g = ghat[valid]
    J = np.concatenate([g, np.cross(pw, g)], axis=1)
    cost = float(np.mean(_huber_cost(r, delta)))
    return r, J, cost, n_valid


def track_frame(vol: GradientSdfVolume, depth: DepthFrame, init: Pose,
                params: TrackingParams | None = None) -> TrackResult:
    """Gauss-Newton pose refinement of a depth frame against the volume.

    Iterates Huber-reweighted normal equations solved by Cholesky, with a
    damped retry when the step fails or does not decrease the mean robust
    cost; stops when the twist-update norm drops below the threshold.
    """
    params = params or TrackingParams()
    intr = depth.intrinsics
    s = params.subsample_stride
    z = depth.values[::s, ::s]
    rays = pixel_rays(intr)[::s, ::s]
    valid = np.isfinite(z) & (z > 0.0)
    pts_cam = (rays * z[..., None])[valid]
    if len(pts_cam) < params.min_residuals:
        raise InsufficientOverlapError(
            "insufficient overlap: %d valid depth points" % len(pts_cam))

    pose = init
    delta_h = params.huber_delta
    state = _evaluate(vol, pts_cam, pose, delta_h)
    if state is None or state[3] < params.min_residuals:
        raise InsufficientOverlapError(
            "insufficient overlap: %d residuals against the model"
            % (0 if state is None else state[3]))
    r, J, cost, n_valid = state

    history = [cost]
    iterations = 0
    for _ in range(params.max_iterations):
        w = _huber_weights(r, delta_h)
        H = J.T @ (w[:, None] * J)
        b = J.T @ (w * r)

        accepted = None
        solved_any = False
        lam = 0.0
        for attempt in range(6):
            Hd = H + lam * np.eye(6)
            try:
                step = -cho_solve(cho_factor(Hd), b)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                solved_any = True
                candidate = se3_exp(step).compose(pose)
                cand = _evaluate(vol, pts_cam, candidate, delta_h)
                if cand is not None and cand[3] >= params.min_residuals \
                        and cand[2] <= cost + 1e-15:
                    accepted = (step, candidate, cand)
                    break
            lam = 1e-6 * np.trace(H) if lam == 0.0 else lam * 10.0
        if not solved_any:
            raise RuntimeError("tracking normal equations singular after damping")
        if accepted is None:
            break  # no improving step left: converged

        step, pose, (r, J, cost, n_valid) = accepted
        iterations += 1
        history.append(cost)
        if np.linalg.norm(step) < params.convergence_threshold:
            break

    inliers = int(np.sum(np.abs(r) <= delta_h))
    return TrackResult(pose, cost, iterations, inliers, history)
