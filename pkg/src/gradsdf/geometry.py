"""Rigid transforms on SE(3), the pinhole camera model, and sub-pixel image sampling.

Conventions used throughout the package:
  * a pose (R, t) maps camera coordinates to world coordinates, so projecting a
    world point goes through R^T (p_w - t);
  * twists are laid out (v, omega) with left-multiplicative updates
    P <- se3_exp(delta) * P;
  * image arrays are indexed [row, col] = [v, u], depth in meters, +z forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "Intrinsics",
    "DepthFrame",
    "ColorFrame",
    "se3_exp",
    "skew",
    "project",
    "project_batch",
    "backproject",
    "pixel_rays",
    "bilinear_sample",
    "bilinear_sample_batch",
    "bilinear_gradient_batch",
]

_ORTHO_TOL = 1e-6


def skew(w) -> np.ndarray:
    """Cross-product matrix: skew(w) @ x == cross(w, x)."""
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid body transform: p_world = rotation @ p_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Camera -> world for one (3,) point or a batch (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        """World -> camera: R^T (p - t)."""
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def se3_exp(twist) -> Pose:
    """Exponential map of a (v, omega) twist via Rodrigues' formula.

    Uses the closed-form V matrix for the translation part and a second-order
    series below ||omega|| = 1e-8, so se3_exp(0) is exactly the identity.
    """
    xi = np.asarray(twist, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = skew(w)
    W2 = W @ W
    if theta < 1e-8:
        R = np.eye(3) + W + 0.5 * W2
        V = np.eye(3) + 0.5 * W + W2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * W + ((1.0 - c) / theta**2) * W2
        V = (np.eye(3) + ((1.0 - c) / theta**2) * W
             + ((theta - s) / theta**3) * W2)
    return Pose(R, V @ v)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


def project(intr: Intrinsics, p_cam) -> np.ndarray:
    """Perspective projection of a camera-frame point to pixel coordinates."""
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if z <= 0.0:
        raise ValueError("behind camera: z = %g" % z)
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_batch(intr: Intrinsics, p_cam) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv (N, 2), in_front (N,)).

    Points with z <= 0 get undefined uv and in_front = False instead of an error.
    """
    p = np.asarray(p_cam, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    in_front = z > 0.0
    zs = np.where(in_front, z, 1.0)
    uv = np.empty((len(p), 2))
    uv[:, 0] = intr.fx * p[:, 0] / zs + intr.cx
    uv[:, 1] = intr.fy * p[:, 1] / zs + intr.cy
    return uv, in_front


def backproject(intr: Intrinsics, uv, depth: float) -> np.ndarray:
    """Inverse of project: pixel + depth (z, meters) -> camera-frame point."""
    if depth <= 0.0:
        raise ValueError("invalid depth: %g" % depth)
    u, v = np.asarray(uv, dtype=float).reshape(2)
    return np.array([(u - intr.cx) / intr.fx * depth,
                     (v - intr.cy) / intr.fy * depth,
                     depth])


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions at unit depth, shape (height, width, 3).

    Multiplying by a depth map gives back-projected points for the whole image.
    """
    u = np.arange(intr.width, dtype=float)
    v = np.arange(intr.height, dtype=float)
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = (u[None, :] - intr.cx) / intr.fx
    rays[..., 1] = (v[:, None] - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    return rays


@dataclass
class DepthFrame:
    """Depth image in meters; 0 or NaN marks invalid pixels."""

    values: np.ndarray
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        z = np.asarray(self.values, dtype=float)
        if z.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("depth shape does not match intrinsics")
        finite = np.isfinite(z)
        if np.any(z[finite] < 0.0):
            raise ValueError("negative depth values")
        self.values = z

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0.0)


@dataclass
class ColorFrame:
    """RGB image with intensities normalized to [0, 1], shape (H, W, 3)."""

    channels: np.ndarray
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=float)
        if c.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise ValueError("color shape does not match intrinsics")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        self.channels = c


def _bilinear_values(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = image.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    return ((1 - fu) * (1 - fv) * image[v0, u0]
            + fu * (1 - fv) * image[v0, u1]
            + (1 - fu) * fv * image[v1, u0]
            + fu * fv * image[v1, u1])


def bilinear_sample_batch(image: np.ndarray, uv) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples of a 2D array at (N, 2) pixel locations.

    Returns (values, valid); out-of-bounds samples get value 0 and valid False.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    h, w = image.shape
    valid = ((uv[:, 0] >= 0.0) & (uv[:, 0] <= w - 1)
             & (uv[:, 1] >= 0.0) & (uv[:, 1] <= h - 1))
    u = np.where(valid, uv[:, 0], 0.0)
    v = np.where(valid, uv[:, 1], 0.0)
    vals = _bilinear_values(image, u, v)
    return np.where(valid, vals, 0.0), valid


def bilinear_gradient_batch(image: np.ndarray, uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear values plus image gradients at (N, 2) pixel locations.

    Gradients are central differences of bilinear samples with step 0.5 px,
    clamped at the image border (the divisor shrinks accordingly).
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    h, w = image.shape
    valid = ((uv[:, 0] >= 0.0) & (uv[:, 0] <= w - 1)
             & (uv[:, 1] >= 0.0) & (uv[:, 1] <= h - 1))
    u = np.where(valid, uv[:, 0], 0.0)
    v = np.where(valid, uv[:, 1], 0.0)
    vals = _bilinear_values(image, u, v)

    grads = np.zeros((len(uv), 2))
    u_lo, u_hi = np.maximum(u - 0.5, 0.0), np.minimum(u + 0.5, w - 1.0)
    v_lo, v_hi = np.maximum(v - 0.5, 0.0), np.minimum(v + 0.5, h - 1.0)
    du = u_hi - u_lo
    dv = v_hi - v_lo
    if w > 1:
        grads[:, 0] = (_bilinear_values(image, u_hi, v)
                       - _bilinear_values(image, u_lo, v)) / np.where(du > 0, du, 1.0)
    if h > 1:
        grads[:, 1] = (_bilinear_values(image, u, v_hi)
                       - _bilinear_values(image, u, v_lo)) / np.where(dv > 0, dv, 1.0)
    grads[~valid] = 0.0
    return np.where(valid, vals, 0.0), grads, valid


def bilinear_sample(frame, uv, channel: int | None = None) -> tuple[float, np.ndarray]:
    """Sample one location of a ColorFrame channel (or a bare 2D array).

    Returns (intensity, image gradient (2,)); raises if uv leaves the image so
    callers can record the sample as invisible.
    """
    if isinstance(frame, ColorFrame):
        if channel is None:
            raise ValueError("channel required for ColorFrame sampling")
        image = frame.channels[..., channel]
    else:
        image = np.asarray(frame, dtype=float)
    vals, grads, valid = bilinear_gradient_batch(image, np.asarray(uv, dtype=float).reshape(1, 2))
    if not valid[0]:
        raise ValueError("outside image: uv = %s" % (np.asarray(uv).tolist(),))
    return float(vals[0]), grads[0]
