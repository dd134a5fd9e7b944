"""Sparse signed distance volume that stores a gradient vector per voxel.

Voxels sit on a regular grid (world position = voxel_size * integer key) and
hold a truncated signed distance, an accumulated fusion weight and an
accumulated, unnormalized gradient. The sign convention is negative in
observed free space and positive inside objects.

The point of the structure is the single-lookup query: distance and gradient
at an arbitrary point come from a first-order expansion around the nearest
voxel (one read), where classic trilinear interpolation needs eight reads for
the distance alone. Both paths are provided, plus a read counter so the
lookup-count claims are checkable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EPS_GRADIENT",
    "GradVoxel",
    "GradientSdfVolume",
    "VolumeQueryError",
    "NoEstimateError",
    "DegenerateGradientError",
    "IncompleteNeighborhoodError",
    "world_to_key",
    "key_to_world",
    "pack_keys",
    "lookup_count_audit",
    "save_volume",
    "load_volume",
]

EPS_GRADIENT = 1e-6

# Packed key layout: three 21-bit biased fields in one int64.
_KEY_BIAS = 1 << 20
_KEY_LIMIT = 1 << 21

_SNAPSHOT_MAGIC = b"GSDF1"
_SNAPSHOT_DTYPE = np.dtype([
    ("key", "<i4", (3,)),
    ("dist", "<f4"),
    ("weight", "<f4"),
    ("grad", "<f4", (3,)),
])


class VolumeQueryError(Exception):
    """Base class for failed voxel queries."""


class NoEstimateError(VolumeQueryError):
    """No estimate available: the nearest voxel is missing or unobserved."""


class DegenerateGradientError(VolumeQueryError):
    """Accumulated gradient too small to normalize."""


class IncompleteNeighborhoodError(VolumeQueryError):
    """A corner of the interpolation cell is missing (sparse-storage gap)."""


@dataclass
class GradVoxel:
    """One voxel record: signed distance, fusion weight, accumulated gradient."""

    dist: float
    weight: float
    grad: np.ndarray


def world_to_key(points, voxel_size: float) -> np.ndarray:
    """Nearest voxel key for world points: round(p / voxel_size), half away from zero."""
    r = np.asarray(points, dtype=float) / voxel_size
    return np.copysign(np.floor(np.abs(r) + 0.5), r).astype(np.int64)


def key_to_world(keys, voxel_size: float) -> np.ndarray:
    """Voxel center world position, exactly voxel_size * key."""
    return np.asarray(keys, dtype=float) * voxel_size


def pack_keys(keys) -> np.ndarray:
    """Pack (..., 3) integer keys into sortable int64 scalars."""
    k = np.asarray(keys, dtype=np.int64)
    b = k + _KEY_BIAS
    if b.min() < 0 or b.max() >= _KEY_LIMIT:
        raise ValueError("voxel key out of packable range (|index| < 2^20)")
    return (b[..., 0] << 42) + (b[..., 1] << 21) + b[..., 2]


def _unpack_keys(packed: np.ndarray) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64)
    k = np.empty(p.shape + (3,), dtype=np.int64)
    k[..., 0] = (p >> 42) - _KEY_BIAS
    k[..., 1] = ((p >> 21) & (_KEY_LIMIT - 1)) - _KEY_BIAS
    k[..., 2] = (p & (_KEY_LIMIT - 1)) - _KEY_BIAS
    return k


_CORNER_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                           dtype=np.int64)


class GradientSdfVolume:
    """Sparse voxel map with per-voxel distance, weight and gradient.

    Only observed voxels (weight > 0) are stored. Arrays are kept sorted by a
    packed integer key so batch lookups are a vectorized binary search;
    `read_count` counts voxel lookups performed by queries.
    """

    def __init__(self, voxel_size: float, truncation: float):
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if truncation < voxel_size:
            raise ValueError("truncation must be at least one voxel")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self._packed = np.empty(0, dtype=np.int64)
        self._keys = np.empty((0, 3), dtype=np.int64)
        self._psi = np.empty(0, dtype=float)
        self._weight = np.empty(0, dtype=float)
        self._grad = np.empty((0, 3), dtype=float)
        self._reads = 0

    # -- storage ---------------------------------------------------------

    @property
    def n_voxels(self) -> int:
        return len(self._packed)

    def __len__(self) -> int:
        return len(self._packed)

    @property
    def keys(self) -> np.ndarray:
        """(N, 3) stored integer keys, sorted by packed value; treat as read-only."""
        return self._keys

    @property
    def psi(self) -> np.ndarray:
        return self._psi

    @property
    def weights(self) -> np.ndarray:
        return self._weight

    @property
    def gradients(self) -> np.ndarray:
        """Accumulated (unnormalized) gradients, (N, 3)."""
        return self._grad

    @property
    def read_count(self) -> int:
        """Total voxel lookups performed by queries so far."""
        return self._reads

    def normalized_gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """(unit gradients (N, 3), valid (N,)); rows with tiny norm are invalid."""
        n = np.linalg.norm(self._grad, axis=1)
        ok = n > EPS_GRADIENT
        ghat = np.zeros_like(self._grad)
        ghat[ok] = self._grad[ok] / n[ok, None]
        return ghat, ok

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned integer bounding box (kmin, kmax) of stored keys."""
        if self.n_voxels == 0:
            raise ValueError("empty volume has no bounding box")
        return self._keys.min(axis=0), self._keys.max(axis=0)

    def _locate(self, packed: np.ndarray) -> np.ndarray:
        """Rows of packed keys, -1 where missing. Does not count as reads."""
        if self.n_voxels == 0:
            return np.full(packed.shape, -1, dtype=np.int64)
        idx = np.searchsorted(self._packed, packed)
        idx_c = np.minimum(idx, self.n_voxels - 1)
        found = self._packed[idx_c] == packed
        return np.where(found, idx_c, -1)

    def find_rows(self, keys) -> np.ndarray:
        """Row indices for (..., 3) keys (-1 where absent); counts one read per key."""
        k = np.asarray(keys, dtype=np.int64)
        packed = pack_keys(k.reshape(-1, 3))
        self._reads += packed.size
        return self._locate(packed).reshape(k.shape[:-1])

    def has_key(self, key) -> bool:
        return int(self.find_rows(np.asarray(key).reshape(1, 3))[0]) >= 0

    def voxel(self, key) -> GradVoxel:
        """Stored record at an integer key; KeyError if the voxel is absent."""
        row = int(self.find_rows(np.asarray(key).reshape(1, 3))[0])
        if row < 0:
            raise KeyError("voxel %s not stored" % (tuple(np.asarray(key).tolist()),))
        return GradVoxel(float(self._psi[row]), float(self._weight[row]),
                         self._grad[row].copy())

    # -- fusion update ---------------------------------------------------

    def update(self, keys, distances, weights, gradient_increments) -> None:
        """Running-average update for a batch of distinct voxels.

        psi <- (W psi + w d) / (W + w), W <- W + w, g <- g + w * n_in.
        Keys must be unique within the batch and weights strictly positive;
        missing voxels are allocated at (psi=0, W=0, g=0) first.
        """
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        d = np.asarray(distances, dtype=float).reshape(-1)
        w = np.asarray(weights, dtype=float).reshape(-1)
        g = np.asarray(gradient_increments, dtype=float).reshape(-1, 3)
        if np.any(w <= 0.0):
            raise ValueError("fusion weights must be positive")
        packed = pack_keys(keys)
        rows = self._locate(packed)
        missing = rows < 0
        if np.any(missing):
            new_packed = packed[missing]
            n_new = len(new_packed)
            self._packed = np.concatenate([self._packed, new_packed])
            self._keys = np.concatenate([self._keys, keys[missing]])
            self._psi = np.concatenate([self._psi, np.zeros(n_new)])
            self._weight = np.concatenate([self._weight, np.zeros(n_new)])
            self._grad = np.concatenate([self._grad, np.zeros((n_new, 3))])
            order = np.argsort(self._packed, kind="stable")
            self._packed = self._packed[order]
            self._keys = self._keys[order]
            self._psi = self._psi[order]
            self._weight = self._weight[order]
            self._grad = self._grad[order]
            rows = self._locate(packed)
        w_old = self._weight[rows]
        self._psi[rows] = (w_old * self._psi[rows] + w * d) / (w_old + w)
        self._weight[rows] = w_old + w
        self._grad[rows] += w[:, None] * g

    def set_distances(self, rows, new_psi) -> None:
        """Overwrite stored distances (photometric refinement); clipped to +-T."""
        self._psi[np.asarray(rows, dtype=np.int64)] = np.clip(
            np.asarray(new_psi, dtype=float), -self.truncation, self.truncation)

    # -- queries ---------------------------------------------------------

    def taylor_query(self, point) -> tuple[float, np.ndarray]:
        """Distance and unit gradient at a point from one voxel lookup.

        d = psi + (p - v)^T ghat of the nearest voxel; the returned gradient is
        exactly that voxel's normalized stored gradient.
        """
        p = np.asarray(point, dtype=float).reshape(3)
        key = world_to_key(p, self.voxel_size)
        row = int(self.find_rows(key.reshape(1, 3))[0])
        if row < 0 or self._weight[row] <= 0.0:
            raise NoEstimateError("no estimate at %s" % (tuple(key.tolist()),))
        g = self._grad[row]
        norm = float(np.linalg.norm(g))
        if norm <= EPS_GRADIENT:
            raise DegenerateGradientError("degenerate gradient at %s" % (tuple(key.tolist()),))
        ghat = g / norm
        d = float(self._psi[row] + (p - key * self.voxel_size) @ ghat)
        return d, ghat

    def taylor_query_batch(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized taylor_query; invalid points are masked, not raised.

        Returns (d (N,), ghat (N, 3), valid (N,)); one read per input point.
        """
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.n_voxels == 0:
            self._reads += len(p)
            return (np.zeros(len(p)), np.zeros((len(p), 3)),
                    np.zeros(len(p), dtype=bool))
        keys = world_to_key(p, self.voxel_size)
        rows = self.find_rows(keys)
        valid = rows >= 0
        r = np.where(valid, rows, 0)
        g = self._grad[r]
        norms = np.linalg.norm(g, axis=1)
        valid &= (self._weight[r] > 0.0) & (norms > EPS_GRADIENT)
        ghat = np.zeros_like(g)
        np.divide(g, norms[:, None], out=ghat, where=norms[:, None] > EPS_GRADIENT)
        d = self._psi[r] + np.einsum("ij,ij->i", p - keys * self.voxel_size, ghat)
        d = np.where(valid, d, 0.0)
        ghat[~valid] = 0.0
        return d, ghat, valid

    def _cell_corners(self, point: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Corner keys (8, 3) and trilinear weights (8,) of the cell holding point."""
        r = point / self.voxel_size
        base = np.floor(r).astype(np.int64)
        f = r - base
        corners = base[None, :] + _CORNER_OFFSETS
        wx = np.where(_CORNER_OFFSETS[:, 0] == 1, f[0], 1.0 - f[0])
        wy = np.where(_CORNER_OFFSETS[:, 1] == 1, f[1], 1.0 - f[1])
        wz = np.where(_CORNER_OFFSETS[:, 2] == 1, f[2], 1.0 - f[2])
        return corners, wx * wy * wz

    def trilinear_distance(self, point) -> float:
        """Baseline distance by trilinear interpolation; reads all 8 cell corners."""
        p = np.asarray(point, dtype=float).reshape(3)
        corners, weights = self._cell_corners(p)
        rows = self.find_rows(corners)
        if np.any(rows < 0) or np.any(self._weight[rows] <= 0.0):
            raise IncompleteNeighborhoodError(
                "incomplete neighborhood around %s" % (p.tolist(),))
        return float(self._psi[rows] @ weights)

    def trilinear_query(self, point) -> tuple[float, np.ndarray]:
        """Baseline distance + gradient: trilinear value, central differences.

        The gradient interpolates at p +- voxel_size along each axis, so up to
        32 distinct voxels are read (deduplicated before lookup).
        """
        p = np.asarray(point, dtype=float).reshape(3)
        samples = [p]
        for axis in range(3):
            for sign in (1.0, -1.0):
                q = p.copy()
                q[axis] += sign * self.voxel_size
                samples.append(q)
        corner_sets = []
        weight_sets = []
        for q in samples:
            corners, weights = self._cell_corners(q)
            corner_sets.append(corners)
            weight_sets.append(weights)
        all_packed = pack_keys(np.concatenate(corner_sets))
        uniq = np.unique(all_packed)
        self._reads += uniq.size
        rows = self._locate(uniq)
        if np.any(rows < 0) or np.any(self._weight[rows] <= 0.0):
            raise IncompleteNeighborhoodError(
                "incomplete neighborhood around %s" % (p.tolist(),))
        psi_of = dict(zip(uniq.tolist(), self._psi[rows].tolist()))
        values = []
        for corners, weights in zip(corner_sets, weight_sets):
            packed = pack_keys(corners)
            values.append(sum(psi_of[int(c)] * w for c, w in zip(packed, weights)))
        grad = np.array([
            (values[1] - values[2]) / (2.0 * self.voxel_size),
            (values[3] - values[4]) / (2.0 * self.voxel_size),
            (values[5] - values[6]) / (2.0 * self.voxel_size),
        ])
        return values[0], grad

    def closest_surface_point(self, key) -> np.ndarray:
        """Surface point encoded by a voxel: p_s = v - psi * ghat."""
        k = np.asarray(key, dtype=np.int64).reshape(3)
        row = int(self.find_rows(k.reshape(1, 3))[0])
        if row < 0 or self._weight[row] <= 0.0:
            raise NoEstimateError("no estimate at %s" % (tuple(k.tolist()),))
        g = self._grad[row]
        norm = float(np.linalg.norm(g))
        if norm <= EPS_GRADIENT:
            raise DegenerateGradientError("degenerate gradient at %s" % (tuple(k.tolist()),))
        return k * self.voxel_size - self._psi[row] * (g / norm)


def lookup_count_audit(vol: GradientSdfVolume, query) -> int:
    """Number of voxel reads performed by `query(vol)` (errors still count)."""
    before = vol.read_count
    try:
        query(vol)
    except VolumeQueryError:
        pass
    return vol.read_count - before


def save_volume(vol: GradientSdfVolume, path) -> None:
    """Write the snapshot format: magic, voxel size, truncation, voxel records.

    Little-endian throughout; per record 3x int32 key, float32 distance,
    float32 weight, 3x float32 gradient. Load/store round-trips bit-exactly.
    """
    records = np.empty(vol.n_voxels, dtype=_SNAPSHOT_DTYPE)
    records["key"] = vol.keys.astype(np.int32)
    records["dist"] = vol.psi.astype(np.float32)
    records["weight"] = vol.weights.astype(np.float32)
    records["grad"] = vol.gradients.astype(np.float32)
    with open(path, "wb") as f:
        f.write(_SNAPSHOT_MAGIC)
        f.write(struct.pack("<dd", vol.voxel_size, vol.truncation))
        f.write(records.tobytes())


def load_volume(path) -> GradientSdfVolume:
    with open(path, "rb") as f:
        magic = f.read(len(_SNAPSHOT_MAGIC))
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError("not a volume snapshot: bad magic %r" % magic)
        voxel_size, truncation = struct.unpack("<dd", f.read(16))
        records = np.frombuffer(f.read(), dtype=_SNAPSHOT_DTYPE)
    vol = GradientSdfVolume(voxel_size, truncation)
    keys = records["key"].astype(np.int64)
    packed = pack_keys(keys)
    order = np.argsort(packed, kind="stable")
    vol._packed = packed[order]
    vol._keys = keys[order]
    vol._psi = records["dist"].astype(float)[order]
    vol._weight = records["weight"].astype(float)[order]
    vol._grad = records["grad"].astype(float)[order]
    return vol
