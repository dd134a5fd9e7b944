"""Surface extraction: oriented surfel clouds and layered marching cubes.

Surfels come straight from the voxel records (position v - psi * ghat, normal
-ghat); optional 2x upsampling subdivides each voxel and evaluates the
first-order expansion at the subvoxel centers. Meshing sweeps the volume's
integer bounding box two z-layers at a time so memory stays quadratic in the
footprint rather than cubic in the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .volume import GradientSdfVolume

__all__ = [
    "SurfelCloud",
    "TriangleMesh",
    "extract_surfels",
    "extract_surfels_upsampled",
    "layered_marching_cubes",
]

DEGENERATE_AREA = 1e-12


@dataclass
class SurfelCloud:
    """Oriented points: positions (N, 3), outward unit normals (N, 3), optional colors."""

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class TriangleMesh:
    """Indexed triangle list; vertices (V, 3), triangles (F, 3) int."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_colors: np.ndarray | None = None

    def euler_characteristic(self) -> int:
        """V - E + F with E counted as unique undirected vertex pairs."""
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(tri)

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        tri = self.triangles
        if len(tri) == 0:
            return False
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def _surfel_band_mask(psi: np.ndarray, ghat: np.ndarray, limit: float) -> np.ndarray:
    # component-wise |psi * ghat| <= limit
    return np.all(np.abs(psi[:, None] * ghat) <= limit, axis=1)


def extract_surfels(vol: GradientSdfVolume, colors=None) -> SurfelCloud:
    """One surfel per voxel with |psi * ghat| <= voxel_size / 2 component-wise.

    `colors` may be an (N_voxels, 3) array aligned with the volume's storage
    order (e.g. from the mean reprojected color); rows outside the band are
    dropped along with their voxels.
    """
    ghat, ok = vol.normalized_gradients()
    sel = ok & (vol.weights > 0.0) \
        & _surfel_band_mask(vol.psi, ghat, vol.voxel_size / 2.0)
    centers = vol.keys.astype(float) * vol.voxel_size
    positions = centers[sel] - vol.psi[sel, None] * ghat[sel]
    normals = -ghat[sel]
    out_colors = None
    if colors is not None:
        out_colors = np.asarray(colors, dtype=float)[sel]
    return SurfelCloud(positions, normals, out_colors)


def extract_surfels_upsampled(vol: GradientSdfVolume) -> SurfelCloud:
    """2x-per-axis upsampled cloud via the first-order expansion.

    Each stored voxel is split into 8 subvoxels; the subvoxel distance is
    psi + (offset . ghat) and subvoxels with component-wise
    |d * ghat| <= voxel_size / 4 emit a surfel at subcenter - d * ghat.
    """
    ghat, ok = vol.normalized_gradients()
    if not np.any(ok):
        return SurfelCloud(np.empty((0, 3)), np.empty((0, 3)))
    v_s = vol.voxel_size
    centers = vol.keys[ok].astype(float) * v_s
    psi = vol.psi[ok]
    g = ghat[ok]

    sub = (v_s / 4.0) * np.array([[sx, sy, sz]
                                  for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    subcenters = centers[:, None, :] + sub[None, :, :]          # (N, 8, 3)
    d = psi[:, None] + np.einsum("sk,nk->ns", sub, g)           # (N, 8)
    band = np.all(np.abs(d[..., None] * g[:, None, :]) <= v_s / 4.0, axis=2)

    positions = (subcenters - d[..., None] * g[:, None, :])[band]
    normals = np.broadcast_to(-g[:, None, :], subcenters.shape)[band]
    return SurfelCloud(positions, normals.copy())


def _triangle_areas(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a = vertices[tris[:, 1]] - vertices[tris[:, 0]]
    b = vertices[tris[:, 2]] - vertices[tris[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def layered_marching_cubes(vol: GradientSdfVolume, weight_min: float = 1e-3
                           ) -> TriangleMesh:
    """Standard 256-case marching cubes over sliding pairs of z-layers.

    Cubes participate only when all 8 corner voxels are stored with weight >=
    weight_min; vertices interpolate psi to zero along sign-change edges and
    are deduplicated through a per-layer edge map, so closed surfaces come out
    watertight. Scalar buffers never exceed two layers of the bounding box.
    """
    if vol.n_voxels == 0:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    kmin, kmax = vol.bounding_box()
    nx = int(kmax[0] - kmin[0] + 1)
    ny = int(kmax[1] - kmin[1] + 1)

    keys = vol.keys
    order = np.argsort(keys[:, 2], kind="stable")
    sorted_z = keys[order, 2]
    z_values = np.arange(kmin[2], kmax[2] + 1)
    starts = np.searchsorted(sorted_z, z_values)
    ends = np.searchsorted(sorted_z, z_values, side="right")

    def layer(zi: int) -> tuple[np.ndarray, np.ndarray]:
        psi = np.zeros((nx, ny))
        w = np.zeros((nx, ny))
        rows = order[starts[zi]:ends[zi]]
        ix = (keys[rows, 0] - kmin[0]).astype(int)
        iy = (keys[rows, 1] - kmin[1]).astype(int)
        psi[ix, iy] = vol.psi[rows]
        w[ix, iy] = vol.weights[rows]
        return psi, w

    vertices: list = []
    triangles: list = []
    edge_cache: dict = {}
    v_s = vol.voxel_size

    corner_local = [(int(c[0]), int(c[1]), int(c[2])) for c in CORNER_OFFSETS]
    # canonical global edge id: (lower corner key, axis)
    edge_axis = []
    edge_low = []
    for a, b in EDGE_CORNERS:
        ca, cb = CORNER_OFFSETS[a], CORNER_OFFSETS[b]
        axis = int(np.nonzero(ca != cb)[0][0])
        low = ca if ca[axis] < cb[axis] else cb
        edge_axis.append(axis)
        edge_low.append((int(low[0]), int(low[1]), int(low[2])))

    psi_a, w_a = layer(0)
    for zi in range(len(z_values) - 1):
        psi_b, w_b = layer(zi + 1)
        z0 = int(z_values[zi])

        valid_a = w_a >= weight_min
        valid_b = w_b >= weight_min
        cube_ok = (valid_a[:-1, :-1] & valid_a[1:, :-1] & valid_a[1:, 1:] & valid_a[:-1, 1:]
                   & valid_b[:-1, :-1] & valid_b[1:, :-1] & valid_b[1:, 1:] & valid_b[:-1, 1:])
        below = [None, None]
        below[0] = psi_a < 0.0
        below[1] = psi_b < 0.0
        if np.any(cube_ok):
            index = np.zeros((nx - 1, ny - 1), dtype=np.int32)
            for bit, (dx, dy, dz) in enumerate(corner_local):
                sl = below[dz][dx:nx - 1 + dx, dy:ny - 1 + dy]
                index |= (sl.astype(np.int32) << bit)
            active = np.nonzero(cube_ok & (index != 0) & (index != 255))
            psi_pair = (psi_a, psi_b)
            for cx, cy in zip(*active):
                idx = int(index[cx, cy])
                edge_bits = EDGE_TABLE[idx]
                edge_vertex = {}
                for e in range(12):
                    if not (edge_bits >> e) & 1:
                        continue
                    a, b = EDGE_CORNERS[e]
                    ax, ay, az = corner_local[a]
                    bx, by, bz = corner_local[b]
                    pa = psi_pair[az][cx + ax, cy + ay]
                    pb = psi_pair[bz][cx + bx, cy + by]
                    ga = (int(kmin[0]) + int(cx) + ax, int(kmin[1]) + int(cy) + ay,
                          z0 + az)
                    gb = (int(kmin[0]) + int(cx) + bx, int(kmin[1]) + int(cy) + by,
                          z0 + bz)
                    # a vertex landing exactly on a corner is shared by every
                    # edge through that corner; key it by the corner itself
                    if pa == 0.0:
                        key, pos = ("c",) + ga, np.asarray(ga, dtype=float)
                    elif pb == 0.0:
                        key, pos = ("c",) + gb, np.asarray(gb, dtype=float)
                    else:
                        lx, ly, lz = edge_low[e]
                        key = ("e", int(kmin[0]) + int(cx) + lx,
                               int(kmin[1]) + int(cy) + ly, z0 + lz, edge_axis[e])
                        t = pa / (pa - pb)
                        pos = np.asarray(ga, dtype=float) * (1.0 - t) \
                            + np.asarray(gb, dtype=float) * t
                    cached = edge_cache.get(key)
                    if cached is None:
                        vertices.append(pos * v_s)
                        cached = len(vertices) - 1
                        edge_cache[key] = cached
                    edge_vertex[e] = cached
                tri = TRI_TABLE[idx]
                for k in range(0, len(tri), 3):
                    triangles.append((edge_vertex[tri[k]],
                                      edge_vertex[tri[k + 1]],
                                      edge_vertex[tri[k + 2]]))
        # advance: sliding window, prune cache entries below the new window
        psi_a, w_a = psi_b, w_b
        edge_cache = {k: v for k, v in edge_cache.items() if k[3] >= z0 + 1}

    if not triangles:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    verts = np.asarray(vertices)
    tris = np.asarray(triangles, dtype=np.int64)
    areas = _triangle_areas(verts, tris)
    if np.any(areas <= DEGENERATE_AREA):
        tris = tris[areas > DEGENERATE_AREA]
        used = np.zeros(len(verts), dtype=bool)
        used[tris.reshape(-1)] = True
        remap = np.cumsum(used) - 1
        verts = verts[used]
        tris = remap[tris]
    return TriangleMesh(verts, tris)
