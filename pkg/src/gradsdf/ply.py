"""Binary little-endian PLY output for surfel clouds and triangle meshes.

Surfels are vertex elements with x,y,z,nx,ny,nz (plus uchar red,green,blue
when colors are present); meshes add a face element with uchar-counted int32
vertex index lists. A minimal reader for these layouts backs the round-trip
tests.
"""

from __future__ import annotations

import numpy as np

from .extraction import SurfelCloud, TriangleMesh

__all__ = ["write_surfel_ply", "write_mesh_ply", "read_ply"]


def _vertex_dtype(with_normals: bool, with_colors: bool) -> np.dtype:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if with_normals:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if with_colors:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    return np.dtype(fields)


def _vertex_header(with_normals: bool, with_colors: bool) -> list:
    lines = ["property float x", "property float y", "property float z"]
    if with_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    if with_colors:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    return lines


def _pack_vertices(positions, normals, colors) -> np.ndarray:
    n = len(positions)
    rec = np.empty(n, dtype=_vertex_dtype(normals is not None, colors is not None))
    rec["x"], rec["y"], rec["z"] = positions.T.astype(np.float32)
    if normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = normals.T.astype(np.float32)
    if colors is not None:
        rgb = np.clip(np.asarray(colors, dtype=float) * 255.0, 0.0, 255.0)
        rgb = np.rint(rgb).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    return rec


def write_surfel_ply(path, cloud: SurfelCloud) -> None:
    rec = _pack_vertices(cloud.positions, cloud.normals, cloud.colors)
    header = ["ply", "format binary_little_endian 1.0",
              "element vertex %d" % len(rec)]
    header += _vertex_header(True, cloud.colors is not None)
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def write_mesh_ply(path, mesh: TriangleMesh) -> None:
    rec = _pack_vertices(mesh.vertices, None, mesh.vertex_colors)
    faces = np.empty(len(mesh.triangles),
                     dtype=np.dtype([("count", "u1"), ("idx", "<i4", (3,))]))
    faces["count"] = 3
    faces["idx"] = mesh.triangles.astype(np.int32)
    header = ["ply", "format binary_little_endian 1.0",
              "element vertex %d" % len(rec)]
    header += _vertex_header(False, mesh.vertex_colors is not None)
    header += ["element face %d" % len(faces),
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        f.write(faces.tobytes())


def read_ply(path) -> dict:
    """Parse a PLY file written by this module; returns a dict of arrays.

    Keys: positions, and when present normals, colors (float in [0, 1]),
    triangles.
    """
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    body = data[end:]
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
        raise ValueError("unsupported PLY header")

    counts = {}
    props: dict = {}
    current = None
    for line in header[2:]:
        parts = line.split()
        if parts[0] == "element":
            current = parts[1]
            counts[current] = int(parts[2])
            props[current] = []
        elif parts[0] == "property":
            props[current].append(parts[1:])

    n_vert = counts.get("vertex", 0)
    names = [p[-1] for p in props.get("vertex", [])]
    with_normals = "nx" in names
    with_colors = "red" in names
    vdt = _vertex_dtype(with_normals, with_colors)
    verts = np.frombuffer(body[:n_vert * vdt.itemsize], dtype=vdt)
    out = {"positions": np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(float)}
    if with_normals:
        out["normals"] = np.stack([verts["nx"], verts["ny"], verts["nz"]], axis=1).astype(float)
    if with_colors:
        out["colors"] = np.stack([verts["red"], verts["green"], verts["blue"]],
                                 axis=1).astype(float) / 255.0
    if "face" in counts:
        fdt = np.dtype([("count", "u1"), ("idx", "<i4", (3,))])
        faces = np.frombuffer(body[n_vert * vdt.itemsize:
                                   n_vert * vdt.itemsize + counts["face"] * fdt.itemsize],
                              dtype=fdt)
        if len(faces) and not np.all(faces["count"] == 3):
            raise ValueError("only triangle faces supported")
        out["triangles"] = faces["idx"].astype(np.int64)
    return out
