"""Lattice sampling, marching cubes and OBJ/PLY export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

MAX_RESOLUTION = 256


@dataclass
class ScalarGrid:
    values: np.ndarray  # (nx, ny, nz), values[i, j, k] at lo + (i, j, k) * spacing
    lo: np.ndarray
    hi: np.ndarray

    @property
    def resolution(self):
        return self.values.shape

    @property
    def spacing(self):
        return (self.hi - self.lo) / (np.asarray(self.values.shape) - 1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def face_normals(self):
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def euler_characteristic(self) -> int:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0)) if len(edges) else 0
        return self.n_vertices - n_edges + self.n_triangles


def sample_grid(fn, lo, hi, resolution, chunk=65536) -> ScalarGrid:
    """Evaluate ``fn`` ((P, 3) -> (P,)) on the corner lattice of an axis-aligned box."""
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 2) or np.any(res > MAX_RESOLUTION):
        raise ValueError(f"resolution must lie in [2, {MAX_RESOLUTION}] per axis, got {tuple(res)}")
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,)).copy()
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        values[start : start + chunk] = np.asarray(fn(pts[start : start + chunk]), dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        bad = np.unravel_index(int(np.flatnonzero(~np.isfinite(values))[0]), tuple(res))
        raise FloatingPointError(f"non-finite field value at lattice point {tuple(int(i) for i in bad)}")
    return ScalarGrid(values.reshape(tuple(res)), lo, hi)


def marching_cubes(grid: ScalarGrid, iso=0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set; values below ``iso`` count as inside.

    Triangles wind counter-clockwise seen from outside (normals point toward
    larger values).  Zero-area triangles are dropped.
    """
    verts, faces = kernels.marching_cubes(grid.values, float(iso))
    verts = grid.lo + verts * grid.spacing
    faces = faces[:, [0, 2, 1]]
    if len(faces):
        v = verts[faces]
        area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        faces = faces[area2 > 2e-12]
    return TriangleMesh(verts, faces.astype(np.int64))


def export_obj(mesh: TriangleMesh, path):
    lines = []
    for i, v in enumerate(mesh.vertices):
        rec = f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
        if mesh.colors is not None:
            c = mesh.colors[i]
            rec += f" {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
        lines.append(rec)
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def export_ply(mesh: TriangleMesh, path):
    """Binary little-endian PLY, with 8-bit vertex colours when present."""
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.n_triangles}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        cols = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(np.uint8) if has_color else None
        for i, v in enumerate(mesh.vertices.astype(np.float32)):
            fh.write(struct.pack("<3f", *v))
            if has_color:
                fh.write(struct.pack("<3B", *cols[i]))
        for tri in mesh.triangles:
            fh.write(struct.pack("<B3i", 3, *tri))


def enclosed_volume_voxels(grid: ScalarGrid, iso, inside="above") -> float:
    """Volume estimate by counting lattice points on the inside of ``iso``."""
    mask = grid.values > iso if inside == "above" else grid.values < iso
    return float(mask.sum() * np.prod(grid.spacing))
