"""Marching cubes over the neural field, mesh I/O and enclosed volume."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import mc_tables


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def face_normals(self) -> np.ndarray:
        c = self.triangle_corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def areas(self) -> np.ndarray:
        c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


@dataclass(frozen=True)
class MeshingRegion:
    """Axis-aligned box snapped outward to the global ``voxel`` lattice.

    Grid sample ``(i, j, k)`` sits at ``(start + (i, j, k)) * voxel`` so that
    overlapping regions share identical sample coordinates.
    """

    lo: np.ndarray
    hi: np.ndarray
    voxel: float

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not self.voxel > 0 or np.any(hi <= lo):
            raise ValueError("invalid meshing region")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, points: np.ndarray, margin: float, voxel: float) -> "MeshingRegion":
        points = np.asarray(points).reshape(-1, 3)
        return cls(points.min(0) - margin, points.max(0) + margin, voxel)

    @property
    def start(self) -> np.ndarray:
        return np.floor(self.lo / self.voxel + 1e-9).astype(np.int64)

    @property
    def stop(self) -> np.ndarray:
        return np.ceil(self.hi / self.voxel - 1e-9).astype(np.int64)

    @property
    def shape(self) -> tuple:
        return tuple(int(s) for s in (self.stop - self.start + 1))

    def grid_points(self) -> np.ndarray:
        axes = [np.arange(a, b + 1) * self.voxel for a, b in zip(self.start, self.stop)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x).reshape(-1, 3)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)


@dataclass(frozen=True)
class MCResult:
    mesh: TriangleMesh
    triangle_cells: np.ndarray      # global integer cell coordinates per triangle
    active_cells: int


def marching_cubes(values: np.ndarray, origin_index, voxel: float,
                   corner_ok: Optional[np.ndarray] = None, level: float = 0.0) -> MCResult:
    """Classic 256-case marching cubes on a regular grid.

    ``values`` has shape ``(nx, ny, nz)``; grid sample ``(i, j, k)`` lies at
    ``(origin_index + (i, j, k)) * voxel``. A cell is processed only if all of
    its corners pass ``corner_ok``. Triangles face increasing values.
    """
    values = np.asarray(values, dtype=np.float64)
    nx, ny, nz = values.shape
    origin_index = np.asarray(origin_index, dtype=np.int64).reshape(3)
    empty = MCResult(TriangleMesh.empty(), np.zeros((0, 3), np.int64), 0)
    if min(nx, ny, nz) < 2:
        return empty
    ci, cj, ck = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    cells = np.stack([ci.ravel(), cj.ravel(), ck.ravel()], axis=1)      # lexicographic
    corners = cells[:, None, :] + mc_tables.CORNERS[None]               # (C, 8, 3)
    cv = values[corners[..., 0], corners[..., 1], corners[..., 2]]
    case = ((cv < level).astype(np.int64) << np.arange(8)).sum(1)
    active = (case != 0) & (case != 255)
    if corner_ok is not None:
        ok = np.asarray(corner_ok, bool)
        active &= ok[corners[..., 0], corners[..., 1], corners[..., 2]].all(1)
    n_active = int(active.sum())
    if not n_active:
        return empty
    cells, corners, cv, case = cells[active], corners[active], cv[active], case[active]
    rows = mc_tables.TRIANGLES[case, :15].reshape(len(case), 5, 3)
    tri_mask = rows[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(case)), 5)[tri_mask.ravel()]
    tri_edges = rows[tri_mask]                                          # (T, 3) local edge ids
    # global edge id: (lower grid corner linear index) * 3 + axis
    a = corners[cell_of_tri[:, None], mc_tables.EDGES[tri_edges][..., 0]]
    b = corners[cell_of_tri[:, None], mc_tables.EDGES[tri_edges][..., 1]]
    low = np.minimum(a, b)
    axis = np.argmax(np.abs(b - a), axis=-1)
    lin = (low[..., 0] * ny + low[..., 1]) * nz + low[..., 2]
    gid = lin * 3 + axis
    uid, inv = np.unique(gid.ravel(), return_inverse=True)
    inv = inv.reshape(-1, 3)
    lin_u, axis_u = uid // 3, uid % 3
    p0 = np.stack(np.unravel_index(lin_u, (nx, ny, nz)), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[axis_u]
    v0 = values[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = values[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((level - v0) / (v1 - v0), 0.0, 1.0)
    base = (origin_index + p0).astype(np.float64)
    verts = (base + t[:, None] * (p1 - p0)) * voxel
    tris = inv[:, ::-1]                 # table winding faces decreasing values; flip
    c = verts[tris]
    area2 = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    keep = (area2 > 2e-12) & (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris, cell_of_tri = tris[keep], cell_of_tri[keep]
    used, remap = np.unique(tris.ravel(), return_inverse=True)
    mesh = TriangleMesh(verts[used], remap.reshape(-1, 3))
    return MCResult(mesh, origin_index + cells[cell_of_tri], n_active)


def extract_from_function(sdf: Callable[[np.ndarray], np.ndarray], region: MeshingRegion,
                          level: float = 0.0) -> TriangleMesh:
    """Mesh an analytic field (test hook that bypasses the neural map)."""
    values = np.asarray(sdf(region.grid_points())).reshape(region.shape)
    return marching_cubes(values, region.start, region.voxel, level=level).mesh


def extract_mesh_cells(nmap, region: MeshingRegion, n_nn: float, tr: float = 0.3) -> MCResult:
    """Marching cubes over ``nmap`` with neural-point support gating."""
    grid = region.grid_points()
    # support >= n_nn >= 1 implies validity; gated-out corners need no decoding
    ok = nmap.support(grid) >= max(n_nn, 1)
    values = np.full(len(grid), float(tr))
    if ok.any():
        values[ok] = nmap.query(grid[ok], tr, with_support=False)[0]
    return marching_cubes(values.reshape(region.shape), region.start, region.voxel,
                          corner_ok=ok.reshape(region.shape))


def extract_mesh(nmap, region: MeshingRegion, n_nn: float, tr: float = 0.3) -> TriangleMesh:
    return extract_mesh_cells(nmap, region, n_nn, tr).mesh


class IncrementalMesh:
    """Scene mesh assembled from local extractions; newer extractions own their cells."""

    def __init__(self):
        self._tri = np.zeros((0, 3, 3))
        self._cells = np.zeros((0, 3), np.int64)

    def __len__(self):
        return len(self._tri)

    def replace(self, region: MeshingRegion, result: MCResult) -> None:
        lo, hi = region.start, region.stop - 1
        inside = np.all((self._cells >= lo) & (self._cells <= hi), axis=1)
        self._tri = np.concatenate([self._tri[~inside], result.mesh.triangle_corners()])
        self._cells = np.concatenate([self._cells[~inside], result.triangle_cells])

    def mesh(self) -> TriangleMesh:
        if not len(self._tri):
            return TriangleMesh.empty()
        order = np.lexsort(self._cells.T[::-1])
        flat = self._tri[order].reshape(-1, 3)
        verts, inv = np.unique(flat, axis=0, return_inverse=True)
        return TriangleMesh(verts, inv.reshape(-1, 3))


def boundary_edges(mesh: TriangleMesh) -> np.ndarray:
    """Edges used by exactly one triangle, as sorted vertex-index pairs."""
    if not len(mesh):
        return np.zeros((0, 2), np.int64)
    t = mesh.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed enclosed volume via the divergence theorem."""
    if not len(mesh):
        return 0.0
    c = mesh.triangle_corners()
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def sample_mesh_points(mesh: TriangleMesh, spacing: float = 0.05, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples, about one per ``spacing**2`` of surface."""
    if not len(mesh):
        return np.zeros((0, 3))
    areas = mesh.areas()
    total = areas.sum()
    n = max(int(round(total / spacing ** 2)), 1)
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    c = mesh.triangle_corners()[tri]
    return c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])


# ---------------------------------------------------------------- mesh files

def export_mesh(mesh: TriangleMesh, path, fmt: Optional[str] = None) -> None:
    """Write OBJ (``v``/``f`` records) or ASCII PLY; format defaults to the suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    v = mesh.vertices
    t = mesh.triangles
    with open(path, "w") as fh:
        if fmt == "obj":
            if len(v):
                np.savetxt(fh, v, fmt="v %.10g %.10g %.10g")
            if len(t):
                np.savetxt(fh, t + 1, fmt="f %d %d %d")
        elif fmt == "ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(v)}\nproperty double x\nproperty double y\nproperty double z\n")
            fh.write(f"element face {len(t)}\nproperty list uchar int vertex_indices\nend_header\n")
            if len(v):
                np.savetxt(fh, v, fmt="%.10g")
            if len(t):
                np.savetxt(fh, t, fmt="3 %d %d %d")
        else:
            raise ValueError(f"unknown mesh format {fmt!r}")


def load_mesh(path) -> TriangleMesh:
    """Read meshes written by :func:`export_mesh` (OBJ or ASCII PLY)."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].strip() == "ply":
        nv = nf = 0
        end = lines.index("end_header")
        for line in lines[:end]:
            tok = line.split()
            if tok[:2] == ["element", "vertex"]:
                nv = int(tok[2])
            elif tok[:2] == ["element", "face"]:
                nf = int(tok[2])
        body = lines[end + 1:]
        v = np.array([[float(x) for x in l.split()[:3]] for l in body[:nv]]).reshape(-1, 3)
        f = np.array([[int(x) for x in l.split()[1:4]] for l in body[nv:nv + nf]]).reshape(-1, 3)
        return TriangleMesh(v, f)
    verts, faces = [], []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in tok[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
