"""Point clouds, rigid poses, scanblocks and their file formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

DEFAULT_BLOCK_FRAMES = 20


class GeometryError(ValueError):
    """Raised on invalid geometry input (malformed files, bad poses, ...)."""


def _as_points(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) array, got shape {arr.shape}")
    return arr


def normalize_rows(v: np.ndarray) -> np.ndarray:
    """Scale every row of ``v`` to unit length (zero rows are left at zero)."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        R = Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix()
        # orthonormalize away quaternion rounding so the strict check holds
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, translation)

    def quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return _as_points(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    """Points with optional unit normals and the sensor origin they were seen from."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        origin = np.array(self.sensor_origin, dtype=np.float64).reshape(3)
        nrm = None
        if self.normals is not None:
            nrm = _as_points(self.normals).copy()
            if len(nrm) != len(pts):
                raise GeometryError("normals and points differ in length")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise GeometryError("normals must have unit length")
            nrm.flags.writeable = False
        pts.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "sensor_origin", origin)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.sensor_origin)


@dataclass(frozen=True)
class ScanBlock:
    """Consecutive frames fused into the coordinate system of the first frame.

    ``frame_index[i]`` names the contributing frame of point ``i``, so that its
    ray origin is ``sensor_origins[frame_index[i]]`` (block coordinates).
    """

    base_pose: Pose
    cloud: PointCloud
    frame_count: int
    sensor_origins: np.ndarray
    frame_index: np.ndarray

    def __post_init__(self):
        if self.frame_count < 1:
            raise GeometryError("a scanblock needs at least one frame")
        if len(self.cloud) == 0:
            raise GeometryError("a scanblock cloud must not be empty")
        origins = _as_points(self.sensor_origins)
        idx = np.asarray(self.frame_index, dtype=np.int64)
        if len(origins) != self.frame_count or len(idx) != len(self.cloud):
            raise GeometryError("inconsistent scanblock bookkeeping")
        object.__setattr__(self, "sensor_origins", origins)
        object.__setattr__(self, "frame_index", idx)

    @property
    def ray_origins(self) -> np.ndarray:
        """Per-point sensor origin, block coordinates."""
        return self.sensor_origins[self.frame_index]

    def to_world(self) -> "ScanBlock":
        """Same block expressed in world coordinates (base pose becomes identity)."""
        T = self.base_pose
        return ScanBlock(Pose.identity(), transform_cloud(self.cloud, T), self.frame_count,
                         T.apply(self.sensor_origins), self.frame_index)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Map points by ``R p + t``, normals by ``R n`` and move the sensor origin."""
    if cloud.normals is None:
        normals = None
    elif np.array_equal(pose.rotation, np.eye(3)):
        normals = cloud.normals.copy()
    else:
        normals = normalize_rows(cloud.normals @ pose.rotation.T)
    return PointCloud(pose.apply(cloud.points), normals, pose.apply(cloud.sensor_origin[None])[0])


def build_scanblock(frames: Sequence[tuple[Pose, PointCloud]], k: int = DEFAULT_BLOCK_FRAMES) -> ScanBlock:
    """Fuse up to ``k`` frames into the first frame's coordinate system.

    Every frame ``i`` contributes ``T_0^-1 T_i C_i``; frame 0 is copied as is.
    """
    if len(frames) == 0:
        raise GeometryError("cannot build a scanblock from zero frames")
    if len(frames) > k:
        raise GeometryError(f"got {len(frames)} frames for a block of at most {k}")
    T0, C0 = frames[0]
    T0_inv = T0.inverse()
    pts, nrms, origins, index = [C0.points], [C0.normals], [C0.sensor_origin], [np.zeros(len(C0), np.int64)]
    for i, (Ti, Ci) in enumerate(frames[1:], start=1):
        moved = transform_cloud(Ci, T0_inv @ Ti)
        pts.append(moved.points)
        nrms.append(moved.normals)
        origins.append(moved.sensor_origin)
        index.append(np.full(len(Ci), i, np.int64))
    normals = np.concatenate(nrms) if all(n is not None for n in nrms) else None
    cloud = PointCloud(np.concatenate(pts), normals, C0.sensor_origin)
    return ScanBlock(T0, cloud, len(frames), np.array(origins), np.concatenate(index))


def partition_frames(frames: Sequence, k: int = DEFAULT_BLOCK_FRAMES) -> list:
    """Split a frame sequence into blocks of ``k``; a shorter trailing block is kept."""
    return [list(frames[i:i + k]) for i in range(0, len(frames), k)]


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(np.asarray(points) / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output order follows the lexicographic order of the voxel keys.
    """
    if not voxel > 0:
        raise GeometryError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((len(counts), 3))
        np.add.at(nsum, inverse, cloud.normals)
        normals = normalize_rows(nsum)
        # opposing normals can cancel exactly; fall back to the first member
        bad = np.linalg.norm(normals, axis=1) < 0.5
        if np.any(bad):
            first = np.full(len(counts), -1)
            first[inverse[::-1]] = np.arange(len(inverse))[::-1]
            normals[bad] = cloud.normals[first[bad]]
    return PointCloud(centroids, normals, cloud.sensor_origin)


# ---------------------------------------------------------------- file formats

def _parse_float_row(tokens, lineno, path):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise GeometryError(f"{path}:{lineno}: malformed record") from None
    if not all(np.isfinite(vals)):
        raise GeometryError(f"{path}:{lineno}: non-finite coordinate")
    return vals


def _finish_cloud(rows: np.ndarray, has_normals: bool) -> PointCloud:
    if len(rows) == 0:
        return PointCloud(np.zeros((0, 3)))
    normals = None
    if has_normals:
        raw = rows[:, 3:6]
        norm = np.linalg.norm(raw, axis=1)
        if np.any(norm == 0):
            raise GeometryError("zero-length normal in file")
        normals = raw / norm[:, None]
    return PointCloud(rows[:, :3], normals)


def _load_ply(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}:1: missing 'ply' magic")
    n_vertex, props, in_vertex, header_end = 0, [], False, None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise GeometryError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = lineno
            break
    if header_end is None:
        raise GeometryError(f"{path}: missing end_header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise GeometryError(f"{path}: vertex element lacks x/y/z") from None
    has_normals = all(c in props for c in ("nx", "ny", "nz"))
    if has_normals:
        cols += [props.index(c) for c in ("nx", "ny", "nz")]
    rows = []
    for lineno in range(header_end + 1, header_end + 1 + n_vertex):
        if lineno - 1 >= len(lines):
            raise GeometryError(f"{path}:{lineno}: truncated vertex list")
        tok = lines[lineno - 1].split()
        if len(tok) < len(props):
            raise GeometryError(f"{path}:{lineno}: malformed record")
        vals = _parse_float_row([tok[c] for c in cols], lineno, path)
        rows.append(vals)
    return _finish_cloud(np.array(rows, dtype=np.float64).reshape(-1, len(cols)), has_normals)


def _load_xyz(path: Path) -> PointCloud:
    rows, width = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) not in (3, 6) or (width is not None and len(tok) != width):
                raise GeometryError(f"{path}:{lineno}: malformed record")
            width = len(tok)
            rows.append(_parse_float_row(tok, lineno, path))
    width = width or 3
    return _finish_cloud(np.array(rows, dtype=np.float64).reshape(-1, width), width == 6)


def load_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY or whitespace XYZ[+normal] file."""
    path = Path(path)
    try:
        with open(path) as fh:
            head = fh.readline().strip()
    except OSError as exc:
        raise GeometryError(f"{path}: {exc}") from exc
    if head == "ply":
        return _load_ply(path)
    return _load_xyz(path)


def save_point_cloud(cloud: PointCloud, path, fmt: Optional[str] = None) -> None:
    """Write ``cloud`` as ASCII PLY (default for ``.ply``) or XYZ table."""
    path = Path(path)
    fmt = fmt or ("ply" if path.suffix.lower() == ".ply" else "xyz")
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "w") as fh:
        if fmt == "ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(cloud)}\n")
            fh.write("property double x\nproperty double y\nproperty double z\n")
            if cloud.normals is not None:
                fh.write("property double nx\nproperty double ny\nproperty double nz\n")
            fh.write("end_header\n")
        np.savetxt(fh, data, fmt="%.17g")


def load_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines."""
    stamps, poses = [], []
    path = Path(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 8:
                raise GeometryError(f"{path}:{lineno}: malformed record")
            vals = _parse_float_row(tok, lineno, path)
            stamps.append(vals[0])
            poses.append(Pose.from_quaternion(vals[1:4], vals[4:8]))
    return np.array(stamps), poses


def save_trajectory(path, stamps, poses: Sequence[Pose]) -> None:
    with open(path, "w") as fh:
        for t, pose in zip(stamps, poses):
            vals = [t, *pose.translation, *pose.quaternion()]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
