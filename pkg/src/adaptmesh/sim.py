"""Synthetic tunnel/cave scenes, a virtual LiDAR and scripted trajectories.

A scene is a tube whose centreline is a cubic spline graph over ``x``; its
cross-section in the plane ``x = const`` has radius ``R(x, theta)`` built from
a base radius, a slow per-station profile and a sum of smooth periodic modes.
Caves add large low-frequency displacement and spherical chambers (union).
``inside(p) > 0`` marks free space. The scene is open at ``x = 0`` and
``x = length``: rays leaving that slab return nothing.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import Pose, PointCloud

GT_RESOLUTION = 0.1


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "tube"
    length: float = 20.0
    control_points: tuple = ((0.0, 0.0, 0.0), (20.0, 0.0, 0.0))
    base_radius: float = 3.0
    radius_amplitude: float = 0.0
    noise_amplitude: float = 0.0
    noise_frequency: float = 0.5
    chambers: int = 0
    chamber_radius: tuple = (2.5, 3.5)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("tube", "cave"):
            raise SceneError(f"unknown scene kind {self.kind!r}")
        if not (self.length > 0 and self.base_radius > 0):
            raise SceneError("length and base radius must be positive")
        if self.base_radius <= 2.0 * (self.noise_amplitude + self.radius_amplitude + self.cave_amplitude):
            raise SceneError("base radius must exceed twice the total displacement amplitude")
        cp = np.asarray(self.control_points, dtype=np.float64)
        if cp.ndim != 2 or cp.shape[1] != 3 or len(cp) < 2:
            raise SceneError("need at least two (x, y, z) control points")
        if np.any(np.diff(cp[:, 0]) <= 0):
            raise SceneError("centreline self-intersects: control x must increase strictly")
        object.__setattr__(self, "control_points", tuple(map(tuple, cp.tolist())))
        object.__setattr__(self, "chamber_radius", tuple(self.chamber_radius))

    @property
    def cave_amplitude(self) -> float:
        return 0.2 * self.base_radius if self.kind == "cave" else 0.0


@dataclass(frozen=True)
class ScannerSpec:
    rays_per_frame: int = 1000
    elevation_deg: tuple = (-90.0, 90.0)
    max_range: float = 10.0
    range_noise: float = 0.01
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.rays_per_frame <= 0 or not self.max_range > 0 or not self.frame_rate > 0:
            raise SceneError("scanner counts and ranges must be positive")
        if self.range_noise < 0:
            raise SceneError("range noise must be non-negative")
        object.__setattr__(self, "elevation_deg", tuple(self.elevation_deg))


@dataclass(frozen=True)
class TrajectorySpec:
    start: float = 1.0
    stop: Optional[float] = None
    speed: float = 1.0
    height: float = 1.5


@dataclass(frozen=True)
class GroundTruth:
    points: np.ndarray
    resolution: float = GT_RESOLUTION


class Scene:
    """Analytic cavity generated deterministically from a :class:`SceneSpec`."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        cp = np.asarray(spec.control_points)
        self._cy = CubicSpline(cp[:, 0], cp[:, 1], bc_type="natural", extrapolate=True)
        self._cz = CubicSpline(cp[:, 0], cp[:, 2], bc_type="natural", extrapolate=True)
        xs = np.linspace(0.0, spec.length, 400)
        slope = np.hypot(self._cy(xs, 1), self._cz(xs, 1))
        if slope.max() > 1.0:
            raise SceneError("centreline too steep: cross-sections would overlap")
        # slow station profile
        self._station = self._modes(rng, 3, (0.05, 0.3), (0, 0), spec.radius_amplitude)
        # surface roughness
        f = spec.noise_frequency
        self._rough = self._modes(rng, 12, (0.5 * f, 2.0 * f), (1, 8), spec.noise_amplitude)
        self._cave = self._modes(rng, 6, (0.1, 0.4), (1, 3), spec.cave_amplitude)
        self.chambers = np.zeros((0, 4))
        if spec.kind == "cave" and spec.chambers:
            lo, hi = spec.chamber_radius
            cx = rng.uniform(0.15 * spec.length, 0.85 * spec.length, spec.chambers)
            radii = rng.uniform(lo, hi, spec.chambers)
            ang = rng.uniform(0, 2 * np.pi, spec.chambers)
            off = spec.base_radius * 0.8
            centres = np.stack([cx, self._cy(cx) + off * np.cos(ang), self._cz(cx) + off * np.sin(ang)], 1)
            self.chambers = np.hstack([centres, radii[:, None]])

    @staticmethod
    def _modes(rng, n, freq_range, m_range, amplitude):
        omega = rng.uniform(*freq_range, n) * 2 * np.pi
        m = rng.integers(m_range[0], m_range[1] + 1, n)
        phase = rng.uniform(0, 2 * np.pi, n)
        weight = rng.uniform(0.5, 1.0, n)
        weight = weight / weight.sum() * amplitude        # |sum| <= amplitude
        return omega, m, phase, weight

    @staticmethod
    def _eval_modes(modes, x, theta):
        omega, m, phase, weight = modes
        if not len(omega) or not np.any(weight):
            return np.zeros(np.broadcast(x, theta).shape)
        arg = np.multiply.outer(x, omega) + np.multiply.outer(theta, m) + phase
        return np.cos(arg) @ weight

    def centre(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x, self._cy(x), self._cz(x)], axis=-1)

    def tangent(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.stack([np.ones_like(x), self._cy(x, 1), self._cz(x, 1)], axis=-1)
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    def radius(self, x, theta) -> np.ndarray:
        x, theta = np.broadcast_arrays(np.asarray(x, float), np.asarray(theta, float))
        return (self.spec.base_radius + self._eval_modes(self._station, x, theta)
                + self._eval_modes(self._rough, x, theta) + self._eval_modes(self._cave, x, theta))

    def _tube_inside(self, p):
        x = p[..., 0]
        dy = p[..., 1] - self._cy(x)
        dz = p[..., 2] - self._cz(x)
        return self.radius(x, np.arctan2(dz, dy)) - np.hypot(dy, dz)

    def _chamber_inside(self, p):
        if not len(self.chambers):
            return np.full(p.shape[:-1], -np.inf)
        d = np.linalg.norm(p[..., None, :] - self.chambers[:, :3], axis=-1)
        return (self.chambers[:, 3] - d).max(-1)

    def inside(self, p) -> np.ndarray:
        """Positive in free space, negative in rock, zero on the surface."""
        p = np.asarray(p, dtype=np.float64)
        return np.maximum(self._tube_inside(p), self._chamber_inside(p))

    def ground_truth(self, resolution: float = GT_RESOLUTION) -> GroundTruth:
        """Surface samples at roughly ``resolution`` spacing, exactly on the zero set."""
        spec = self.spec
        xs = np.arange(0.0, spec.length + 1e-9, resolution)
        n_theta = int(np.ceil(2 * np.pi * spec.base_radius / resolution))
        theta = np.arange(n_theta) * (2 * np.pi / n_theta)
        X, TH = np.meshgrid(xs, theta, indexing="ij")
        R = self.radius(X, TH)
        pts = np.stack([X, self._cy(X) + R * np.cos(TH), self._cz(X) + R * np.sin(TH)], -1).reshape(-1, 3)
        pts = pts[self._chamber_inside(pts) < 0]
        parts = [pts]
        for c in self.chambers:
            n = int(np.ceil(4 * np.pi * c[3] ** 2 / resolution ** 2))
            s = c[:3] + c[3] * fibonacci_sphere(n)
            keep = (self._tube_inside(s) < 0) & (s[:, 0] >= 0) & (s[:, 0] <= spec.length)
            others = np.delete(self.chambers, np.where((self.chambers == c).all(1))[0][0], axis=0)
            if len(others):
                d = np.linalg.norm(s[:, None, :] - others[:, :3], axis=-1)
                keep &= (others[:, 3] - d).max(-1) < 0
            parts.append(s[keep])
        return GroundTruth(np.concatenate(parts), resolution)

    def raycast(self, origins, dirs, max_range: float, step: float = 0.05, iters: int = 30):
        """First inside-to-outside crossing along each ray; ``nan`` where none."""
        dirs = np.asarray(dirs, float).reshape(-1, 3)
        origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
        n = len(dirs)
        ts = np.arange(1, int(np.ceil(max_range / step)) + 1) * step
        ts[-1] = min(ts[-1], max_range)
        p = origins[:, None, :] + ts[None, :, None] * dirs[:, None, :]
        f = self.inside(p)
        out_slab = (p[..., 0] < 0) | (p[..., 0] > self.spec.length)
        crossed = (f <= 0) & ~out_slab
        first_cross = np.where(crossed.any(1), crossed.argmax(1), len(ts))
        first_out = np.where(out_slab.any(1), out_slab.argmax(1), len(ts))
        ok = first_cross < np.minimum(first_out, len(ts))
        hit = np.full(n, np.nan)
        cr = np.nonzero(ok)[0]
        if len(cr):
            k = first_cross[cr]
            hi = ts[k]
            lo = np.where(k > 0, ts[np.maximum(k - 1, 0)], 0.0)
            o, d = origins[cr], dirs[cr]
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                inside = self.inside(o + mid[:, None] * d) > 0
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
            hit[cr] = 0.5 * (lo + hi)
        return hit


def generate_scene(spec: SceneSpec):
    """Return ``(scene, ground_truth)``; ``scene.inside`` is the signed inside test."""
    scene = Scene(spec)
    return scene, scene.ground_truth()


def fibonacci_sphere(n: int, offset: float = 0.0) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0)) + offset
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def scan_pattern(spec: ScannerSpec, frame: int) -> np.ndarray:
    """Sensor-frame unit directions for ``frame``: a spherical spiral restricted to the
    elevation band and rotated by a per-frame golden-angle offset.
    """
    lo, hi = np.sin(np.radians(spec.elevation_deg))
    n = spec.rays_per_frame
    i = np.arange(n) + (frame * 0.6180339887) % 1.0
    z = lo + (hi - lo) * (i / n)
    phi = i * np.pi * (3.0 - np.sqrt(5.0)) + frame * 2.399963229728653
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def scan_frame(scene: Scene, scanner: ScannerSpec, pose: Pose, frame: int = 0,
               rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Ray-cast one frame; hits are returned in world coordinates."""
    origin = pose.translation
    if not scene.inside(origin[None])[0] > 0:
        raise SceneError("sensor pose lies outside the cavity")
    dirs = scan_pattern(scanner, frame) @ pose.rotation.T
    t = scene.raycast(origin, dirs, scanner.max_range)
    ok = np.isfinite(t)
    t, dirs = t[ok], dirs[ok]
    if scanner.range_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(frame)
        t = t + rng.normal(0.0, scanner.range_noise, len(t))
    keep = t > 0
    return PointCloud(origin + t[keep, None] * dirs[keep], sensor_origin=origin)


def make_trajectory(scene: Scene, scanner: ScannerSpec, traj: TrajectorySpec = TrajectorySpec()):
    """Constant-speed poses along the centreline, lifted to ``height`` above the nominal floor."""
    stop = traj.stop if traj.stop is not None else scene.spec.length - traj.start
    dx = traj.speed / scanner.frame_rate
    xs = np.arange(traj.start, stop + 1e-9, dx)
    offset = np.array([0.0, 0.0, traj.height - scene.spec.base_radius])
    poses = []
    for x in xs:
        tx = scene.tangent(x)
        up = np.array([0.0, 0.0, 1.0])
        ey = np.cross(up, tx)
        ey /= np.linalg.norm(ey)
        ez = np.cross(tx, ey)
        p = scene.centre(x) + offset
        if not scene.inside(p[None])[0] > 0:
            raise SceneError(f"trajectory leaves the cavity at x={x:.2f}")
        poses.append(Pose(np.stack([tx, ey, ez], 1), p))
    stamps = np.arange(len(poses)) / scanner.frame_rate
    return stamps, poses


def simulate_sequence(scene: Scene, scanner: ScannerSpec, poses: Sequence[Pose], seed: int = 0):
    """``[(pose, sensor-frame cloud)]`` for a trajectory."""
    rng = np.random.default_rng(seed)
    frames = []
    for i, pose in enumerate(poses):
        world = scan_frame(scene, scanner, pose, i, rng)
        inv = pose.inverse()
        frames.append((pose, PointCloud(inv.apply(world.points))))
    return frames


# ---------------------------------------------------------- scene spec files

def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if ";" in raw:
            return tuple(tuple(float(v) for v in item.split(",")) for item in raw.split(";") if item.strip())
        return tuple(float(v) for v in raw.split(","))
    return raw


def _format_value(v):
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(repr(float(c)) for c in item) for item in v)
        return ",".join(repr(float(c)) for c in v)
    return str(v)


_SECTIONS = {"scene": SceneSpec, "scanner": ScannerSpec, "trajectory": TrajectorySpec}


def load_scene_file(path):
    """Parse a key-value scene file into ``(SceneSpec, ScannerSpec, TrajectorySpec)``."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise SceneError(f"cannot read scene file {path}")
    out = []
    for name, cls in _SECTIONS.items():
        defaults = cls()
        kwargs = {}
        if cp.has_section(name):
            known = {f.name for f in fields(cls)}
            for key, raw in cp.items(name):
                if key not in known:
                    raise SceneError(f"{path}: unknown key {name}.{key}")
                d = getattr(defaults, key)
                kwargs[key] = None if raw.strip().lower() == "none" else _parse_value(raw, d if d is not None else 0.0)
        out.append(cls(**kwargs))
    return tuple(out)


def save_scene_file(path, scene: SceneSpec, scanner: ScannerSpec = ScannerSpec(),
                    traj: TrajectorySpec = TrajectorySpec()) -> None:
    cp = configparser.ConfigParser()
    for name, obj in zip(_SECTIONS, (scene, scanner, traj)):
        cp[name] = {k: _format_value(v) for k, v in asdict(obj).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def straight_tube(length: float = 20.0, radius: float = 3.0, seed: int = 0, **kw) -> SceneSpec:
    return SceneSpec(kind="tube", length=length, control_points=((0.0, 0.0, 0.0), (length, 0.0, 0.0)),
                     base_radius=radius, seed=seed, **kw)


def cave(length: float = 20.0, radius: float = 3.0, seed: int = 0, chambers: int = 2, **kw) -> SceneSpec:
    rng = np.random.default_rng(seed + 7919)
    cx = np.linspace(0.0, length, 5)
    cy = rng.uniform(-1.0, 1.0, 5)
    cz = rng.uniform(-0.4, 0.4, 5)
    kw.setdefault("noise_amplitude", 0.15)
    kw.setdefault("radius_amplitude", 0.2)
    kw.setdefault("chamber_radius", (0.45 * radius, 0.6 * radius))
    return SceneSpec(kind="cave", length=length, control_points=tuple(zip(cx, cy, cz)),
                     base_radius=radius, chambers=chambers, seed=seed, **kw)
