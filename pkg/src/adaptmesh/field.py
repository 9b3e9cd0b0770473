"""Point-based neural SDF: neural point map, sampling and field training.

The field value at ``x`` is an inverse-squared-distance blend of a shared MLP
decoder applied to each of the ``K`` nearest neural points, fed with the
point's latent feature and the offset ``(x - position) / pitch``.
Positive values lie on the sensor side of a surface.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import ScanBlock, voxel_keys

MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ActionParams:
    """The six reconstruction parameters chosen per scanblock."""

    sigma_s: float = 0.10
    n_surface: int = 4
    n_free: int = 2
    eta_min: float = 0.3
    eta_max: float = 0.8
    n_nn: int = 6

    def __post_init__(self):
        if not self.sigma_s > 0:
            raise ValueError("sigma_s must be positive")
        if self.n_surface < 0 or self.n_free < 0:
            raise ValueError("sample counts must be non-negative")
        if not 0 < self.eta_min < self.eta_max < 1:
            raise ValueError("need 0 < eta_min < eta_max < 1")
        if self.n_nn < 1:
            raise ValueError("n_nn must be at least 1")

    @property
    def truncation(self) -> float:
        return truncation_for(self.sigma_s)

    def as_tuple(self):
        return (self.sigma_s, self.n_surface, self.n_free, self.eta_min, self.eta_max, self.n_nn)


def truncation_for(sigma_s: float) -> float:
    return max(3.0 * sigma_s, 0.15)


@dataclass(frozen=True)
class FieldConfig:
    pitch: float = 0.3
    k_neighbors: int = 6
    feature_dim: int = 16
    hidden: int = 64
    feature_std: float = 0.01


@dataclass(frozen=True)
class FieldTrainConfig:
    tr: float = 0.3
    lr: float = 2e-3
    iters: int = 30
    bce_scale: Optional[float] = None
    eikonal_weight: float = 0.1
    batch_size: int = 2048

    def __post_init__(self):
        if not (self.tr > 0 and self.lr > 0 and self.iters >= 0 and self.eikonal_weight >= 0):
            raise ValueError("invalid field training configuration")
        if self.bce_scale is not None and not self.bce_scale > 0:
            raise ValueError("bce_scale must be positive")

    @property
    def scale(self) -> float:
        return self.bce_scale if self.bce_scale is not None else self.tr / 4.0


@dataclass
class SdfSamples:
    """A batch of training samples; ``surface`` marks normal-guided ones."""

    positions: np.ndarray
    labels: np.ndarray
    surface: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.surface = np.asarray(self.surface, dtype=bool).reshape(-1)
        if self.weights is None:
            self.weights = np.ones(len(self.labels))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.positions for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.surface for p in parts]),
                   np.concatenate([p.weights for p in parts]))

    def subset(self, idx):
        return SdfSamples(self.positions[idx], self.labels[idx], self.surface[idx], self.weights[idx])


class Decoder(torch.nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Linear(in_dim, hidden), torch.nn.Softplus(beta=10.0),
            torch.nn.Linear(hidden, hidden), torch.nn.Softplus(beta=10.0),
            torch.nn.Linear(hidden, 1),
        )

    def forward(self, z):
        return self.net(z).squeeze(-1)


class NeuralPointMap:
    """Neural points on a spatial hash (one per ``pitch`` cell) plus a shared decoder.

    Single writer: ``update`` and training mutate the map; queries are read-only.
    """

    def __init__(self, cfg: FieldConfig = FieldConfig(), seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        gen = torch.Generator().manual_seed(int(seed))
        self.decoder = Decoder(cfg.feature_dim + 3, cfg.hidden).to(dtype)
        with torch.no_grad():
            for p in self.decoder.parameters():
                bound = 1.0 / np.sqrt(p.shape[-1]) if p.ndim > 1 else 0.1
                p.copy_(torch.empty(p.shape, dtype=dtype).uniform_(-bound, bound, generator=gen))
        self.positions = np.zeros((0, 3))
        self.features = torch.zeros((0, cfg.feature_dim), dtype=dtype)
        self.update_count = np.zeros(0, np.int64)
        self._cells: dict = {}
        self._tree: Optional[cKDTree] = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def search_radius(self) -> float:
        return 2.0 * self.cfg.pitch

    @property
    def tree(self) -> Optional[cKDTree]:
        if self._tree is None and len(self):
            self._tree = cKDTree(self.positions)
        return self._tree

    def insert(self, points: np.ndarray) -> np.ndarray:
        """Create neural points in untouched cells; returns indices of all touched points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return np.zeros(0, np.int64)
        keys = voxel_keys(points, self.cfg.pitch)
        ukeys, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.zeros((len(ukeys), 3))
        np.add.at(sums, inverse, points)
        centroids = sums / np.bincount(inverse)[:, None]
        touched = np.empty(len(ukeys), np.int64)
        new_pos = []
        for u, key in enumerate(map(tuple, ukeys)):
            idx = self._cells.get(key)
            if idx is None:
                idx = len(self.positions) + len(new_pos)
                self._cells[key] = idx
                new_pos.append(centroids[u])
            touched[u] = idx
        if new_pos:
            init = self.rng.normal(0.0, self.cfg.feature_std, (len(new_pos), self.cfg.feature_dim))
            self.positions = np.vstack([self.positions, np.array(new_pos)])
            self.features = torch.cat([self.features.detach(), torch.as_tensor(init, dtype=self.dtype)])
            self.update_count = np.concatenate([self.update_count, np.zeros(len(new_pos), np.int64)])
            self._tree = None
        self.update_count[touched] += 1
        return touched

    # ------------------------------------------------------------------ queries

    def neighbors(self, x: np.ndarray):
        """``(idx, mask)`` of the K nearest neural points within the search radius."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        K = self.cfg.k_neighbors
        if not len(self):
            return np.zeros((len(x), K), np.int64), np.zeros((len(x), K), bool)
        k = min(K, len(self))
        _, idx = self.tree.query(x, k=k, distance_upper_bound=self.search_radius)
        idx = np.asarray(idx).reshape(len(x), k)
        mask = idx < len(self)
        idx = np.where(mask, idx, 0)
        if k < K:
            idx = np.hstack([idx, np.zeros((len(x), K - k), np.int64)])
            mask = np.hstack([mask, np.zeros((len(x), K - k), bool)])
        return idx, mask

    def support(self, x: np.ndarray) -> np.ndarray:
        """Number of neural points within the search radius (not capped at K)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if not len(self):
            return np.zeros(len(x), np.int64)
        return np.asarray(self.tree.query_ball_point(x, r=self.search_radius, return_length=True),
                          dtype=np.int64)

    def forward(self, x, idx, mask, features=None):
        """Differentiable field value at ``x`` (torch tensor) for given neighbour sets."""
        features = self.features if features is None else features
        pos = torch.as_tensor(self.positions, dtype=self.dtype)[torch.as_tensor(idx)]
        offset = (x[:, None, :] - pos) / self.cfg.pitch
        z = torch.cat([features[torch.as_tensor(idx)], offset], dim=-1)
        out = self.decoder(z)
        m = torch.as_tensor(mask, dtype=self.dtype)
        w = m / ((offset * self.cfg.pitch).pow(2).sum(-1) + 1e-6)
        wsum = w.sum(-1)
        return (w * out).sum(-1) / torch.where(wsum > 0, wsum, torch.ones_like(wsum))

    def query(self, x: np.ndarray, tr: float = 0.3, chunk: int = 65536, with_support: bool = True):
        """Field values at ``x``: ``(value, valid, support)``; invalid points read ``+tr``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        values = np.full(len(x), float(tr))
        valid = np.zeros(len(x), bool)
        for s in range(0, len(x), chunk):
            xs = x[s:s + chunk]
            idx, mask = self.neighbors(xs)
            ok = mask.any(1)
            valid[s:s + chunk] = ok
            if ok.any():
                with torch.no_grad():
                    v = self.forward(torch.as_tensor(xs[ok], dtype=self.dtype), idx[ok], mask[ok])
                values[s:s + chunk][ok] = v.double().numpy()
        support = self.support(x) if with_support else None
        return values, valid, support

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Analytic spatial gradient of the field (zero where unsupported)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        idx, mask = self.neighbors(x)
        xt = torch.as_tensor(x, dtype=self.dtype).requires_grad_(True)
        v = self.forward(xt, idx, mask)
        (g,) = torch.autograd.grad(v.sum(), xt)
        g = g.double().numpy()
        g[~mask.any(1)] = 0.0
        return g

    # -------------------------------------------------------------- checkpoint

    def save(self, path) -> None:
        arrays = {f"decoder.{k}": v.detach().double().numpy() for k, v in self.decoder.state_dict().items()}
        np.savez(path, format_version=MAP_FORMAT_VERSION, config=json.dumps(asdict(self.cfg)),
                 positions=self.positions, features=self.features.detach().double().numpy(),
                 update_count=self.update_count, **arrays)

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "NeuralPointMap":
        with np.load(path) as data:
            if int(data["format_version"]) != MAP_FORMAT_VERSION:
                raise ValueError(f"unsupported map checkpoint version {int(data['format_version'])}")
            m = cls(FieldConfig(**json.loads(str(data["config"]))), dtype=dtype)
            m.positions = data["positions"].copy()
            m.features = torch.as_tensor(data["features"], dtype=dtype)
            m.update_count = data["update_count"].copy()
            state = {k[len("decoder."):]: torch.as_tensor(data[k], dtype=dtype)
                     for k in data.files if k.startswith("decoder.")}
        m.decoder.load_state_dict(state)
        keys = voxel_keys(m.positions, m.cfg.pitch)
        m._cells = {tuple(k): i for i, k in enumerate(keys)}
        return m


def update_map(nmap: NeuralPointMap, block: ScanBlock) -> NeuralPointMap:
    """Insert a (world-frame) block into the map in place and return the map."""
    nmap.insert(block.cloud.points)
    return nmap


def query_sdf(nmap: NeuralPointMap, x, tr: float = 0.3):
    """Scalar convenience wrapper: ``(value, valid, support)`` at one point."""
    v, ok, sup = nmap.query(np.asarray(x, dtype=np.float64).reshape(1, 3), tr)
    return float(v[0]), bool(ok[0]), int(sup[0])


# ------------------------------------------------------------------ sampling

def _truncated_normal(rng, sigma, tr, n):
    out = rng.normal(0.0, sigma, n)
    bad = np.abs(out) > tr
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > tr
    return out


def sample_surface(points, normals, params: ActionParams, tr: float,
                   rng: np.random.Generator) -> SdfSamples:
    """``n_surface`` samples per point along its normal; the label is the signed offset.

    Rows with a non-unit normal produce no samples.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    ok = np.abs(np.linalg.norm(normals, axis=1) - 1.0) < 1e-6
    points, normals = points[ok], normals[ok]
    ns = params.n_surface
    if ns == 0 or len(points) == 0:
        return SdfSamples.empty()
    d = _truncated_normal(rng, params.sigma_s, tr, len(points) * ns).reshape(-1, ns)
    pos = points[:, None, :] + d[..., None] * normals[:, None, :]
    return SdfSamples(pos.reshape(-1, 3), d.reshape(-1), np.ones(d.size, bool))


def free_space_interval(ray_length, params: ActionParams, tr: float):
    """Sampling interval along the ray, upper end capped at ``length - tr``."""
    L = np.asarray(ray_length, dtype=np.float64)
    hi = np.minimum(params.eta_max * L, L - tr)
    lo = np.minimum(params.eta_min * L, hi)
    return lo, hi


def sample_free_space(points, origins, params: ActionParams, tr: float,
                      rng: np.random.Generator) -> SdfSamples:
    """``n_free`` uniform samples per ray between the sensor and the truncation band.

    Label is the remaining distance to the measured endpoint (always >= tr).
    Rays shorter than ``tr`` yield nothing.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), points.shape)
    ray = points - origins
    L = np.linalg.norm(ray, axis=1)
    if np.any(L <= 0):
        raise ValueError("zero-length ray")
    nf = params.n_free
    lo, hi = free_space_interval(L, params, tr)
    ok = hi > 0
    if nf == 0 or not np.any(ok):
        return SdfSamples.empty()
    L, lo, hi = L[ok], lo[ok], hi[ok]
    d = ray[ok] / L[:, None]
    s = lo[:, None] + rng.random((len(L), nf)) * (hi - lo)[:, None]
    pos = origins[ok][:, None, :] + s[..., None] * d[:, None, :]
    labels = L[:, None] - s
    return SdfSamples(pos.reshape(-1, 3), labels.reshape(-1), np.zeros(labels.size, bool))


def projective_labels(samples: np.ndarray, endpoints: np.ndarray, origins: np.ndarray) -> np.ndarray:
    """Along-ray signed distance to the endpoint (the biased labelling of ray-based mappers)."""
    ray = endpoints - origins
    dirs = ray / np.linalg.norm(ray, axis=1, keepdims=True)
    return np.einsum("ij,ij->i", endpoints - samples, dirs)


# ------------------------------------------------------------------ training

@dataclass
class LossReport:
    initial: float
    final: float
    steps: int
    aborted: bool = False
    history: list = field(default_factory=list)


def train_field(nmap: NeuralPointMap, samples: SdfSamples, cfg: FieldTrainConfig,
                rng: Optional[np.random.Generator] = None) -> LossReport:
    """Adam steps on decoder weights and the features of the supporting neural points."""
    if len(samples) == 0:
        raise ValueError("no training samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx_all, mask_all = nmap.neighbors(samples.positions)
    keep = mask_all.any(1)
    samples = samples.subset(keep)
    idx_all, mask_all = idx_all[keep], mask_all[keep]
    if len(samples) == 0:
        return LossReport(float("nan"), float("nan"), 0, aborted=True)
    features = nmap.features.detach().clone().requires_grad_(True)
    params = list(nmap.decoder.parameters())
    opt = torch.optim.Adam([features] + params, lr=cfg.lr)
    dt = nmap.dtype
    X = torch.as_tensor(samples.positions, dtype=dt)
    Y = torch.as_tensor(samples.labels, dtype=dt)
    W = torch.as_tensor(samples.weights, dtype=dt)
    history = []
    aborted = False
    steps = 0
    first = None
    for _ in range(cfg.iters):
        if len(samples) > cfg.batch_size:
            b = np.sort(rng.choice(len(samples), cfg.batch_size, replace=False))
        else:
            b = np.arange(len(samples))
        first = b if first is None else first
        backup_f = features.detach().clone()
        backup_p = [p.detach().clone() for p in params]
        opt.zero_grad()
        loss = field_loss(nmap, features, X[b], idx_all[b], mask_all[b], Y[b], samples.surface[b], W[b], cfg)
        if not torch.isfinite(loss):
            aborted = True
            break
        loss.backward()
        opt.step()
        if not (torch.isfinite(features).all() and all(torch.isfinite(p).all() for p in params)):
            with torch.no_grad():
                features.copy_(backup_f)
                for p, bk in zip(params, backup_p):
                    p.copy_(bk)
            aborted = True
            break
        history.append(float(loss.detach()))
        steps += 1
    nmap.features = features.detach()
    initial = history[0] if history else float("nan")
    # final loss on the same batch the initial loss was measured on
    final = evaluate_field_loss(nmap, samples.subset(first), cfg) if steps else initial
    return LossReport(initial, final, steps, aborted, history)


def field_loss(nmap, features, x, idx, mask, labels, surface, weights, cfg: FieldTrainConfig):
    """Weighted BCE on squashed values plus the Eikonal penalty on surface samples."""
    surf = torch.as_tensor(surface)
    use_eik = cfg.eikonal_weight > 0 and bool(surf.any())
    xs = x.clone().requires_grad_(use_eik)
    pred = nmap.forward(xs, idx, mask, features=features)
    target = torch.sigmoid(labels / cfg.scale)
    loss = torch.nn.functional.binary_cross_entropy_with_logits(pred / cfg.scale, target, weight=weights)
    if use_eik:
        (g,) = torch.autograd.grad(pred[surf].sum(), xs, create_graph=True)
        loss = loss + cfg.eikonal_weight * (g[surf].norm(dim=-1) - 1.0).pow(2).mean()
    return loss


def evaluate_field_loss(nmap: NeuralPointMap, samples: SdfSamples, cfg: FieldTrainConfig) -> float:
    """Full-batch loss of the current field on ``samples``."""
    idx, mask = nmap.neighbors(samples.positions)
    keep = mask.any(1)
    if not keep.any():
        return float("nan")
    dt = nmap.dtype
    loss = field_loss(nmap, nmap.features, torch.as_tensor(samples.positions[keep], dtype=dt),
                      idx[keep], mask[keep], torch.as_tensor(samples.labels[keep], dtype=dt),
                      samples.surface[keep], torch.as_tensor(samples.weights[keep], dtype=dt), cfg)
    return float(loss.detach())
