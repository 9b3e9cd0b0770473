"""PCA normals, centroid-polyline orientation and L0 normal smoothing.

The smoothing minimises, over unit normals ``n``,

    sum_i (1 - n_i . nhat_i) + eta * #{(i, j) : n_i - n_N(i,j) != 0}

by splitting with an auxiliary difference variable ``zeta`` and alternating a
hard-threshold step for ``zeta`` with a closed-form normal update, doubling the
coupling weight ``beta`` after every sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ScanBlock, normalize_rows


@dataclass(frozen=True)
class SmoothingConfig:
    radius: float = 2.0
    k_max: int = 20
    beta: float = 1.0
    eta: float = 0.1
    beta_max: float = 64.0
    n_segments: int = 5

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.k_max < 3:
            raise ValueError("k_max must be at least 3")
        if not (self.beta > 0 and self.eta > 0):
            raise ValueError("beta and eta must be positive")
        if not self.beta_max > self.beta:
            raise ValueError("beta_max must exceed beta")
        if self.n_segments < 2:
            raise ValueError("n_segments must be at least 2")


@dataclass(frozen=True)
class NeighborGraph:
    """Padded neighbour lists: ``index[i, :count[i]]`` are the neighbours of ``i``.

    Lists are sorted by distance, ties broken by index; padding is ``-1``.
    """

    index: np.ndarray
    count: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.index >= 0

    def __len__(self) -> int:
        return len(self.count)


@dataclass(frozen=True)
class NormalResult:
    normals: np.ndarray
    degenerate: np.ndarray
    flagged: np.ndarray


def build_neighbor_graph(points: np.ndarray, radius: float, k_max: int) -> NeighborGraph:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return NeighborGraph(np.zeros((0, k_max), np.int64), np.zeros(0, np.int64))
    k_query = min(k_max + 1, n)
    dist, idx = cKDTree(points).query(points, k=k_query, distance_upper_bound=radius)
    dist = np.asarray(dist).reshape(n, k_query)
    idx = np.asarray(idx).reshape(n, k_query)
    valid = np.isfinite(dist) & (idx != np.arange(n)[:, None]) & (idx < n)
    # sort by (distance, index) with invalid slots last
    d_key = np.where(valid, dist, np.inf)
    i_key = np.where(valid, idx, np.iinfo(np.int64).max)
    order = np.lexsort((i_key, d_key), axis=1)
    idx = np.take_along_axis(np.where(valid, idx, -1), order, axis=1)[:, :k_max]
    if idx.shape[1] < k_max:
        idx = np.hstack([idx, np.full((n, k_max - idx.shape[1]), -1)])
    count = (idx >= 0).sum(axis=1)
    return NeighborGraph(idx.astype(np.int64), count.astype(np.int64))


def _pca_normals(points: np.ndarray, graph: NeighborGraph):
    n = len(points)
    degenerate = graph.count < 2
    mask = graph.mask
    safe = np.where(mask, graph.index, np.arange(n)[:, None])
    nbrs = points[safe]                                   # (n, k, 3)
    w = np.concatenate([np.ones((n, 1)), mask.astype(float)], axis=1)
    pts = np.concatenate([points[:, None, :], nbrs], axis=1)
    mean = (w[..., None] * pts).sum(1) / w.sum(1, keepdims=True)
    d = (pts - mean[:, None, :]) * np.sqrt(w)[..., None]
    cov = np.einsum("nki,nkj->nij", d, d)
    _, vecs = np.linalg.eigh(cov)
    normals = normalize_rows(vecs[:, :, 0])
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, degenerate


def estimate_normals_pca(block: ScanBlock, cfg: SmoothingConfig = SmoothingConfig(),
                         graph: Optional[NeighborGraph] = None):
    """Smallest-eigenvector normals; returns ``(normals, degenerate)``.

    Points with fewer than two neighbours inside ``cfg.radius`` are flagged
    degenerate and given a placeholder normal.
    """
    points = block.cloud.points
    if len(points) < 3:
        raise ValueError("need at least three points for PCA normals")
    if graph is None:
        graph = build_neighbor_graph(points, cfg.radius, cfg.k_max)
    return _pca_normals(points, graph)


def centroid_polyline(points: np.ndarray, n_segments: int):
    """Return ``(axis, centroids, slab_edges)`` for the block's primary direction.

    Empty slabs contribute no centroid, which merges them into their neighbours.
    """
    lo, hi = points.min(0), points.max(0)
    axis = int(np.argmax(hi - lo))
    u = points[:, axis]
    edges = np.linspace(lo[axis], hi[axis], n_segments + 1)
    slab = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, n_segments - 1)
    centroids = []
    for s in range(n_segments):
        members = points[slab == s]
        if len(members):
            centroids.append(members.mean(0))
    return axis, np.array(centroids), edges


def _closest_on_polyline(points, axis, centroids):
    if len(centroids) == 1:
        return np.broadcast_to(centroids[0], points.shape).copy()
    cu = centroids[:, axis]
    # segment index: which pair of consecutive centroids brackets the point's coordinate
    seg = np.clip(np.searchsorted(cu, points[:, axis], side="right") - 1, 0, len(centroids) - 2)
    a, b = centroids[seg], centroids[seg + 1]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", points - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    return a + t[:, None] * ab


def orient_normals_msc_nvo(block: ScanBlock, normals: np.ndarray,
                           cfg: SmoothingConfig = SmoothingConfig(),
                           degenerate: Optional[np.ndarray] = None):
    """Flip normals so that they face the block's centroid polyline.

    Returns ``(oriented, flagged)``; points whose projection vector vanishes
    keep their normal and are flagged.
    """
    points = block.cloud.points
    normals = np.array(normals, dtype=np.float64)
    if degenerate is None:
        degenerate = np.zeros(len(points), bool)
    usable = ~degenerate
    if not np.any(usable):
        return normals, np.ones(len(points), bool)
    axis, centroids, _ = centroid_polyline(points[usable], cfg.n_segments)
    proj = _closest_on_polyline(points, axis, centroids) - points
    length = np.linalg.norm(proj, axis=1)
    flagged = length <= 1e-12
    dot = np.einsum("ij,ij->i", normals, proj) / np.where(flagged, 1.0, length)
    flip = (dot < 0) & ~flagged & usable
    normals[flip] *= -1.0
    return normals, flagged | degenerate


def solve_zeta(D: np.ndarray, beta: float, eta: float) -> np.ndarray:
    """Per-element minimiser of ``beta |D - zeta|^2 + eta [zeta != 0]``."""
    D = np.asarray(D, dtype=np.float64)
    sq = np.einsum("...i,...i->...", D, D)
    return np.where((eta / beta > sq)[..., None], 0.0, D)


def edge_differences(normals: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """``D[i, j] = n_i - n_N(i,j)`` (zero on padding)."""
    safe = np.where(graph.mask, graph.index, np.arange(len(normals))[:, None])
    D = normals[:, None, :] - normals[safe]
    D[~graph.mask] = 0.0
    return D


def normal_update_raw(n_hat: np.ndarray, normals: np.ndarray, zeta: np.ndarray,
                      graph: NeighborGraph, beta: float) -> np.ndarray:
    """Closed-form minimiser before re-normalisation."""
    mask = graph.mask
    safe = np.where(mask, graph.index, np.arange(len(normals))[:, None])
    terms = (normals[safe] + zeta) * mask[..., None]
    return (n_hat + beta * terms.sum(1)) / (beta * graph.count[:, None] + 1.0)


def solve_normals(n_hat: np.ndarray, zeta: np.ndarray, graph: NeighborGraph, beta: float,
                  normals: Optional[np.ndarray] = None):
    """Jacobi sweep of the closed-form update; returns ``(normals, flagged)``.

    ``normals`` are the current neighbour normals (defaults to ``n_hat``).
    A vanishing update keeps the previous normal and is flagged.
    """
    n_hat = np.asarray(n_hat, dtype=np.float64)
    current = n_hat if normals is None else np.asarray(normals, dtype=np.float64)
    raw = normal_update_raw(n_hat, current, zeta, graph, beta)
    length = np.linalg.norm(raw, axis=1)
    flagged = length < 1e-12
    out = np.where(flagged[:, None], current, raw / np.where(flagged, 1.0, length)[:, None])
    return out, flagged


def smooth_normals_l0(block: ScanBlock, normals: np.ndarray,
                      cfg: SmoothingConfig = SmoothingConfig(),
                      graph: Optional[NeighborGraph] = None,
                      degenerate: Optional[np.ndarray] = None,
                      return_zeta: bool = False):
    """Alternate the zeta and normal steps with ``beta`` doubling until it passes ``beta_max``."""
    points = block.cloud.points
    n_hat = normalize_rows(np.asarray(normals, dtype=np.float64))
    if graph is None:
        graph = build_neighbor_graph(points, cfg.radius, cfg.k_max)
    if degenerate is None:
        degenerate = graph.count < 2
    # degenerate points neither move nor pull on their neighbours
    keep = graph.mask & ~degenerate[np.where(graph.mask, graph.index, 0)]
    graph = NeighborGraph(np.where(keep, graph.index, -1), keep.sum(1))
    n = n_hat.copy()
    beta = cfg.beta
    zeta = np.zeros((len(n), graph.index.shape[1], 3))
    while beta <= cfg.beta_max:
        zeta = solve_zeta(edge_differences(n, graph), beta, cfg.eta)
        n, _ = solve_normals(n_hat, zeta, graph, beta, normals=n)
        n[degenerate] = n_hat[degenerate]
        beta *= 2.0
    return (n, zeta) if return_zeta else n


def process_block_normals(block: ScanBlock, cfg: SmoothingConfig = SmoothingConfig(),
                          smooth: bool = True) -> NormalResult:
    """PCA, orientation and (optionally) L0 smoothing over one block."""
    graph = build_neighbor_graph(block.cloud.points, cfg.radius, cfg.k_max)
    normals, degenerate = _pca_normals(block.cloud.points, graph)
    normals, flagged = orient_normals_msc_nvo(block, normals, cfg, degenerate)
    if smooth:
        normals = smooth_normals_l0(block, normals, cfg, graph=graph, degenerate=degenerate)
    return NormalResult(normals, degenerate, flagged)
