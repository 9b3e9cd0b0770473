"""Per-scanblock reconstruction: normals, sampling, field training, local meshing.

The same :class:`Reconstructor` backs the RL environment and the CLI, so a
CLI run with a constant action is exactly an environment episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from typing import Optional, Sequence

import numpy as np

from .field import (ActionParams, FieldConfig, FieldTrainConfig, LossReport, NeuralPointMap,
                    SdfSamples, sample_free_space, sample_surface, train_field)
from .geometry import ScanBlock, build_scanblock, normalize_rows, partition_frames
from .mesher import IncrementalMesh, MCResult, MeshingRegion, TriangleMesh, extract_mesh_cells, sample_mesh_points
from .metrics import QualityReport, quality_report
from .normals import SmoothingConfig, process_block_normals


@dataclass(frozen=True)
class PipelineConfig:
    block_frames: int = 20
    voxel: float = 0.15
    margin_factor: float = 2.0      # meshing region = block box inflated by margin_factor * tr
    smooth_normals: bool = True
    replay_size: int = 60000
    replay_ratio: float = 1.0       # replayed samples per fresh sample
    eval_spacing: float = 0.05
    threshold_cm: float = 15.0
    smoothing: SmoothingConfig = dc_field(default_factory=SmoothingConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    train: FieldTrainConfig = dc_field(default_factory=FieldTrainConfig)

    def __post_init__(self):
        if self.block_frames < 1:
            raise ValueError("block_frames must be at least 1")
        if not (self.voxel > 0 and self.margin_factor >= 0 and self.eval_spacing > 0):
            raise ValueError("voxel, margin and eval spacing must be positive")
        if self.replay_size < 0 or self.replay_ratio < 0:
            raise ValueError("replay settings must be non-negative")


@dataclass(frozen=True)
class PreparedBlock:
    """Action-independent products of one scanblock, in world coordinates."""

    points: np.ndarray
    normals: np.ndarray
    origins: np.ndarray
    usable: np.ndarray          # non-degenerate normals


def prepare_block(block: ScanBlock, cfg: PipelineConfig) -> PreparedBlock:
    res = process_block_normals(block, cfg.smoothing, smooth=cfg.smooth_normals)
    R = block.base_pose.rotation
    return PreparedBlock(block.base_pose.apply(block.cloud.points),
                         normalize_rows(res.normals @ R.T),
                         block.base_pose.apply(block.ray_origins),
                         ~res.degenerate)


def prepare_sequence(frames: Sequence, cfg: PipelineConfig) -> list:
    """Fuse ``[(pose, sensor-frame cloud)]`` into blocks and prepare each one."""
    return [prepare_block(build_scanblock(chunk, len(chunk)), cfg)
            for chunk in partition_frames(frames, cfg.block_frames)]


@dataclass
class StepOutput:
    region: MeshingRegion
    result: MCResult
    loss: Optional[LossReport]
    report: Optional[QualityReport] = None


class Reconstructor:
    """Owns the neural point map, the replay memory and the incremental scene mesh."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.reset()

    def reset(self) -> None:
        self.map = NeuralPointMap(self.cfg.field, seed=self.seed)
        self.scene_mesh = IncrementalMesh()
        self.replay = SdfSamples.empty()
        self.rng = np.random.default_rng(self.seed + 1)

    def insert(self, block: PreparedBlock) -> None:
        self.map.insert(block.points)

    def draw_samples(self, block: PreparedBlock, action: ActionParams) -> SdfSamples:
        tr = action.truncation
        surf = sample_surface(block.points[block.usable], block.normals[block.usable], action, tr, self.rng)
        free = sample_free_space(block.points, block.origins, action, tr, self.rng)
        return SdfSamples.concat([surf, free])

    def _with_replay(self, fresh: SdfSamples) -> SdfSamples:
        n_old = min(len(self.replay), int(self.cfg.replay_ratio * len(fresh)))
        old = self.replay.subset(np.sort(self.rng.choice(len(self.replay), n_old, replace=False))) \
            if n_old else SdfSamples.empty()
        pool = SdfSamples.concat([self.replay, fresh])
        if len(pool) > self.cfg.replay_size:
            pool = pool.subset(np.sort(self.rng.choice(len(pool), self.cfg.replay_size, replace=False)))
        self.replay = pool
        return SdfSamples.concat([fresh, old])

    def integrate(self, block: PreparedBlock, action: ActionParams, insert: bool = True) -> StepOutput:
        """Insert, train on this block (plus replay) and re-mesh the block's region."""
        if insert:
            self.insert(block)
        tr = action.truncation
        fresh = self.draw_samples(block, action)
        loss = None
        if len(fresh):
            samples = self._with_replay(fresh)
            loss = train_field(self.map, samples, replace(self.cfg.train, tr=tr), self.rng)
        region = MeshingRegion.around(block.points, self.cfg.margin_factor * tr, self.cfg.voxel)
        result = extract_mesh_cells(self.map, region, action.n_nn, tr)
        self.scene_mesh.replace(region, result)
        return StepOutput(region, result, loss)

    def mesh(self) -> TriangleMesh:
        return self.scene_mesh.mesh()


def local_report(mesh: TriangleMesh, gt: np.ndarray, region: MeshingRegion,
                 cfg: PipelineConfig, seed: int = 0) -> QualityReport:
    """Quality of ``mesh`` against the ground truth, both cropped to ``region``."""
    gt_local = gt[region.contains(gt)]
    if len(mesh) == 0 or len(gt_local) == 0:
        return QualityReport.worst(cfg.threshold_cm)
    samples = sample_mesh_points(mesh, cfg.eval_spacing, seed)
    samples = samples[region.contains(samples)]
    if len(samples) == 0:
        return QualityReport.worst(cfg.threshold_cm)
    return quality_report(samples, gt_local, cfg.threshold_cm)


def scene_report(mesh: TriangleMesh, gt: np.ndarray, cfg: PipelineConfig, seed: int = 0) -> QualityReport:
    if len(mesh) == 0:
        return QualityReport.worst(cfg.threshold_cm)
    return quality_report(sample_mesh_points(mesh, cfg.eval_spacing, seed), gt, cfg.threshold_cm)


def reconstruct(blocks: Sequence[PreparedBlock], actions, cfg: PipelineConfig = PipelineConfig(),
                seed: int = 0) -> Reconstructor:
    """Run the pipeline over all blocks; ``actions`` is one action or a per-block callable."""
    rec = Reconstructor(cfg, seed)
    for i, block in enumerate(blocks):
        action = actions(i, rec) if callable(actions) else actions
        rec.integrate(block, action)
    return rec
