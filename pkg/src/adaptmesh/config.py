"""Single JSON run configuration covering every tunable, validated at parse time."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field, fields
from typing import Optional

from .agent import PPOConfig, PyramidConfig
from .env import EnvConfig
from .field import ActionParams, FieldConfig, FieldTrainConfig
from .metrics import RewardMapping, RewardWeights
from .normals import SmoothingConfig
from .pipeline import PipelineConfig
from .sim import ScannerSpec, TrajectorySpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSection:
    pitch: float = 0.3
    k_neighbors: int = 6
    feature_dim: int = 16
    hidden: int = 64
    feature_std: float = 0.01
    lr: float = 2e-3
    iters: int = 30
    bce_scale: Optional[float] = None
    eikonal_weight: float = 0.1
    batch_size: int = 2048
    replay_size: int = 60000
    replay_ratio: float = 1.0

    def __post_init__(self):
        if not (self.pitch > 0 and self.k_neighbors >= 1 and self.feature_dim >= 1 and self.hidden >= 1):
            raise ConfigError("field: pitch, k_neighbors, feature_dim and hidden must be positive")
        if self.batch_size < 1:
            raise ConfigError("field: batch_size must be positive")
        FieldTrainConfig(lr=self.lr, iters=self.iters, bce_scale=self.bce_scale,
                         eikonal_weight=self.eikonal_weight, batch_size=self.batch_size)


@dataclass(frozen=True)
class MeshingSection:
    voxel: float = 0.15
    margin_factor: float = 2.0


@dataclass(frozen=True)
class MetricsSection:
    threshold_cm: float = 15.0
    eval_spacing: float = 0.05
    w_acc: float = 1.0
    w_comp: float = 1.0
    w_chamfer: float = 1.0
    w_fscore: float = 2.0

    def __post_init__(self):
        if not self.threshold_cm > 0:
            raise ConfigError("metrics: threshold_cm must be positive")
        RewardWeights(self.w_acc, self.w_comp, self.w_chamfer, self.w_fscore)


@dataclass(frozen=True)
class SceneSection:
    block_frames: int = 20
    rays_per_frame: int = 1000
    elevation_deg: tuple = (-90.0, 90.0)
    max_range: float = 10.0
    range_noise: float = 0.01
    frame_rate: float = 10.0
    start: float = 1.0
    stop: Optional[float] = None
    speed: float = 1.0
    height: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "elevation_deg", tuple(self.elevation_deg))
        self.scanner()

    def scanner(self) -> ScannerSpec:
        return ScannerSpec(self.rays_per_frame, self.elevation_deg, self.max_range, self.range_noise, self.frame_rate)

    def trajectory(self) -> TrajectorySpec:
        return TrajectorySpec(self.start, self.stop, self.speed, self.height)


_SECTIONS = {
    "smoothing": SmoothingConfig,
    "field": FieldSection,
    "meshing": MeshingSection,
    "metrics": MetricsSection,
    "ppo": PPOConfig,
    "action": ActionParams,
    "scene": SceneSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    smoothing: SmoothingConfig = dc_field(default_factory=SmoothingConfig)
    field: FieldSection = dc_field(default_factory=FieldSection)
    meshing: MeshingSection = dc_field(default_factory=MeshingSection)
    metrics: MetricsSection = dc_field(default_factory=MetricsSection)
    ppo: PPOConfig = dc_field(default_factory=PPOConfig)
    action: ActionParams = dc_field(default_factory=ActionParams)
    scene: SceneSection = dc_field(default_factory=SceneSection)

    # ------------------------------------------------------------ (de)serialisation

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        unknown = set(data) - set(_SECTIONS) - {"seed", "schema_version"}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name} must be an object")
            known = {f.name for f in fields(klass)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(bad))}")
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
            try:
                kwargs[name] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "seed": self.seed}
        for name in _SECTIONS:
            out[name] = asdict(getattr(self, name))
        return json.loads(json.dumps(out))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # ------------------------------------------------------------ module configs

    def pipeline_config(self, smooth_normals: bool = True) -> PipelineConfig:
        f = self.field
        return PipelineConfig(
            block_frames=self.scene.block_frames, voxel=self.meshing.voxel,
            margin_factor=self.meshing.margin_factor, smooth_normals=smooth_normals,
            replay_size=f.replay_size, replay_ratio=f.replay_ratio,
            eval_spacing=self.metrics.eval_spacing, threshold_cm=self.metrics.threshold_cm,
            smoothing=self.smoothing,
            field=FieldConfig(f.pitch, f.k_neighbors, f.feature_dim, f.hidden, f.feature_std),
            train=FieldTrainConfig(lr=f.lr, iters=f.iters, bce_scale=f.bce_scale,
                                   eikonal_weight=f.eikonal_weight, batch_size=f.batch_size))

    def env_config(self, smooth_normals: bool = True) -> EnvConfig:
        m = self.metrics
        return EnvConfig(pipeline=self.pipeline_config(smooth_normals), pyramid=PyramidConfig(),
                         scanner=self.scene.scanner(), trajectory=self.scene.trajectory(),
                         weights=RewardWeights(m.w_acc, m.w_comp, m.w_chamfer, m.w_fscore),
                         mapping=RewardMapping())
