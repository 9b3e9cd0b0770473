"""Scanblock-per-step reconstruction environment over synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .agent import ActionBins, PyramidConfig, map_observation, policy_distributions, select_action
from .field import ActionParams
from .metrics import DEFAULT_MAPPING, QualityReport, RewardMapping, RewardWeights, composite_reward
from .pipeline import PipelineConfig, PreparedBlock, Reconstructor, local_report, prepare_sequence, scene_report
from .sim import Scene, ScannerSpec, SceneSpec, TrajectorySpec, make_trajectory, simulate_sequence


@dataclass(frozen=True)
class EnvConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    scanner: ScannerSpec = field(default_factory=ScannerSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    weights: RewardWeights = field(default_factory=RewardWeights)
    mapping: RewardMapping = DEFAULT_MAPPING


@dataclass
class SceneData:
    spec: SceneSpec
    scene: Scene
    gt: np.ndarray
    blocks: list
    n_frames: int


def load_scene_data(spec: SceneSpec, cfg: EnvConfig, seed: int = 0,
                    scanner: Optional[ScannerSpec] = None,
                    trajectory: Optional[TrajectorySpec] = None) -> SceneData:
    """Scan a scene along its trajectory and prepare all blocks (action independent)."""
    scene = Scene(spec)
    scanner = scanner or cfg.scanner
    _, poses = make_trajectory(scene, scanner, trajectory or cfg.trajectory)
    frames = simulate_sequence(scene, scanner, poses, seed=spec.seed * 7 + seed)
    return SceneData(spec, scene, scene.ground_truth().points, prepare_sequence(frames, cfg.pipeline), len(frames))


@dataclass
class EpisodeResult:
    rewards: list
    reports: list
    actions: list
    scene_report: QualityReport

    @property
    def r_sum(self) -> float:
        return float(np.sum(self.rewards))


def run_reconstruction(blocks: Sequence[PreparedBlock], policy: Callable[[np.ndarray], ActionParams],
                       cfg: EnvConfig = EnvConfig(), seed: int = 0, nmap=None) -> Reconstructor:
    """The environment's block loop without ground truth: observe, act, integrate.

    ``nmap`` resumes from an existing neural point map.
    """
    rec = Reconstructor(cfg.pipeline, seed=seed)
    if nmap is not None:
        rec.map = nmap
    rec.insert(blocks[0])
    for i, block in enumerate(blocks):
        obs = map_observation(rec.map.positions, block.points, cfg.pyramid)
        rec.integrate(block, policy(obs), insert=False)
        if i + 1 < len(blocks):
            rec.insert(blocks[i + 1])
    return rec


class SimEnvironment:
    """One episode traverses one scene; episode ``seed`` picks the scene round-robin.

    Scenes are given as :class:`SceneSpec`, ``(SceneSpec, ScannerSpec, TrajectorySpec)``
    tuples or pre-scanned :class:`SceneData`.
    """

    def __init__(self, scenes: Sequence, cfg: EnvConfig = EnvConfig(), bins: ActionBins = ActionBins(),
                 seed: int = 0):
        if not len(scenes):
            raise ValueError("need at least one scene")
        self.cfg = cfg
        self.bins = bins
        self.seed = seed
        self._scenes = list(scenes)
        self._data: dict = {}
        self.obs_dim = cfg.pyramid.dim
        self.rec: Optional[Reconstructor] = None
        self.data: Optional[SceneData] = None
        self.step_index = 0

    def scene_data(self, i: int) -> SceneData:
        if i not in self._data:
            s = self._scenes[i]
            if isinstance(s, SceneData):
                self._data[i] = s
            elif isinstance(s, tuple):
                self._data[i] = load_scene_data(s[0], self.cfg, self.seed, *s[1:])
            else:
                self._data[i] = load_scene_data(s, self.cfg, self.seed)
        return self._data[i]

    @property
    def n_scenes(self) -> int:
        return len(self._scenes)

    @property
    def done(self) -> bool:
        return self.data is not None and self.step_index >= len(self.data.blocks)

    def _observe(self) -> np.ndarray:
        block = self.data.blocks[self.step_index]
        return map_observation(self.rec.map.positions, block.points, self.cfg.pyramid)

    def reset(self, seed: int = 0, scene_index: Optional[int] = None) -> np.ndarray:
        i = seed % self.n_scenes if scene_index is None else scene_index
        self.data = self.scene_data(i)
        self.rec = Reconstructor(self.cfg.pipeline, seed=seed)
        self.step_index = 0
        self.rec.insert(self.data.blocks[0])
        return self._observe()

    def step(self, action: ActionParams):
        if self.data is None or self.done:
            raise RuntimeError("step called on a finished or unreset environment")
        block = self.data.blocks[self.step_index]
        out = self.rec.integrate(block, action, insert=False)
        report = local_report(out.result.mesh, self.data.gt, out.region, self.cfg.pipeline, seed=self.step_index)
        reward = composite_reward(report, self.cfg.weights, self.cfg.mapping)
        self.step_index += 1
        done = self.done
        if done:
            obs = np.zeros(self.obs_dim)
        else:
            self.rec.insert(self.data.blocks[self.step_index])
            obs = self._observe()
        info = {"report": report, "chamfer_cm": report.chamfer_cm, "region": out.region, "loss": out.loss}
        return obs, reward, done, info

    def run_episode(self, policy: Callable[[np.ndarray], ActionParams], seed: int = 0,
                    scene_index: Optional[int] = None) -> EpisodeResult:
        """Roll out ``policy(obs) -> ActionParams`` and score the full-scene mesh."""
        obs = self.reset(seed, scene_index)
        rewards, reports, actions = [], [], []
        done = False
        while not done:
            action = policy(obs)
            obs, r, done, info = self.step(action)
            rewards.append(r)
            reports.append(info["report"])
            actions.append(action)
        full = scene_report(self.rec.mesh(), self.data.gt, self.cfg.pipeline)
        return EpisodeResult(rewards, reports, actions, full)


def constant_policy(action: ActionParams) -> Callable:
    return lambda obs: action


def agent_policy(net, bins: ActionBins) -> Callable:
    """Max-likelihood actions of a trained network."""

    def act(obs):
        probs, _ = policy_distributions(net, obs)
        return select_action(probs, bins, "max_likelihood")[1]
    return act
