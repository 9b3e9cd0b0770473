"""Occupancy-pyramid state encoder, multi-discrete actor-critic and PPO.

The observation handed out by an environment is the raw two-scale occupancy
pyramid; the learned bias-free projection to the 64-dim state embedding lives
in the network, so an empty map always embeds to zero.
"""

from __future__ import annotations

import ast
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .field import ActionParams
from .geometry import PointCloud, voxel_downsample

WEIGHTS_FORMAT_VERSION = 1
EMBED_DIM = 64

HEAD_NAMES = ("sigma_s", "n_surface", "n_free", "eta_min", "eta_max", "n_nn")
ETA_MIN, ETA_MAX = 3, 4


class AgentError(RuntimeError):
    pass


# ------------------------------------------------------------------ actions

@dataclass(frozen=True)
class ActionBins:
    sigma_s: tuple = (0.05, 0.10, 0.20, 0.30)
    n_surface: tuple = (2, 4, 6, 8)
    n_free: tuple = (0, 1, 2, 4)
    eta_min: tuple = (0.1, 0.3, 0.5)
    eta_max: tuple = (0.6, 0.8, 0.95)
    n_nn: tuple = (4, 6, 8, 12)

    def __post_init__(self):
        for name in HEAD_NAMES:
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"bins for {name} must be non-empty and strictly increasing")
        if not self.eta_min[0] < self.eta_max[-1]:
            raise ValueError("no valid (eta_min, eta_max) combination")

    @property
    def sizes(self) -> tuple:
        return tuple(len(getattr(self, n)) for n in HEAD_NAMES)

    def eta_max_mask(self, eta_min_index: int) -> np.ndarray:
        """Valid ``eta_max`` bins given the chosen ``eta_min`` bin."""
        return np.asarray(self.eta_max) > self.eta_min[eta_min_index]

    def decode(self, indices: Sequence[int]) -> ActionParams:
        vals = [getattr(self, n)[int(i)] for n, i in zip(HEAD_NAMES, indices)]
        return ActionParams(float(vals[0]), int(vals[1]), int(vals[2]),
                            float(vals[3]), float(vals[4]), int(vals[5]))

    def encode(self, action: ActionParams) -> tuple:
        """Bin indices of an action whose values all lie on the grid."""
        return tuple(int(getattr(self, n).index(v)) for n, v in zip(HEAD_NAMES, action.as_tuple()))


# ------------------------------------------------------------------ state

@dataclass(frozen=True)
class PyramidConfig:
    window: tuple = (16.0, 16.0, 8.0)
    pitches: tuple = (1.0, 2.0)
    input_voxel: float = 0.5

    def __post_init__(self):
        for p in self.pitches:
            if any(abs(w / p - round(w / p)) > 1e-9 for w in self.window):
                raise ValueError("window must be a whole number of cells at every pitch")

    @property
    def dim(self) -> int:
        return 5 * sum(int(np.prod([round(w / p) for w in self.window])) for p in self.pitches)


def window_centre(block_points: np.ndarray, cfg: PyramidConfig = PyramidConfig()) -> np.ndarray:
    """Block centroid snapped to the coarsest lattice (keeps the window grid-aligned)."""
    c = np.asarray(block_points, dtype=np.float64).reshape(-1, 3).mean(0)
    p = max(cfg.pitches)
    return np.floor(c / p + 0.5) * p


def occupancy_pyramid(points: np.ndarray, centre: np.ndarray,
                      cfg: PyramidConfig = PyramidConfig()) -> np.ndarray:
    """Per-cell ``[log1p(count), centroid offset / pitch (3), covariance trace / pitch^2]``
    over a fixed window at each pitch, flattened. Empty input gives zeros.
    """
    out = np.zeros(cfg.dim)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        return out
    window = np.asarray(cfg.window)
    lo = np.asarray(centre, dtype=np.float64) - window / 2
    rel = points - lo
    inside = np.all((rel >= 0) & (rel < window), axis=1)
    rel = rel[inside]
    offset = 0
    for p in cfg.pitches:
        shape = tuple(int(round(w / p)) for w in cfg.window)
        n_cells = int(np.prod(shape))
        feats = np.zeros((n_cells, 5))
        if len(rel):
            ijk = np.minimum(np.floor(rel / p).astype(np.int64), np.asarray(shape) - 1)
            lin = np.ravel_multi_index(ijk.T, shape)
            count = np.bincount(lin, minlength=n_cells).astype(np.float64)
            local = rel / p - (ijk + 0.5)               # offset from cell centre, in cells
            s1 = np.stack([np.bincount(lin, local[:, d], n_cells) for d in range(3)], 1)
            s2 = np.bincount(lin, (local ** 2).sum(1), n_cells)
            occ = count > 0
            mean = np.zeros((n_cells, 3))
            mean[occ] = s1[occ] / count[occ, None]
            trace = np.zeros(n_cells)
            trace[occ] = np.maximum(s2[occ] / count[occ] - (mean[occ] ** 2).sum(1), 0.0)
            feats[:, 0] = np.log1p(count)
            feats[:, 1:4] = mean
            feats[:, 4] = trace
        out[offset:offset + 5 * n_cells] = feats.reshape(-1)
        offset += 5 * n_cells
    return out


def map_observation(map_positions: np.ndarray, block_points: np.ndarray,
                    cfg: PyramidConfig = PyramidConfig()) -> np.ndarray:
    """Raw observation: pyramid of the voxel-downsampled map around the block."""
    if len(map_positions) == 0 or len(block_points) == 0:
        return np.zeros(cfg.dim)
    pts = voxel_downsample(PointCloud(map_positions), cfg.input_voxel).points
    return occupancy_pyramid(pts, window_centre(block_points, cfg), cfg)


# ------------------------------------------------------------------ network

class PolicyNet(torch.nn.Module):
    """Bias-free projection to the embedding, shared tanh trunk, six softmax heads, value head."""

    def __init__(self, obs_dim: int, bins: ActionBins = ActionBins(), hidden: int = 64):
        super().__init__()
        self.obs_dim = obs_dim
        self.bins = bins
        self.project = torch.nn.Linear(obs_dim, EMBED_DIM, bias=False)
        self.trunk = torch.nn.Sequential(torch.nn.Linear(EMBED_DIM, hidden), torch.nn.Tanh(),
                                         torch.nn.Linear(hidden, hidden), torch.nn.Tanh())
        self.heads = torch.nn.ModuleList(torch.nn.Linear(hidden, n) for n in bins.sizes)
        self.value = torch.nn.Linear(hidden, 1)
        torch.nn.init.normal_(self.project.weight, 0.0, 1.0 / math.sqrt(max(obs_dim, 1)))
        for h in self.heads:
            torch.nn.init.normal_(h.weight, 0.0, 0.01)
            torch.nn.init.zeros_(h.bias)

    def embed(self, obs: torch.Tensor) -> torch.Tensor:
        return self.project(obs)

    def forward(self, obs: torch.Tensor):
        """``(list of logits per head, value)`` for a batch of raw observations."""
        h = self.trunk(self.embed(obs))
        logits = [head(h) for head in self.heads]
        return logits, self.value(h).squeeze(-1)


def encode_state(net: PolicyNet, obs: np.ndarray) -> np.ndarray:
    """64-dim state embedding of a raw observation."""
    with torch.no_grad():
        return net.embed(torch.as_tensor(np.asarray(obs), dtype=torch.float64 if
                                         net.project.weight.dtype == torch.float64 else torch.float32)).numpy()


def _masked_logits(logits: list, actions: torch.Tensor, bins: ActionBins) -> list:
    """Apply the eta_max mask implied by each row's eta_min choice."""
    masks = torch.as_tensor(np.stack([bins.eta_max_mask(i) for i in range(len(bins.eta_min))]))
    m = masks[actions[:, ETA_MIN]]
    out = list(logits)
    out[ETA_MAX] = torch.where(m, logits[ETA_MAX], torch.full_like(logits[ETA_MAX], -torch.inf))
    return out


def evaluate_actions(net: PolicyNet, obs: torch.Tensor, actions: torch.Tensor):
    """``(log_prob, entropy, value)`` of given bin indices under ``net``."""
    logits, value = net(obs)
    logits = _masked_logits(logits, actions, net.bins)
    logp = torch.zeros(len(actions), dtype=value.dtype)
    ent = torch.zeros(len(actions), dtype=value.dtype)
    for d, lg in enumerate(logits):
        lsm = torch.log_softmax(lg, dim=-1)
        logp = logp + lsm.gather(1, actions[:, d:d + 1]).squeeze(1)
        p = lsm.exp()
        ent = ent - torch.where(p > 0, p * lsm, torch.zeros_like(p)).sum(-1)
    return logp, ent, value


def policy_distributions(net: PolicyNet, obs: np.ndarray):
    """Per-head probability vectors and the value for one observation."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(obs)[None], dtype=net.project.weight.dtype)
        logits, value = net(x)
    for lg in logits:
        if not torch.isfinite(lg).all():
            raise AgentError("non-finite policy logits")
    probs = [torch.softmax(lg[0].double(), -1).numpy() for lg in logits]
    return probs, float(value[0])


def select_action(probs: Sequence[np.ndarray], bins: ActionBins, mode: str = "sample",
                  rng: Optional[np.random.Generator] = None):
    """Return ``(indices, ActionParams, log_prob)``; ``max_likelihood`` breaks ties low."""
    if mode not in ("sample", "max_likelihood"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    idx, logp = [], 0.0
    for d, p in enumerate(probs):
        p = np.asarray(p, dtype=np.float64)
        if d == ETA_MAX:
            mask = bins.eta_max_mask(idx[ETA_MIN])
            if not np.any(mask & (p > 0)):
                i = int(np.nonzero(mask)[0][-1]) if mask.any() else len(p) - 1
                idx.append(i)
                continue
            p = np.where(mask, p, 0.0)
            p = p / p.sum()
        if mode == "max_likelihood":
            i = int(np.argmax(p))
        else:
            i = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), len(p) - 1))
            while p[i] == 0:
                i -= 1
        idx.append(i)
        logp += math.log(p[i])
    if not bins.eta_min[idx[ETA_MIN]] < bins.eta_max[idx[ETA_MAX]]:
        below = np.nonzero(np.asarray(bins.eta_min) < bins.eta_max[idx[ETA_MAX]])[0]
        idx[ETA_MIN] = int(below[-1])
    return tuple(idx), bins.decode(idx), min(logp, 0.0)


# ------------------------------------------------------------------ PPO

@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.6
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.0025
    value_coef: float = 0.5
    epochs: int = 10
    batch: int = 20
    minibatch: int = 20
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    grad_clip: float = 0.5
    iterations: int = 1500
    validation_interval: int = 10
    n_envs: int = 1
    normalize_rewards: bool = True

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.batch < 1 or self.minibatch < 1 or self.epochs < 1:
            raise ValueError("batch, minibatch and epochs must be positive")
        if self.n_envs != 1:
            raise ValueError("only a single environment is supported")
        if not (self.lr_start > 0 and self.lr_end > 0 and self.grad_clip > 0):
            raise ValueError("learning rates and grad clip must be positive")

    def lr_at(self, iteration: int, total: Optional[int] = None) -> float:
        total = self.iterations if total is None else total
        frac = iteration / max(total - 1, 1)
        return self.lr_start + (self.lr_end - self.lr_start) * min(max(frac, 0.0), 1.0)


@dataclass
class Transition:
    obs: np.ndarray
    action: tuple
    log_prob: float
    value: float
    reward: float
    done: bool

    def __post_init__(self):
        if self.log_prob > 0:
            raise ValueError("log_prob must be <= 0")


def compute_gae(transitions: Sequence[Transition], gamma: float, lam: float,
                last_value: float = 0.0, normalize: bool = True):
    """Generalised advantage estimates and returns (``A + V``, before normalisation).

    ``last_value`` bootstraps a trajectory that ends without a terminal flag.
    """
    if not len(transitions):
        raise ValueError("empty trajectory")
    T = len(transitions)
    adv = np.zeros(T)
    gae = 0.0
    for t in reversed(range(T)):
        tr = transitions[t]
        if tr.done:
            next_v, gae = 0.0, 0.0
        else:
            next_v = last_value if t == T - 1 else transitions[t + 1].value
        delta = tr.reward + gamma * next_v - tr.value
        gae = delta + gamma * lam * gae
        adv[t] = gae
    returns = adv + np.array([tr.value for tr in transitions])
    if normalize and T > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def clipped_surrogate(ratio, adv, eps: float):
    """Per-sample ``min(r A, clip(r, 1 - eps, 1 + eps) A)``."""
    if isinstance(ratio, torch.Tensor):
        return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)
    ratio, adv = np.asarray(ratio, float), np.asarray(adv, float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss(net: PolicyNet, obs, actions, old_logp, adv, returns, cfg: PPOConfig):
    """``(total, actor, value, entropy)`` tensors for one minibatch."""
    logp, ent, value = evaluate_actions(net, obs, actions)
    ratio = torch.exp(logp - old_logp)
    actor = -clipped_surrogate(ratio, adv, cfg.clip).mean()
    vloss = (value - returns).pow(2).mean()
    entropy = ent.mean()
    return actor + cfg.value_coef * vloss - cfg.entropy_coef * entropy, actor, vloss, entropy


@dataclass
class UpdateReport:
    actor: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    minibatches: int = 0
    skipped: int = 0


def ppo_update(net: PolicyNet, opt: torch.optim.Optimizer, transitions: Sequence[Transition],
               adv: np.ndarray, returns: np.ndarray, cfg: PPOConfig, lr: float,
               rng: np.random.Generator) -> UpdateReport:
    if len(transitions) < cfg.minibatch:
        raise ValueError("buffer smaller than a minibatch")
    dt = net.project.weight.dtype
    obs = torch.as_tensor(np.stack([t.obs for t in transitions]), dtype=dt)
    actions = torch.as_tensor(np.array([t.action for t in transitions]), dtype=torch.int64)
    old_logp = torch.as_tensor(np.array([t.log_prob for t in transitions]), dtype=dt)
    adv_t = torch.as_tensor(adv, dtype=dt)
    ret_t = torch.as_tensor(returns, dtype=dt)
    for g in opt.param_groups:
        g["lr"] = lr
    rep = UpdateReport()
    n = len(transitions)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n - cfg.minibatch + 1, cfg.minibatch):
            b = torch.as_tensor(order[s:s + cfg.minibatch])
            total, actor, vloss, ent = ppo_loss(net, obs[b], actions[b], old_logp[b], adv_t[b], ret_t[b], cfg)
            if not torch.isfinite(total):
                rep.skipped += 1
                continue
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            rep.actor += float(actor.detach())
            rep.value += float(vloss.detach())
            rep.entropy += float(ent.detach())
            rep.minibatches += 1
    if rep.minibatches:
        k = rep.minibatches
        rep.actor, rep.value, rep.entropy = rep.actor / k, rep.value / k, rep.entropy / k
    return rep


class RunningMeanStd:
    """Streaming mean/variance (parallel Welford merge)."""

    def __init__(self, eps: float = 1e-8):
        self.mean, self.var, self.count, self.eps = 0.0, 1.0, 0.0, eps

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if not len(x):
            return
        bm, bv, bc = x.mean(), x.var(), len(x)
        if self.count == 0:
            self.mean, self.var, self.count = bm, bv, bc
            return
        delta = bm - self.mean
        tot = self.count + bc
        m2 = self.var * self.count + bv * bc + delta ** 2 * self.count * bc / tot
        self.mean, self.var, self.count = self.mean + delta * bc / tot, m2 / tot, tot

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / math.sqrt(self.var + self.eps)


# ------------------------------------------------------------------ training loop

@dataclass
class CurveRow:
    iteration: int
    mean_reward: float
    mean_chamfer_cm: float


@dataclass
class TrainResult:
    net: PolicyNet
    curve: list = field(default_factory=list)
    reports: list = field(default_factory=list)


def make_net(obs_dim: int, bins: ActionBins = ActionBins(), seed: int = 0) -> PolicyNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PolicyNet(obs_dim, bins).double()


def train_agent(env, cfg: PPOConfig = PPOConfig(), seed: int = 0, iterations: Optional[int] = None,
                net: Optional[PolicyNet] = None, checkpoint: Optional[Path] = None,
                callback: Optional[Callable] = None) -> TrainResult:
    """Alternate ``cfg.batch``-step rollouts with PPO updates.

    ``env`` provides ``obs_dim``, ``bins``, ``reset(seed)`` and ``step(action)``
    returning ``(obs, reward, done, info)`` with an optional ``info["chamfer_cm"]``.
    """
    iterations = cfg.iterations if iterations is None else iterations
    rng = np.random.default_rng(seed)
    net = net if net is not None else make_net(env.obs_dim, env.bins, seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_start)
    result = TrainResult(net)
    reward_stats = RunningMeanStd()
    episode = 0
    obs = env.reset(seed * 100003 + episode)
    ep_return = 0.0
    for it in range(iterations):
        buf, raw, finished, chamfers = [], [], [], []
        for _ in range(cfg.batch):
            probs, value = policy_distributions(net, obs)
            idx, action, logp = select_action(probs, env.bins, "sample", rng)
            next_obs, reward, done, info = env.step(action)
            buf.append(Transition(obs, idx, logp, value, reward, done))
            raw.append(reward)
            ep_return += reward
            if "chamfer_cm" in info:
                chamfers.append(info["chamfer_cm"])
            if done:
                finished.append(ep_return)
                episode += 1
                ep_return = 0.0
                obs = env.reset(seed * 100003 + episode)
            else:
                obs = next_obs
        if cfg.normalize_rewards:
            reward_stats.update(raw)
            for tr, r in zip(buf, reward_stats.normalize(raw)):
                tr.reward = float(r)
        last_value = 0.0 if buf[-1].done else policy_distributions(net, obs)[1]
        adv, returns = compute_gae(buf, cfg.gamma, cfg.gae_lambda, last_value, normalize=True)
        rep = ppo_update(net, opt, buf, adv, returns, cfg, cfg.lr_at(it, iterations), rng)
        result.reports.append(rep)
        row = CurveRow(it, float(np.mean(finished)) if finished else float("nan"),
                       float(np.mean(chamfers)) if chamfers else float("nan"))
        result.curve.append(row)
        if callback is not None:
            callback(row, net)
        if checkpoint is not None and (it + 1) % cfg.validation_interval == 0:
            save_weights(net, checkpoint)
    if checkpoint is not None:
        save_weights(net, checkpoint)
    return result


def curve_csv(curve: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "mean_reward", "mean_chamfer_cm"])
    for r in curve:
        w.writerow([r.iteration, f"{r.mean_reward:.10g}", f"{r.mean_chamfer_cm:.10g}"])
    return buf.getvalue()


def save_weights(net: PolicyNet, path) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    bins = repr(tuple(getattr(net.bins, n) for n in HEAD_NAMES))
    with open(path, "wb") as fh:
        np.savez(fh, format_version=WEIGHTS_FORMAT_VERSION, obs_dim=net.obs_dim,
                 bins=np.array(bins), **arrays)


def load_weights(path) -> PolicyNet:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != WEIGHTS_FORMAT_VERSION:
            raise AgentError(f"unsupported weights format version {version}")
        bins = ActionBins(*ast.literal_eval(str(z["bins"])))
        net = PolicyNet(int(z["obs_dim"]), bins).double()
        state = {k[len("param/"):]: torch.as_tensor(z[k]) for k in z.files if k.startswith("param/")}
    net.load_state_dict(state)
    return net


# ------------------------------------------------------------------ sanity env

class BanditEnv:
    """Single state, one-step episodes.

    ``reward="joint"`` pays +1 only for the exact target action and -1 otherwise;
    ``reward="factorized"`` pays the mean over heads of +1/-1 per matching bin.
    """

    def __init__(self, target: Sequence[int], bins: ActionBins = ActionBins(), reward: str = "factorized",
                 obs_dim: int = 8):
        if reward not in ("joint", "factorized"):
            raise ValueError(f"unknown reward {reward!r}")
        self.bins = bins
        self.target = tuple(int(t) for t in target)
        self.reward_mode = reward
        self.obs_dim = obs_dim
        self._obs = np.ones(obs_dim)

    def reset(self, seed: int = 0) -> np.ndarray:
        return self._obs.copy()

    def step(self, action: ActionParams):
        idx = self.bins.encode(action)
        hits = np.array([a == t for a, t in zip(idx, self.target)])
        if self.reward_mode == "joint":
            r = 1.0 if hits.all() else -1.0
        else:
            r = float(np.where(hits, 1.0, -1.0).mean())
        return self._obs.copy(), r, True, {}

    def target_mass(self, net: PolicyNet) -> float:
        probs, _ = policy_distributions(net, self._obs)
        return float(np.prod([p[t] for p, t in zip(probs, self.target)]))
