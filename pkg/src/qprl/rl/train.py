"""Rollout collection and the PPO training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..env import RateControlEnv
from .net import NetSpec, PolicyNet, observation
from .ppo import Adam, Batch, LossWeights, gae, log_prob, ppo_update

log = logging.getLogger(__name__)

EnvFactory = Callable[[int, int], RateControlEnv]

METRIC_COLUMNS = (
    "iteration",
    "frames",
    "mean_reward",
    "mean_bitrate_error",
    "mean_task_score",
    "policy",
    "value",
    "entropy",
    "aux",
    "total",
)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.0
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    lr: float = 1e-3
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    aux_coef: float = 0.1
    max_grad_norm: float = 0.5
    total_frames: int = 100_000
    n_envs: int = 8
    horizon: int = 256
    seed: int = 0
    channels: tuple = (8, 8, 8)
    latent: int = 64
    init_log_std: float = 0.5
    normalize_value: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip epsilon must be positive")
        if self.n_envs < 1 or self.horizon < 1:
            raise ValueError("n_envs and horizon must be positive")
        self.channels = tuple(int(c) for c in self.channels)

    def loss_weights(self) -> LossWeights:
        return LossWeights(clip=self.clip, vf_coef=self.vf_coef, ent_coef=self.ent_coef, aux_coef=self.aux_coef)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Rollout:
    planes: np.ndarray
    glob: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    block_rewards: np.ndarray
    last_values: np.ndarray
    infos: list = field(default_factory=list)


class RunningMeanStd:
    """Running mean / variance over batches (parallel-merge update)."""

    def __init__(self):
        self.mean, self.var, self.count = 0.0, 1.0, 0.0

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        m, v, n = float(x.mean()), float(x.var()), float(x.size)
        if self.count == 0:
            self.mean, self.var, self.count = m, v, n
            return
        tot = self.count + n
        delta = m - self.mean
        self.mean += delta * n / tot
        self.var = (self.var * self.count + v * n + delta**2 * self.count * n / tot) / tot
        self.count = tot

    @property
    def std(self) -> float:
        return math.sqrt(self.var) + 1e-8


class ValueScale:
    """The critic predicts standardized returns; this maps between the two scales."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.stats = RunningMeanStd()

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return v * self.stats.std + self.stats.mean if self.enabled and self.stats.count else v

    def normalize(self, r: np.ndarray) -> np.ndarray:
        return (r - self.stats.mean) / self.stats.std if self.enabled else r


def scale_block_targets(targets: np.ndarray) -> np.ndarray:
    """Scale per-block task rewards to unit RMS over the batch."""
    rms = float(np.sqrt(np.mean(targets**2)))
    return targets / rms if rms > 0 else targets


class RolloutCollector:
    """Steps ``n_envs`` environments in lock-step, canonically ordered by index."""

    def __init__(self, env_factory: EnvFactory, n_envs: int):
        self.env_factory = env_factory
        self.episodes = [0] * n_envs
        self.envs = [env_factory(i, 0) for i in range(n_envs)]
        self.states = [env.reset() for env in self.envs]

    def collect(self, net: PolicyNet, horizon: int, rng: np.random.Generator, value_scale: Optional["ValueScale"] = None) -> Rollout:
        scale = value_scale.denormalize if value_scale is not None else (lambda v: v)
        spec = net.spec
        steps = []
        for _ in range(horizon):
            planes, glob = observation(self.states)
            mean, std, value, _ = net.forward(planes, glob)
            value = scale(value)
            actions = mean + rng.standard_normal(mean.shape) * std
            logp = log_prob(mean, std, actions)
            rewards, dones, blocks, infos = [], [], [], []
            for i, env in enumerate(self.envs):
                res = env.step(actions[i].reshape(spec.action_shape))
                rewards.append(res.reward)
                dones.append(res.done)
                blocks.append(res.block_rewards.reshape(-1))
                infos.append(
                    {k: res.info[k] for k in ("frame_bits", "task_score", "bitrate_error", "r_bitrate", "frame_qp")}
                )
                if res.done:
                    self.episodes[i] += 1
                    self.envs[i] = self.env_factory(i, self.episodes[i])
                    self.states[i] = self.envs[i].reset()
                else:
                    self.states[i] = res.next_state
            steps.append((planes, glob, actions, logp, np.array(rewards), value, np.array(dones), np.stack(blocks), infos))
        _, _, last_values, _ = net.forward(*observation(self.states))
        last_values = scale(last_values)
        cols = list(zip(*steps))
        return Rollout(
            planes=np.stack(cols[0]),
            glob=np.stack(cols[1]),
            actions=np.stack(cols[2]),
            log_probs=np.stack(cols[3]),
            rewards=np.stack(cols[4]),
            values=np.stack(cols[5]),
            dones=np.stack(cols[6]).astype(np.float64),
            block_rewards=np.stack(cols[7]),
            last_values=last_values,
            infos=[i for step in cols[8] for i in step],
        )


def rollout_batch(ro: Rollout, gamma: float, gae_lambda: float, value_scale: Optional[ValueScale] = None) -> Batch:
    adv, ret = gae(ro.rewards, ro.values, ro.dones, gamma, gae_lambda, ro.last_values)
    if value_scale is not None and value_scale.enabled:
        value_scale.stats.update(ret)
        ret = value_scale.normalize(ret)

    def flat(a):
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])

    return Batch(
        planes=flat(ro.planes),
        glob=flat(ro.glob),
        actions=flat(ro.actions),
        old_log_prob=flat(ro.log_probs),
        advantages=flat(adv),
        returns=flat(ret),
        block_targets=scale_block_targets(flat(ro.block_rewards)),
    )


def build_net(cfg: TrainConfig, mb_shape, action_shape) -> PolicyNet:
    spec = NetSpec(
        mb_shape=tuple(mb_shape),
        action_shape=tuple(action_shape),
        channels=cfg.channels,
        latent=cfg.latent,
        init_log_std=cfg.init_log_std,
    )
    return PolicyNet(spec, seed=cfg.seed)


def train(
    env_factory: EnvFactory,
    cfg: TrainConfig,
    *,
    net: Optional[PolicyNet] = None,
    on_checkpoint: Optional[Callable[[PolicyNet, int], None]] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> tuple[PolicyNet, list[dict]]:
    """Train a policy with PPO; returns the final network and per-iteration metrics."""
    rng = np.random.default_rng(cfg.seed)
    try:
        probe = env_factory(0, 0)
    except Exception as exc:
        raise RuntimeError(f"environment construction failed: {exc}") from exc
    if net is None:
        net = build_net(cfg, probe.mb_shape, probe.action_shape)
    metrics: list[dict] = []
    if cfg.total_frames <= 0:
        return net, metrics
    collector = RolloutCollector(env_factory, cfg.n_envs)
    opt = Adam(net.params, lr=cfg.lr)
    weights = cfg.loss_weights()
    frames_per_iter = cfg.n_envs * cfg.horizon
    n_iter = math.ceil(cfg.total_frames / frames_per_iter)
    value_scale = ValueScale(cfg.normalize_value)
    frames = 0
    for it in range(n_iter):
        ro = collector.collect(net, cfg.horizon, rng, value_scale)
        frames += frames_per_iter
        batch = rollout_batch(ro, cfg.gamma, cfg.gae_lambda, value_scale)
        losses = ppo_update(
            net,
            batch,
            opt,
            weights,
            epochs=cfg.epochs,
            minibatch_size=cfg.minibatch_size,
            max_grad_norm=cfg.max_grad_norm,
            rng=rng,
        )
        row = {
            "iteration": it,
            "frames": frames,
            "mean_reward": float(ro.rewards.mean()),
            "mean_bitrate_error": float(np.mean([abs(i["bitrate_error"]) for i in ro.infos])),
            "mean_task_score": float(np.mean([i["task_score"] for i in ro.infos])),
            **{k: losses[k] for k in ("policy", "value", "entropy", "aux", "total")},
        }
        metrics.append(row)
        log.info("iter %d frames %d reward %.5f task %.5f", it, frames, row["mean_reward"], row["mean_task_score"])
        if on_iteration is not None:
            on_iteration(row)
        if on_checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(net, it + 1)
    return net, metrics
