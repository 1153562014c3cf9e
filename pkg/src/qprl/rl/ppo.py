"""PPO pieces: Gaussian policy math, GAE, the composite loss and its update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .net import PolicyNet

LOG_2PI = math.log(2 * math.pi)


class NonFiniteLoss(FloatingPointError):
    pass


def log_prob(mean, std, action) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the trailing axis."""
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    if mean.shape != action.shape:
        raise ValueError(f"mean {mean.shape} and action {action.shape} differ")
    z = (action - mean) / std
    return np.sum(-0.5 * z**2 - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def entropy(std) -> float:
    s = np.asarray(std, dtype=np.float64)
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + np.log(s)))


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimates and returns along the leading axis.

    ``dones[t]`` marks that the episode ended after step t, so nothing is
    bootstrapped across it. ``last_value`` bootstraps the step after the end
    of the sequence when it was not terminal.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    next_v = np.asarray(last_value, dtype=np.float64) * np.ones_like(r[0])
    running = np.zeros_like(r[0])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


@dataclass
class Batch:
    planes: np.ndarray
    glob: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    block_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class LossWeights:
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    aux_coef: float = 0.1
    normalize_advantage: bool = True


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def composite_loss(net: PolicyNet, batch: Batch, w: LossWeights, with_grad: bool = True):
    """Clipped surrogate + value MSE - entropy bonus + block-reward MSE.

    Returns (report dict, gradient dict or None).
    """
    n = len(batch)
    mean, std, value, pred = net.forward(batch.planes, batch.glob, cache=with_grad)
    adv = normalize_advantages(batch.advantages) if w.normalize_advantage else batch.advantages
    diff = batch.actions - mean
    logp = log_prob(mean, std, batch.actions)
    ratio = np.exp(logp - batch.old_log_prob)
    clipped = np.clip(ratio, 1 - w.clip, 1 + w.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    policy = -np.mean(np.minimum(surr1, surr2))
    vdiff = value - batch.returns
    value_loss = np.mean(vdiff**2)
    ent = entropy(std)
    pdiff = pred - batch.block_targets
    aux = np.mean(pdiff**2)
    total = policy + w.vf_coef * value_loss - w.ent_coef * ent + w.aux_coef * aux
    report = {
        "policy": float(policy),
        "value": float(value_loss),
        "entropy": ent,
        "aux": float(aux),
        "total": float(total),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > w.clip)),
    }
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss: {report}")
    if not with_grad:
        return report, None
    # d(-min(surr1, surr2))/d logp; the clipped branch is flat in ratio
    g_logp = np.where(surr1 <= surr2, -adv * ratio, 0.0) / n
    var = std**2
    d_mean = g_logp[:, None] * diff / var
    d_log_std = (g_logp[:, None] * (diff**2 / var - 1.0)).sum(0) - w.ent_coef
    d_value = w.vf_coef * 2 * vdiff / n
    d_pred = w.aux_coef * 2 * pdiff / pdiff.size
    grads = net.backward(d_mean, d_value, d_pred, d_log_std)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient for {k}")
    return report, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def ppo_update(
    net: PolicyNet,
    batch: Batch,
    optimizer: Adam,
    weights: LossWeights,
    *,
    epochs: int = 10,
    minibatch_size: int = 64,
    max_grad_norm: Optional[float] = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, float]:
    """Run ``epochs`` passes of minibatch Adam steps; returns mean loss components."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(batch)
    sums: dict[str, float] = {}
    count = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch_size):
            mb = batch.take(order[start : start + minibatch_size])
            report, grads = composite_loss(net, mb, weights)
            clip_grad_norm(grads, max_grad_norm)
            optimizer.step(net.params, grads)
            for k, v in report.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / max(count, 1) for k, v in sums.items()}


def gradient_check(
    net: PolicyNet,
    loss_fn: Callable[[PolicyNet], tuple[float, dict[str, np.ndarray]]],
    *,
    n_samples: int = 200,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least one entry from every parameter tensor and ``n_samples``
    entries overall.
    """
    _, grads = loss_fn(net)
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    names = sorted(net.params)
    sizes = np.array([net.params[k].size for k in names])
    picks = [(k, int(rng.integers(net.params[k].size))) for k in names]
    flat_owner = rng.choice(len(names), size=max(n_samples - len(picks), 0), p=sizes / sizes.sum())
    picks += [(names[i], int(rng.integers(sizes[i]))) for i in flat_owner]
    worst = 0.0
    for name, idx in picks:
        p = net.params[name].reshape(-1)
        orig = p[idx]
        p[idx] = orig + h
        f_plus, _ = loss_fn(net)
        p[idx] = orig - h
        f_minus, _ = loss_fn(net)
        p[idx] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        denom = max(abs(analytic) + abs(numeric), 1e-7)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
