"""Policy network with hand-written backpropagation (float64 numpy).

Three same-padded tanh conv layers over the per-MB planes, flattened and
concatenated with the scaled global statistics, a tanh fully connected layer
to a 64-d latent, then three linear heads: actor mean (coarse action grid),
critic value, and per-MB reward prediction. The diagonal Gaussian policy has
a state-independent log-std vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..codec import GLOBAL_FIELDS, EncoderStats

N_PLANES = 4
N_GLOBAL = len(GLOBAL_FIELDS)

# fixed scaling of the global statistics before they enter the network
_G_SCALE = np.array([1 / 51, 1 / 1000, 0, 1 / 51, 1 / 51, 1, 1, 1, 1 / 50, 1, 1, 1, 1, 1, 1, 1 / 32])


def global_features(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    out = g * _G_SCALE
    out[..., 2] = np.log1p(np.maximum(g[..., 2], 0)) / 20.0
    out[..., 13] = np.clip(g[..., 13], -2, 2)
    return out


def observation(states: Sequence[EncoderStats] | EncoderStats) -> tuple[np.ndarray, np.ndarray]:
    """Stack states into (planes (N,4,H,W), globals (N,16)) network inputs."""
    if isinstance(states, EncoderStats):
        states = [states]
    planes = np.stack([s.per_block for s in states]).astype(np.float64)
    glob = global_features(np.stack([s.global_stats for s in states]))
    return planes, glob


@dataclass(frozen=True)
class NetSpec:
    mb_shape: tuple[int, int] = (8, 8)
    action_shape: tuple[int, int] = (4, 4)
    channels: tuple[int, int, int] = (8, 8, 8)
    kernel: int = 3
    latent: int = 64
    init_log_std: float = 0.5

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        object.__setattr__(self, "mb_shape", tuple(int(v) for v in self.mb_shape))
        object.__setattr__(self, "action_shape", tuple(int(v) for v in self.action_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))

    @property
    def n_actions(self) -> int:
        return self.action_shape[0] * self.action_shape[1]

    @property
    def n_blocks(self) -> int:
        return self.mb_shape[0] * self.mb_shape[1]

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n c h w k k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, c, h, wd = x_shape
    k = w.shape[-1]
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(n * h * wd, -1)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d @ w.reshape(w.shape[0], -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + wd], dw, db


class PolicyNet:
    """Actor / critic / block-reward network over encoder statistics."""

    CONV = ("conv1", "conv2", "conv3")

    def __init__(self, spec: NetSpec, seed: Optional[int] = 0, zero_heads: bool = False):
        self.spec = spec
        rng = np.random.default_rng(seed)
        h, w = spec.mb_shape
        params: dict[str, np.ndarray] = {}
        c_in = N_PLANES
        for name, c_out in zip(self.CONV, spec.channels):
            fan_in = c_in * spec.kernel**2
            params[f"{name}.w"] = rng.normal(0, 1 / np.sqrt(fan_in), (c_out, c_in, spec.kernel, spec.kernel))
            params[f"{name}.b"] = np.zeros(c_out)
            c_in = c_out
        n_in = c_in * h * w + N_GLOBAL
        params["fc.w"] = rng.normal(0, 1 / np.sqrt(n_in), (n_in, spec.latent))
        params["fc.b"] = np.zeros(spec.latent)
        heads = {"actor": (spec.n_actions, 0.01), "critic": (1, 1.0), "reward": (spec.n_blocks, 0.1)}
        for name, (n_out, gain) in heads.items():
            scale = 0.0 if zero_heads else gain / np.sqrt(spec.latent)
            params[f"{name}.w"] = rng.normal(0, 1, (spec.latent, n_out)) * scale
            params[f"{name}.b"] = np.zeros(n_out)
        params["log_std"] = np.full(spec.n_actions, float(spec.init_log_std))
        self.params = params

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "PolicyNet":
        other = PolicyNet.__new__(PolicyNet)
        other.spec = self.spec
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _check(self, planes, glob):
        exp = (N_PLANES, *self.spec.mb_shape)
        if planes.ndim != 4 or planes.shape[1:] != exp:
            raise ValueError(f"per-block planes shape {planes.shape[1:]} != expected {exp}")
        if glob.shape != (planes.shape[0], N_GLOBAL):
            raise ValueError(f"global stats shape {glob.shape} != expected {(planes.shape[0], N_GLOBAL)}")

    def forward(self, planes: np.ndarray, glob: np.ndarray, cache: bool = False):
        """Batched forward; returns (mean (N,A), std (A,), value (N,), reward pred (N,B))."""
        self._check(planes, glob)
        p = self.params
        acts, cols = [planes], []
        x = planes
        for name in self.CONV:
            pre, c = _conv_forward(x, p[f"{name}.w"], p[f"{name}.b"])
            x = np.tanh(pre)
            acts.append(x)
            cols.append(c)
        z = np.concatenate([x.reshape(x.shape[0], -1), glob], axis=1)
        lat = np.tanh(z @ p["fc.w"] + p["fc.b"])
        mean = lat @ p["actor.w"] + p["actor.b"]
        value = (lat @ p["critic.w"] + p["critic.b"])[:, 0]
        pred = lat @ p["reward.w"] + p["reward.b"]
        std = np.exp(p["log_std"])
        if cache:
            self._cache = (acts, cols, z, lat)
        return mean, std, value, pred

    def latent(self, planes, glob) -> np.ndarray:
        self.forward(planes, glob, cache=True)
        return self._cache[3]

    def backward(self, d_mean, d_value, d_pred, d_log_std) -> dict[str, np.ndarray]:
        """Parameter gradients given output gradients of the cached forward pass."""
        acts, cols, z, lat = self._cache
        p = self.params
        g: dict[str, np.ndarray] = {}
        d_value = d_value[:, None]
        g["actor.w"], g["actor.b"] = lat.T @ d_mean, d_mean.sum(0)
        g["critic.w"], g["critic.b"] = lat.T @ d_value, d_value.sum(0)
        g["reward.w"], g["reward.b"] = lat.T @ d_pred, d_pred.sum(0)
        g["log_std"] = np.asarray(d_log_std, dtype=np.float64)
        d_lat = d_mean @ p["actor.w"].T + d_value @ p["critic.w"].T + d_pred @ p["reward.w"].T
        d_pre = d_lat * (1 - lat**2)
        g["fc.w"], g["fc.b"] = z.T @ d_pre, d_pre.sum(0)
        d_z = d_pre @ p["fc.w"].T
        top = acts[-1]
        d_x = d_z[:, : top[0].size].reshape(top.shape)
        for i in reversed(range(len(self.CONV))):
            name = self.CONV[i]
            d_pre = d_x * (1 - acts[i + 1] ** 2)
            d_x, g[f"{name}.w"], g[f"{name}.b"] = _conv_backward(d_pre, cols[i], acts[i].shape, p[f"{name}.w"], need_dx=i > 0)
        return g

    def act(self, state: EncoderStats) -> np.ndarray:
        """Deterministic action (policy mean) reshaped to the coarse grid."""
        mean, _, _, _ = self.forward(*observation(state))
        return mean[0].reshape(self.spec.action_shape)
