"""Estimator-style facade: ``fit`` trains the agent, ``predict`` returns QP maps."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .benchmark import PRIMARY_METRIC, TASK_TARGETS, make_env_factory
from .codec import MB, Frame
from .env import TASKS, EnvConfig
from .evaluation import StreamEncode, compare_arms, encode_stream, net_policy
from .presets import TASK_LAMBDA
from .rl.train import TrainConfig, train
from .synth import Stream


def check_stream(stream, task: Optional[str] = None) -> Stream:
    """Validate one stream (or a (T, H, W) uint8 array, wrapped into a stream)."""
    if isinstance(stream, np.ndarray):
        arr = stream
        if arr.ndim != 3:
            raise ValueError(f"expected a (T, H, W) array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ValueError("frame samples must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        stream = Stream([Frame(f, i) for i, f in enumerate(arr)])
    if not isinstance(stream, Stream):
        raise TypeError(f"expected a Stream or (T, H, W) array, got {type(stream).__name__}")
    if len(stream) < 1:
        raise ValueError("stream has no frames")
    h, w = stream.shape
    if h % MB or w % MB:
        raise ValueError(f"frame dimensions {w}x{h} are not multiples of {MB}")
    if task == "roi" and stream.saliency is None:
        raise ValueError(f"stream {stream.name!r} has no saliency maps, required by the roi task")
    if stream.saliency is not None and np.shape(stream.saliency) != (len(stream), h, w):
        raise ValueError(f"saliency shape {np.shape(stream.saliency)} does not match the stream {(len(stream), h, w)}")
    return stream


def check_streams(streams, task: Optional[str] = None) -> list[Stream]:
    if isinstance(streams, (Stream, np.ndarray)):
        streams = [streams]
    out = [check_stream(s, task) for s in streams]
    if not out:
        raise ValueError("no streams given")
    shapes = {s.shape for s in out}
    if len(shapes) != 1:
        raise ValueError(f"streams have differing frame sizes {sorted(shapes)}")
    return out


class RateControlAgent(BaseEstimator):
    """Task-aware delta-QP agent trained with PPO.

    Parameters mirror the run configuration; anything not listed keeps the
    EnvConfig / TrainConfig default. ``lam=None`` and ``targets=None`` pick
    the tuned task weight and the task's benchmark bit-rates.
    """

    def __init__(
        self,
        task: str = "roi",
        lam: Optional[float] = None,
        delta_max: int = 8,
        coarsen: int = 2,
        gop: int = 30,
        fps: float = 30.0,
        gamma: float = 0.99,
        aux_coef: float = 0.1,
        total_frames: int = 100_000,
        n_envs: int = 8,
        horizon: int = 256,
        targets: Optional[Sequence[float]] = None,
        seed: int = 0,
    ):
        self.task = task
        self.lam = lam
        self.delta_max = delta_max
        self.coarsen = coarsen
        self.gop = gop
        self.fps = fps
        self.gamma = gamma
        self.aux_coef = aux_coef
        self.total_frames = total_frames
        self.n_envs = n_envs
        self.horizon = horizon
        self.targets = targets
        self.seed = seed

    def _targets(self) -> tuple:
        return tuple(TASK_TARGETS[self.task] if self.targets is None else self.targets)

    def env_config(self, target_bitrate: Optional[float] = None) -> EnvConfig:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        return EnvConfig(
            target_bitrate=float(target_bitrate or self._targets()[0]),
            fps=self.fps,
            lam=TASK_LAMBDA[self.task] if self.lam is None else self.lam,
            delta_max=self.delta_max,
            coarsen=self.coarsen,
            gop=self.gop,
            task=self.task,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            gamma=self.gamma,
            aux_coef=self.aux_coef,
            total_frames=self.total_frames,
            n_envs=self.n_envs,
            horizon=self.horizon,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        """Train on a list of streams; ``y`` is ignored (rewards are self-supervised)."""
        streams = check_streams(X, self.task)
        if len(self._targets()) < 1 or min(self._targets()) <= 0:
            raise ValueError("targets must be positive bit-rates")
        factory = make_env_factory(streams, self.env_config(), self._targets(), self.seed)
        self.net_, self.training_log_ = train(factory, self.train_config())
        self.mb_shape_ = self.net_.spec.mb_shape
        return self

    def encode(self, stream, target_bitrate: float) -> StreamEncode:
        check_is_fitted(self, "net_")
        stream = check_stream(stream, self.task)
        if stream.shape != tuple(s * MB for s in self.mb_shape_):
            raise ValueError(f"agent was fitted on {self.mb_shape_} macroblocks, stream has {stream.shape}")
        return encode_stream(stream, self.env_config(target_bitrate), net_policy(self.net_), keep_qp_maps=True)

    def predict(self, X, target_bitrate: Optional[float] = None) -> list[np.ndarray]:
        """Per-frame QP maps, one (T, mbh, mbw) array per stream."""
        return [np.stack(self.encode(s, target_bitrate or self._targets()[0]).qp_maps) for s in check_streams(X, self.task)]

    def score(self, X, y=None) -> float:
        """Negated mean BD-rate (primary task metric) against the zero-action baseline."""
        check_is_fitted(self, "net_")
        streams = check_streams(X, self.task)
        metric = PRIMARY_METRIC[self.task]
        _, reports = compare_arms(streams, self._targets(), self.env_config(), {"agent": self.net_}, (metric,))
        return -reports["agent"].summary(metric)[0]
