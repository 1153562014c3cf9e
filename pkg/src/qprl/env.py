"""Frame-level MDP around the toy codec.

One step encodes one frame: the agent's coarse delta-QP grid is upsampled to
the macroblock grid and added to the baseline controller's frame QP.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import codec
from .codec import QP_MAX, QP_MIN, EncodeProgress, EncoderStats, Frame
from .synth import Stream
from .tasks import Detection, detect, task_reward

TASKS = ("roi", "detect")


class EnvError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    target_bitrate: float = 200_000.0
    fps: float = 30.0
    lam: float = 20.0
    delta_max: int = 8
    coarsen: int = 2
    gop: int = 30
    task: str = "roi"
    seed: int = 0
    start_qp: int = 30
    kp: float = 4.0
    ki: float = 0.4
    rc_window: int = 30
    lookahead: int = 10
    beta: float = 0.5
    search_radius: int = codec.DEFAULT_SEARCH_RADIUS
    det_threshold: float = 0.7

    def __post_init__(self):
        if not self.target_bitrate > 0:
            raise ValueError("target_bitrate must be positive")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 1 <= self.delta_max <= 25:
            raise ValueError("delta_max must lie in [1, 25]")
        if self.coarsen < 1:
            raise ValueError("coarsen must be >= 1")
        if self.gop < 1:
            raise ValueError("gop must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not QP_MIN <= self.start_qp <= QP_MAX:
            raise ValueError("start_qp outside the QP range")

    def replace(self, **changes) -> "EnvConfig":
        return EnvConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = set(cls.field_names())
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class StepResult:
    next_state: EncoderStats
    reward: float
    block_rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


# -- action handling -------------------------------------------------------------


def bilinear_upsample(coarse: np.ndarray, out_shape) -> np.ndarray:
    """Cell-centre aligned bilinear interpolation with edge clamping (no rounding)."""
    g = np.asarray(coarse, dtype=np.float64)
    if g.ndim != 2:
        raise EnvError(f"action grid must be 2-D, got shape {g.shape}")
    (hi, wi), (ho, wo) = g.shape, tuple(out_shape)
    if hi > ho or wi > wo or ho % hi or wo % wi:
        raise EnvError(f"action grid {g.shape} is incompatible with macroblock grid {tuple(out_shape)}")

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi_ = np.minimum(lo + 1, n_in - 1)
        return lo, hi_, pos - lo

    y0, y1, fy = axis(hi, ho)
    x0, x1, fx = axis(wi, wo)
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def upsample_action(coarse, mb_shape, delta_max: int = 8) -> np.ndarray:
    """Coarse action grid -> integer delta-QP map on the macroblock grid."""
    g = np.asarray(coarse, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise EnvError("action contains non-finite values")
    g = np.clip(g, -delta_max, delta_max)
    full = bilinear_upsample(g, mb_shape)
    return np.clip(np.rint(full), -delta_max, delta_max).astype(np.int64)


def action_shape(mb_shape, coarsen: int) -> tuple[int, int]:
    h, w = mb_shape
    if h % coarsen or w % coarsen:
        raise EnvError(f"coarsening factor {coarsen} does not divide macroblock grid {mb_shape}")
    return h // coarsen, w // coarsen


# -- rewards ---------------------------------------------------------------------


def bitrate_reward(current_avg: float, target: float) -> float:
    if current_avg <= 0 or target <= 0:
        raise EnvError("bit-rates must be positive")
    return -abs(math.log(current_avg / target))


def combine_reward(r_bitrate: float, r_task: float, lam: float) -> float:
    if lam < 0:
        raise EnvError("lambda must be non-negative")
    return r_bitrate + lam * r_task


# -- baseline controller ----------------------------------------------------------


class RateController:
    """Proportional-integral frame-QP controller tracking a target bit-rate."""

    def __init__(self, target_bitrate: float, fps: float, start_qp: int = 30, kp: float = 4.0, ki: float = 0.4, window: int = 30):
        self.target_bitrate = target_bitrate
        self.fps = fps
        self.kp, self.ki = kp, ki
        self.start_qp = int(start_qp)
        self.qp = int(start_qp)
        self.integral = 0.0
        self.recent: deque[int] = deque(maxlen=window)

    def error(self) -> float:
        if not self.recent:
            return 0.0
        rate = sum(self.recent) * self.fps / len(self.recent)
        return math.log(rate / self.target_bitrate)

    def update(self, frame_bits: int) -> int:
        self.recent.append(int(frame_bits))
        e = self.error()
        self.integral += e
        self.qp = int(np.clip(self.start_qp + round(self.kp * e + self.ki * self.integral), QP_MIN, QP_MAX))
        return self.qp


def baseline_frame_qp(controller: RateController, frame_bits: int) -> int:
    return controller.update(frame_bits)


# -- environment -----------------------------------------------------------------


class RateControlEnv:
    """Single-stream episode; each step encodes one frame."""

    def __init__(self, stream: Stream, config: EnvConfig, cache: Optional[dict] = None):
        if len(stream) < 2:
            raise EnvError("stream needs at least 2 frames")
        if config.task == "roi" and stream.saliency is None:
            raise EnvError("roi task needs a stream with saliency maps")
        if config.task == "detect" and not stream.templates:
            raise EnvError("detect task needs a stream with a template bank")
        self.stream = stream
        self.config = config
        self.mb_shape = stream.frames[0].mb_shape
        self.action_shape = action_shape(self.mb_shape, config.coarsen)
        # raw-frame features depend only on the stream, so envs may share them
        cache = {} if cache is None else cache
        self._planes = cache.setdefault(("planes", config.lookahead, config.beta), {})
        self._raw_dets = cache.setdefault(("dets", config.det_threshold), {})
        self._t: Optional[int] = None
        self.done = True

    def __len__(self) -> int:
        return len(self.stream)

    def frame_type(self, t: int) -> str:
        return "I" if t % self.config.gop == 0 else "P"

    def _raw_planes(self, t: int):
        if t not in self._planes:
            frames = self.stream.frames
            la = frames[t + 1 : t + 1 + self.config.lookahead]
            self._planes[t] = (
                codec.raw_block_features(frames[t], la, self.config.beta),
                codec.frame_complexity(frames[t], la),
            )
        return self._planes[t]

    def raw_detections(self, t: int) -> list[Detection]:
        if t not in self._raw_dets:
            self._raw_dets[t] = detect(self.stream.frames[t], self.stream.templates, self.config.det_threshold)
        return self._raw_dets[t]

    def _state(self, t: int) -> EncoderStats:
        planes, complexity = self._raw_planes(t)
        return codec.assemble_stats(
            planes,
            baseline_qp=self.controller.qp,
            frame_index=t,
            frame_type=self.frame_type(t),
            complexity=complexity,
            progress=self.progress,
        )

    def reset(self) -> EncoderStats:
        cfg = self.config
        self.controller = RateController(cfg.target_bitrate, cfg.fps, cfg.start_qp, cfg.kp, cfg.ki, cfg.rc_window)
        self.progress = EncodeProgress(stream_length=len(self.stream))
        self.reference: Optional[Frame] = None
        self.cumulative_bits = 0
        self._t = 0
        self.done = False
        self.state = self._state(0)
        return self.state

    def qp_map_for(self, action) -> np.ndarray:
        delta = upsample_action(action, self.mb_shape, self.config.delta_max)
        return np.clip(self.controller.qp + delta, QP_MIN, QP_MAX)

    def step(self, action) -> StepResult:
        if self._t is None:
            raise EnvError("step() called before reset()")
        if self.done:
            raise EnvError("step() called after the episode finished")
        cfg, t = self.config, self._t
        a = np.asarray(action, dtype=np.float64)
        if a.shape != self.action_shape:
            raise EnvError(f"action shape {a.shape} != expected {self.action_shape}")
        frame = self.stream.frames[t]
        frame_qp = self.controller.qp
        qp_map = self.qp_map_for(a)
        ref = None if self.frame_type(t) == "I" else self.reference
        enc = codec.encode_frame(frame, ref, qp_map, search_radius=cfg.search_radius)
        self.reference = enc.reconstruction

        if cfg.task == "roi":
            tr = task_reward("roi", frame, enc.reconstruction, saliency=self.stream.saliency[t])
        else:
            tr = task_reward(
                "detect",
                frame,
                enc.reconstruction,
                templates=self.stream.templates,
                threshold=cfg.det_threshold,
                raw_detections=self.raw_detections(t),
            )

        self.cumulative_bits += enc.total_bits
        codec.update_progress(self.progress, frame, enc, frame_qp, cfg.fps, cfg.target_bitrate)
        avg_rate = self.cumulative_bits * cfg.fps / (t + 1)
        r_bit = bitrate_reward(avg_rate, cfg.target_bitrate)
        reward = combine_reward(r_bit, tr.global_score, cfg.lam)
        baseline_frame_qp(self.controller, enc.total_bits)

        self.done = t == len(self.stream) - 1
        self._t = t if self.done else t + 1
        self.state = self._state(self._t)
        info = {
            "frame_index": t,
            "frame_bits": enc.total_bits,
            "cumulative_bits": self.cumulative_bits,
            "frame_qp": frame_qp,
            "task_score": tr.global_score,
            "bitrate_error": self.progress.bitrate_error,
            "r_bitrate": r_bit,
            "qp_map": qp_map,
            "encoded": enc,
            "task": tr.details,
        }
        return StepResult(self.state, reward, tr.block_rewards, self.done, info)
