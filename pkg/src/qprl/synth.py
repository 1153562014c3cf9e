"""Synthetic benchmark scenes.

``roi_world`` renders a smooth panning background with a high-detail patch
moving along a bouncing trajectory; its saliency map is a Gaussian bump on
the patch. ``car_world`` renders vehicles stamped from a fixed template bank
moving at constant speed past a static occluder, plus decoys that share the
vehicles' coarse shape but not their fine texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .codec import MB, Frame

TEMPLATE_SHAPE = (16, 32)
BANK_SEED = 20240917


@dataclass
class Stream:
    frames: list[Frame]
    fps: float = 30.0
    saliency: Optional[np.ndarray] = None  # (T, H, W)
    templates: Optional[list[np.ndarray]] = None
    boxes: Optional[list[list[tuple[int, int, int, int]]]] = None
    name: str = "stream"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].samples.shape


def _check_dims(dims) -> tuple[int, int]:
    h, w = int(dims[0]), int(dims[1])
    if h <= 0 or w <= 0 or h % MB or w % MB:
        raise ValueError(f"dimensions {w}x{h} must be positive multiples of {MB}")
    return h, w


def _waves(rng, n, period_lo, period_hi, amp):
    freq = 2 * np.pi / rng.uniform(period_lo, period_hi, n)
    theta = rng.uniform(0, np.pi, n)
    return np.stack([freq * np.cos(theta), freq * np.sin(theta), rng.uniform(0, 2 * np.pi, n), amp * rng.dirichlet(np.ones(n))], 1)


def _render_waves(waves, yy, xx):
    out = np.zeros(np.broadcast(yy, xx).shape)
    for ky, kx, ph, a in waves:
        out += a * np.sin(ky * yy + kx * xx + ph)
    return out


def _bounce(p0, v, lo, hi, t):
    """Position of a point bouncing inside [lo, hi] at time t."""
    span = hi - lo
    q = np.mod(p0 - lo + v * t, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def roi_world(seed: int, n_frames: int, dims=(128, 128), *, patch: int = 32, noise: float = 2.0, fps: float = 30.0) -> Stream:
    h, w = _check_dims(dims)
    if not 0 < patch < min(h, w):
        raise ValueError(f"patch size {patch} must be smaller than the frame ({w}x{h})")
    rng = np.random.default_rng(seed)
    bg = _waves(rng, 6, 20.0, 70.0, 90.0)
    detail = _waves(rng, 10, 2.5, 7.0, 150.0)
    pan = rng.uniform(-0.6, 0.6, 2)
    half = patch / 2.0
    c0 = np.array([rng.uniform(half, h - half), rng.uniform(half, w - half)])
    vel = rng.uniform(0.6, 1.8, 2) * rng.choice([-1, 1], 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames, sal = [], []
    for t in range(n_frames):
        img = 110 + _render_waves(bg, yy + pan[0] * t, xx + pan[1] * t)
        cy = _bounce(c0[0], vel[0], half, h - half, t)
        cx = _bounce(c0[1], vel[1], half, w - half, t)
        # soft-edged square mask around the patch centre
        my = np.clip(half + 0.5 - np.abs(yy - cy), 0, 1)
        mx = np.clip(half + 0.5 - np.abs(xx - cx), 0, 1)
        mask = my * mx
        tex = 128 + _render_waves(detail, yy - cy, xx - cx)
        img = img * (1 - mask) + tex * mask
        img += rng.normal(0, noise, img.shape)
        frames.append(Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8), t))
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.5 * patch) ** 2))
        s = bump + 0.02
        sal.append(s * (h * w) / s.sum())
    return Stream(frames, fps, saliency=np.stack(sal), name=f"roi_world-{seed}", meta={"generator": "roi_world", "seed": seed})


def template_bank(n: int = 3, shape=TEMPLATE_SHAPE, seed: int = BANK_SEED) -> list[np.ndarray]:
    """Fixed vehicle template bank: dark body, bright windows, wheels, fine texture."""
    rng = np.random.default_rng(seed)
    th, tw = shape
    bank = []
    for _ in range(n):
        t = np.full(shape, rng.uniform(40, 80))
        t[2 : th // 2, tw // 5 : tw - tw // 5] = rng.uniform(170, 220)
        t[3 : th // 2 - 1, tw // 2 - 1 : tw // 2 + 1] = 60
        t[th - 4 :, 3:9] = 20
        t[th - 4 :, tw - 9 : tw - 3] = 20
        grain = ndimage.gaussian_filter(rng.normal(0, 1, shape), 2.0)
        t += 28 * grain / grain.std()
        bank.append(np.clip(t, 0, 255))
    return bank


def _stamp(img, patch, y, x):
    """Alpha-free paste of a sub-pixel shifted patch, clipped to the frame."""
    iy, ix = int(np.floor(y)), int(np.floor(x))
    shifted = ndimage.shift(np.pad(patch, 1, mode="edge"), (y - iy, x - ix), order=1, mode="nearest")[1:-1, 1:-1]
    ph, pw = patch.shape
    y0, x0 = max(iy, 0), max(ix, 0)
    y1, x1 = min(iy + ph, img.shape[0]), min(ix + pw, img.shape[1])
    if y1 <= y0 or x1 <= x0:
        return None
    img[y0:y1, x0:x1] = shifted[y0 - iy : y1 - iy, x0 - ix : x1 - ix]
    return (x0, y0, x1 - x0, y1 - y0)


def car_world(
    seed: int,
    n_frames: int,
    dims=(128, 128),
    *,
    n_cars: int = 3,
    n_decoys: int = 4,
    decoy_grain: float = 32.0,
    noise: float = 2.0,
    fps: float = 30.0,
) -> Stream:
    h, w = _check_dims(dims)
    th, tw = TEMPLATE_SHAPE
    bank = template_bank()
    rng = np.random.default_rng(seed)
    bg = _waves(rng, 5, 24.0, 80.0, 50.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 100 + 40 * yy / h + _render_waves(bg, yy, xx)
    lanes = np.linspace(4, h - th - 4, max(n_cars + n_decoys, 2))
    lane_order = rng.permutation(len(lanes))
    objs = []
    for k in range(n_cars + n_decoys):
        y = 4 * np.round(lanes[lane_order[k % len(lanes)]] / 4)
        x = rng.uniform(0, w - tw)
        vx = rng.uniform(0.5, 1.5) * rng.choice([-1, 1])
        kind = int(rng.integers(len(bank)))
        if k < n_cars:
            patch = bank[kind]
        else:
            coarse = ndimage.uniform_filter(bank[kind], 7, mode="nearest")
            patch = np.clip(coarse + rng.normal(0, decoy_grain, TEMPLATE_SHAPE), 0, 255)
        objs.append({"y": y, "x0": x, "vx": vx, "patch": patch, "car": k < n_cars})
    pole_x = int(rng.integers(8, w - 16))
    frames, boxes = [], []
    for t in range(n_frames):
        img = base.copy()
        fb = []
        for o in objs:
            span = w + tw
            x = np.mod(o["x0"] + o["vx"] * t + tw, span) - tw
            box = _stamp(img, o["patch"], o["y"], x)
            if o["car"] and box is not None and box[2] * box[3] >= 0.5 * th * tw:
                fb.append(box)
        img[:, pole_x : pole_x + 6] = 70
        fb = [b for b in fb if _visible(b, pole_x, 6) >= 0.5]
        img += rng.normal(0, noise, img.shape)
        frames.append(Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8), t))
        boxes.append(fb)
    spawn = [(o["x0"], o["y"]) for o in objs if o["car"]]
    return Stream(
        frames,
        fps,
        templates=bank,
        boxes=boxes,
        name=f"car_world-{seed}",
        meta={"generator": "car_world", "seed": seed, "spawn": spawn},
    )


def _visible(box, pole_x, pole_w) -> float:
    x, _, bw, _ = box
    overlap = max(0, min(x + bw, pole_x + pole_w) - max(x, pole_x))
    return 1.0 - overlap / bw


GENERATORS = {"roi_world": roi_world, "car_world": car_world}


def synth_scene(generator: str, seed: int, n_frames: int, dims=(128, 128), **kwargs) -> Stream:
    try:
        fn = GENERATORS[generator]
    except KeyError:
        raise ValueError(f"unknown generator {generator!r}; choose from {sorted(GENERATORS)}") from None
    return fn(seed, n_frames, dims, **kwargs)
