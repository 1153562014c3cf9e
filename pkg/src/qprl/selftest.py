"""Fast invariant checks behind ``qprl selftest``."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def check_transform() -> tuple[bool, str]:
    from .codec import dct8, idct8

    x = np.random.default_rng(0).uniform(-255, 255, (1000, 8, 8))
    err = float(np.max(np.abs(idct8(dct8(x)) - x)))
    return err < 1e-9, f"max round-trip error {err:.2e}"


def check_quantizer(n: int = 100_000) -> tuple[bool, str]:
    from .codec import quantize

    rng = np.random.default_rng(1)
    c = rng.uniform(-2000, 2000, n)
    step = 2.0 ** ((rng.integers(0, 52, n) - 4) / 6)
    lo, hi = quantize(c, step), quantize(c + rng.uniform(0, 50, n), step)
    coarse = quantize(c, step * 2.0 ** rng.integers(1, 4, n))
    bad = int(np.sum(hi < lo) + np.sum(np.abs(coarse) > np.abs(lo)))
    return bad == 0, f"{bad} monotonicity violations over {n} pairs"


def check_bits(n: int = 20) -> tuple[bool, str]:
    from .codec import Frame, encode_frame

    rng = np.random.default_rng(2)
    bad = 0
    for i in range(n):
        img = Frame(np.clip(rng.normal(128, rng.uniform(5, 60), (64, 64)), 0, 255).astype(np.uint8))
        qp = int(rng.integers(6, 52))
        hi = encode_frame(img, None, np.full((4, 4), qp)).total_bits
        lo = encode_frame(img, None, np.full((4, 4), qp - 6)).total_bits
        bad += lo < hi
    return bad == 0, f"{bad} violations of bits(QP-6) >= bits(QP) over {n} frames"


def _small_batch(net, rng, n=12):
    from .rl.net import N_GLOBAL, N_PLANES
    from .rl.ppo import Batch

    s = net.spec
    return Batch(
        planes=rng.uniform(0, 1, (n, N_PLANES, *s.mb_shape)),
        glob=rng.normal(0, 1, (n, N_GLOBAL)),
        actions=rng.normal(0, 1, (n, s.n_actions)),
        old_log_prob=rng.normal(-s.n_actions, 1, n),
        advantages=rng.normal(0, 1, n),
        returns=rng.normal(0, 1, n),
        block_targets=rng.normal(0, 1, (n, s.n_blocks)),
    )


def check_gradient() -> tuple[bool, str]:
    from .rl.net import NetSpec, PolicyNet
    from .rl.ppo import LossWeights, composite_loss, gradient_check

    net = PolicyNet(NetSpec(mb_shape=(4, 4), action_shape=(2, 2), channels=(3, 3, 3), latent=8), seed=3)
    for k in ("actor.w", "critic.w", "reward.w"):
        net.params[k] = np.random.default_rng(4).normal(0, 0.3, net.params[k].shape)
    batch = _small_batch(net, np.random.default_rng(5))
    w = LossWeights(clip=10.0, ent_coef=0.01)

    def loss(n):
        report, grads = composite_loss(n, batch, w)
        return report["total"], grads

    err = gradient_check(net, loss, n_samples=150)
    return err < 1e-4, f"max relative gradient error {err:.2e}"


def check_gae() -> tuple[bool, str]:
    from .rl.ppo import gae

    rng = np.random.default_rng(6)
    r, v = rng.normal(size=50), rng.normal(size=50)
    d = (rng.uniform(size=50) < 0.1).astype(float)
    a0, _ = gae(r, v, d, 0.0, 0.95)
    nv = np.append(v[1:], 0.3) * (1 - d)
    a1, _ = gae(r, v, d, 0.9, 0.0, last_value=0.3)
    ok = np.array_equal(a0, r - v) and np.array_equal(a1, r + 0.9 * nv - v)
    return bool(ok), "gamma=0 and lambda=0 reductions " + ("exact" if ok else "differ")


def check_bd_rate() -> tuple[bool, str]:
    from scipy.interpolate import PchipInterpolator

    from .evaluation import RdCurve, RdPoint, bd_rate

    q = [30.0, 33.0, 35.0, 36.0]
    ref = RdCurve("psnr", [RdPoint(r, x) for r, x in zip((100, 150, 200, 250), q)])
    test = RdCurve("psnr", [RdPoint(r, x) for r, x in zip((80, 120, 160, 200), q)])
    got = bd_rate(ref, test).bd_rate_percent
    grid = np.linspace(30, 36, 10_000)
    fr = PchipInterpolator(q, np.log10([100, 150, 200, 250]))(grid)
    ft = PchipInterpolator(q, np.log10([80, 120, 160, 200]))(grid)
    want = 100 * (10 ** (np.trapezoid(ft - fr, grid) / 6) - 1)
    same = bd_rate(ref, ref).bd_rate_percent
    ok = abs(got - want) < 0.1 and same == 0.0
    return ok, f"4-point case {got:.4f}% vs oracle {want:.4f}%, identical curves {same}"


def check_checkpoint() -> tuple[bool, str]:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .rl.net import NetSpec, PolicyNet
    from .rl.train import TrainConfig

    net = PolicyNet(NetSpec(), seed=7)
    with tempfile.TemporaryDirectory() as d:
        p = save_checkpoint(Path(d) / "a.ckpt", net, TrainConfig())
        back = load_checkpoint(p).net
    same = all(np.array_equal(net.params[k], back.params[k]) for k in net.params)
    return same, "save/load round trip " + ("bit-identical" if same else "differs")


def check_reproducible() -> tuple[bool, str]:
    from .benchmark import make_env_factory
    from .env import EnvConfig
    from .rl.train import TrainConfig, train
    from .synth import roi_world

    streams = [roi_world(s, 24, (64, 64)) for s in range(2)]
    cfg = TrainConfig(total_frames=2 * 2 * 16, n_envs=2, horizon=16, minibatch_size=16, epochs=2, channels=(4, 4, 4), latent=16)
    runs = []
    for _ in range(2):
        factory = make_env_factory(streams, EnvConfig(lookahead=3), (100_000, 200_000), 0)
        runs.append(train(factory, cfg))
    same_log = runs[0][1] == runs[1][1]
    same_net = all(np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in runs[0][0].params)
    return same_log and same_net, "two seeded runs " + ("bit-identical" if same_log and same_net else "differ")


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "transform round trip": check_transform,
    "quantizer monotonicity": check_quantizer,
    "bit monotonicity": check_bits,
    "gradient check": check_gradient,
    "GAE reductions": check_gae,
    "BD-rate oracle": check_bd_rate,
    "checkpoint round trip": check_checkpoint,
    "training reproducibility": check_reproducible,
}


def run_all(quick: bool = False) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if quick and name == "training reproducibility":
            continue
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t))
    return out

