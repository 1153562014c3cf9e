"""RD curves, Bjøntegaard delta rate, QP-map analysis and ablation runs."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .codec import MB, QP_MAX, block_sum
from .env import EnvConfig, RateControlEnv
from .metrics import psnr
from .synth import Stream
from .tasks import saliency_weighted_psnr

log = logging.getLogger(__name__)

METRICS = ("psnr", "sal_psnr", "precision", "recall")


@dataclass(frozen=True)
class RdPoint:
    rate: float
    quality: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")


@dataclass
class RdCurve:
    metric: str
    points: list[RdPoint]
    stream: str = ""
    arm: str = ""
    partial: bool = False
    targets: list[float] = field(default_factory=list)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


@dataclass
class BdResult:
    bd_rate_percent: float
    valid: bool
    overlap: tuple[float, float]
    warning: str = ""


# -- monotone cubic Hermite ------------------------------------------------------


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Butland node derivatives with shape-preserving end conditions."""
    h = np.diff(x)
    m = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    if n == 2:
        d[:] = m[0]
        return d
    for k in range(1, n - 1):
        if m[k - 1] * m[k] > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k])

    def edge(h0, h1, m0, m1):
        e = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
        if np.sign(e) != np.sign(m0):
            return 0.0
        if np.sign(m0) != np.sign(m1) and abs(e) > 3 * abs(m0):
            return 3 * m0
        return e

    d[0] = edge(h[0], h[1], m[0], m[1])
    d[-1] = edge(h[-1], h[-2], m[-1], m[-2])
    return d


def hermite_eval(x: np.ndarray, y: np.ndarray, d: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    k = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    s = (t - x[k]) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s**2 * (3 - 2 * s)
    h11 = s**2 * (s - 1)
    return h00 * y[k] + h10 * h * d[k] + h01 * y[k + 1] + h11 * h * d[k + 1]


_GL_NODES = np.array([-1.0, 1.0]) / math.sqrt(3.0)


def hermite_integral(x, y, d, lo: float, hi: float) -> float:
    """Exact integral of the piecewise cubic over [lo, hi] (2-point Gauss per piece)."""
    edges = np.unique(np.concatenate([[lo, hi], x[(x > lo) & (x < hi)]]))
    a, b = edges[:-1], edges[1:]
    mid, half = (a + b) / 2, (b - a) / 2
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    return float(np.sum(half[:, None] * hermite_eval(x, y, d, nodes)))


def _prepare(curve: RdCurve) -> tuple[np.ndarray, np.ndarray, str]:
    q = curve.qualities.astype(np.float64)
    lr = np.log10(curve.rates.astype(np.float64))
    warning = ""
    order = np.argsort(lr, kind="stable")
    if np.any(np.diff(q[order]) <= 0):
        warning = f"{curve.arm or 'curve'}: quality not strictly increasing in rate; points sorted and duplicates averaged"
    uq, inv = np.unique(q, return_inverse=True)
    ulr = np.bincount(inv, weights=lr) / np.bincount(inv)
    return uq, ulr, warning


def bd_rate(reference: RdCurve, test: RdCurve) -> BdResult:
    """Average bit-rate difference (%) of ``test`` vs ``reference`` at equal quality."""
    if reference.metric != test.metric:
        raise ValueError(f"metric mismatch: {reference.metric} vs {test.metric}")
    for c in (reference, test):
        if len(c.points) < 4:
            raise ValueError(f"BD-rate needs at least 4 points, {c.arm or 'curve'} has {len(c.points)}")
    qr, lr_ref, w1 = _prepare(reference)
    qt, lr_test, w2 = _prepare(test)
    warning = "; ".join(w for w in (w1, w2) if w)
    lo, hi = max(qr[0], qt[0]), min(qr[-1], qt[-1])
    if len(qr) < 2 or len(qt) < 2 or not hi > lo:
        return BdResult(float("nan"), False, (float(lo), float(hi)), warning or "no quality overlap")
    i_ref = hermite_integral(qr, lr_ref, pchip_slopes(qr, lr_ref), lo, hi)
    i_test = hermite_integral(qt, lr_test, pchip_slopes(qt, lr_test), lo, hi)
    diff = (i_test - i_ref) / (hi - lo)
    return BdResult(100.0 * (10.0**diff - 1.0), True, (float(lo), float(hi)), warning)


# -- QP-map analysis -------------------------------------------------------------


def qp_map_kl(qp_map, importance, eps: float = 1e-6) -> float:
    """KL(importance || bit mass), bit mass taken as (qp_max - qp)."""
    q = np.asarray(qp_map, dtype=np.float64)
    imp = np.asarray(importance, dtype=np.float64)
    if q.shape != imp.shape:
        raise ValueError(f"shape mismatch: QP map {q.shape} vs importance {imp.shape}")
    if np.any(imp < 0) or not np.any(imp > 0):
        raise ValueError("importance must be non-negative and not all zero")
    p = imp + eps
    p /= p.sum()
    mass = QP_MAX - q + eps
    mass /= mass.sum()
    return float(np.sum(p * np.log(p / mass)))


def block_importance(saliency: np.ndarray) -> np.ndarray:
    """Downsample a pixel saliency map to macroblock totals."""
    return block_sum(np.asarray(saliency, dtype=np.float64), MB)


# -- stream encodes and curves ---------------------------------------------------


Policy = Callable  # state -> coarse action grid


def zero_policy(env: RateControlEnv) -> Policy:
    z = np.zeros(env.action_shape)
    return lambda state: z


@dataclass
class StreamEncode:
    target: float
    rate: float
    metrics: dict[str, float]
    qp_maps: list[np.ndarray]
    bitrate_error: float


def encode_stream(stream: Stream, env_config: EnvConfig, policy_factory: Optional[Callable] = None, keep_qp_maps: bool = False) -> StreamEncode:
    """Encode a full stream with one policy; returns measured rate and averaged metrics."""
    env = RateControlEnv(stream, env_config)
    policy = (policy_factory or zero_policy)(env)
    state = env.reset()
    psnrs, sal, qp_maps = [], [], []
    tp = n_pred = n_gt = 0
    while True:
        res = env.step(policy(state))
        t = res.info["frame_index"]
        recon = res.info["encoded"].reconstruction
        raw = stream.frames[t]
        psnrs.append(psnr(raw, recon))
        if stream.saliency is not None:
            sal.append(saliency_weighted_psnr(raw, recon, stream.saliency[t]))
        if env_config.task == "detect":
            d = res.info["task"]
            tp += d["tp"]
            n_pred += d["n_pred"]
            n_gt += d["n_gt"]
        if keep_qp_maps:
            qp_maps.append(res.info["qp_map"])
        state = res.next_state
        if res.done:
            break
    rate = env.cumulative_bits * env_config.fps / len(stream)
    metrics = {"psnr": float(np.mean(psnrs))}
    if sal:
        metrics["sal_psnr"] = float(np.mean(sal))
    if env_config.task == "detect":
        metrics["precision"] = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
        metrics["recall"] = tp / n_gt if n_gt else 1.0
    return StreamEncode(env_config.target_bitrate, rate, metrics, qp_maps, math.log(rate / env_config.target_bitrate))


def net_policy(net) -> Callable:
    """Policy factory acting with the network's mean action."""

    def factory(env):
        return net.act

    return factory


def rd_curves(
    stream: Stream,
    bitrates: Sequence[float],
    env_config: EnvConfig,
    net=None,
    arm: Optional[str] = None,
    metrics: Optional[Sequence[str]] = None,
) -> dict[str, RdCurve]:
    """One encode per target bit-rate; returns a curve for every available metric."""
    if len(bitrates) < 4:
        raise ValueError("an RD curve needs at least 4 target bit-rates")
    arm = arm or ("baseline" if net is None else "agent")
    factory = None if net is None else net_policy(net)
    curves: dict[str, RdCurve] = {}
    partial = False
    runs = []
    for target in sorted(bitrates):
        try:
            runs.append(encode_stream(stream, env_config.replace(target_bitrate=float(target)), factory))
        except Exception as exc:  # noqa: BLE001 - a failed point marks the curve partial
            log.warning("encode failed for %s at %s: %s", stream.name, target, exc)
            partial = True
    names = metrics or [m for m in METRICS if runs and m in runs[0].metrics]
    for m in names:
        # points stay in target order so they line up with ``targets``
        pts = [RdPoint(r.rate, r.metrics[m]) for r in runs]
        curves[m] = RdCurve(m, pts, stream.name, arm, partial, [r.target for r in runs])
    return curves


def rd_curve(stream: Stream, bitrates: Sequence[float], metric: str, env_config: EnvConfig, net=None, arm: Optional[str] = None) -> RdCurve:
    return rd_curves(stream, bitrates, env_config, net, arm, [metric])[metric]


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class ArmReport:
    arm: str
    bd: dict[str, list[float]]
    curves: dict[str, dict[str, RdCurve]]
    bitrate_error: list[float] = field(default_factory=list)

    def summary(self, metric: str) -> tuple[float, float]:
        return mean_se(self.bd[metric])


def worker_count() -> int:
    """Worker cap from QPRL_THREADS (default 1)."""
    raw = os.environ.get("QPRL_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"QPRL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"QPRL_THREADS must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map over at most ``worker_count()`` threads."""
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def compare_arms(
    streams: Sequence[Stream],
    bitrates: Sequence[float],
    env_config: EnvConfig,
    nets: dict[str, object],
    metrics: Sequence[str],
) -> tuple[dict[str, dict[str, RdCurve]], dict[str, ArmReport]]:
    """Baseline curves plus per-arm curves and BD-rates against the baseline."""
    jobs = [("baseline", None, s) for s in streams] + [(arm, net, s) for arm, net in nets.items() for s in streams]
    results = parallel_map(lambda j: rd_curves(j[2], bitrates, env_config, j[1], j[0], metrics), jobs)
    curves_by = {(arm, s.name): c for (arm, _, s), c in zip(jobs, results)}
    baseline = {s.name: curves_by[("baseline", s.name)] for s in streams}
    reports = {}
    for arm in nets:
        curves, bd, err = {}, {m: [] for m in metrics}, []
        for s in streams:
            c = curves_by[(arm, s.name)]
            curves[s.name] = c
            for m in metrics:
                bd[m].append(bd_rate(baseline[s.name][m], c[m]).bd_rate_percent)
            err.extend(abs(math.log(p.rate / t)) for p, t in zip(c[metrics[0]].points, c[metrics[0]].targets))
        reports[arm] = ArmReport(arm, bd, curves, err)
    return baseline, reports


ABLATION_ARMS = {
    "full": {},
    "no_reward_info": {"aux_coef": 0.0},
    "gamma_zero": {"gamma": 0.0},
}


def ablation_configs(train_cfg, suite: Sequence[str] = tuple(ABLATION_ARMS)) -> dict:
    """Per-arm training configs; arms differ only in their documented fields."""
    from dataclasses import replace

    unknown = set(suite) - set(ABLATION_ARMS)
    if unknown:
        raise ValueError(f"unknown ablation arms: {sorted(unknown)}")
    return {arm: replace(train_cfg, **ABLATION_ARMS[arm]) for arm in suite}
