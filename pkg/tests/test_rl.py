import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from qprl.benchmark import make_env_factory
from qprl.env import EnvConfig
from qprl.rl.net import N_GLOBAL, N_PLANES, NetSpec, PolicyNet
from qprl.rl.ppo import (
    Adam,
    Batch,
    LossWeights,
    NonFiniteLoss,
    composite_loss,
    entropy,
    gae,
    gradient_check,
    log_prob,
    normalize_advantages,
    ppo_update,
)
from qprl.rl.train import RunningMeanStd, TrainConfig, train
from qprl.synth import roi_world

SMALL = NetSpec(mb_shape=(4, 4), action_shape=(2, 2), channels=(3, 3, 3), latent=8)


def small_net(seed=3, live_heads=True):
    net = PolicyNet(SMALL, seed=seed)
    if live_heads:
        rng = np.random.default_rng(seed + 1)
        for k in ("actor.w", "critic.w", "reward.w"):
            net.params[k] = rng.normal(0, 0.3, net.params[k].shape)
    return net


def rand_batch(spec, seed=0, n=12):
    rng = np.random.default_rng(seed)
    return Batch(
        planes=rng.uniform(0, 1, (n, N_PLANES, *spec.mb_shape)),
        glob=rng.normal(0, 1, (n, N_GLOBAL)),
        actions=rng.normal(0, 1, (n, spec.n_actions)),
        old_log_prob=rng.normal(-spec.n_actions, 1, n),
        advantages=rng.normal(0, 1, n),
        returns=rng.normal(0, 1, n),
        block_targets=rng.normal(0, 1, (n, spec.n_blocks)),
    )


# -- network -----------------------------------------------------------------------


def test_forward_shapes_and_zero_heads():
    net = PolicyNet(NetSpec(), seed=0, zero_heads=True)
    b = rand_batch(net.spec, n=5)
    mean, std, value, pred = net.forward(b.planes, b.glob)
    assert mean.shape == (5, 16) and std.shape == (16,) and value.shape == (5,) and pred.shape == (5, 64)
    assert not np.any(mean) and not np.any(value)
    np.testing.assert_allclose(std, math.exp(net.spec.init_log_std))


def test_forward_deterministic_and_param_count():
    net = PolicyNet(NetSpec(), seed=1)
    b = rand_batch(net.spec, n=3)
    a, c = net.forward(b.planes, b.glob), net.forward(b.planes, b.glob)
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x, y)
    assert net.n_params() == PolicyNet(NetSpec(), seed=2).n_params()
    assert net.n_params() == sum(p.size for p in net.params.values())


def test_global_stat_reaches_latent():
    net = PolicyNet(NetSpec(), seed=4)
    b = rand_batch(net.spec, n=1)
    base = net.latent(b.planes, b.glob).copy()
    g = b.glob.copy()
    g[0, 5] += 1e-3
    assert np.max(np.abs(net.latent(b.planes, g) - base)) > 1e-7


def test_forward_shape_errors():
    net = PolicyNet(NetSpec(), seed=0)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 4, 4, 4)), np.zeros((1, N_GLOBAL)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 4, 8, 8)), np.zeros((1, 3)))


# -- policy distribution -----------------------------------------------------------


def test_log_prob_and_entropy_examples():
    d = 6
    assert log_prob(np.zeros(d), np.ones(d), np.zeros(d)) == pytest.approx(-d * 0.5 * math.log(2 * math.pi), abs=1e-14)
    s = np.full(d, 0.7)
    assert entropy(2 * s) - entropy(s) == pytest.approx(d * math.log(2), abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_log_prob_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    m, s = rng.normal(0, 3, 5), rng.uniform(0.05, 4, 5)
    a = rng.normal(m, 2 * s)
    assert log_prob(m, s, a) == pytest.approx(stats.norm.logpdf(a, m, s).sum(), abs=1e-10)
    assert entropy(s) == pytest.approx(stats.norm.entropy(0, s).sum(), abs=1e-10)


def test_density_integrates_to_one():
    for m, s in ((0.0, 1.0), (2.5, 0.3), (-1.0, 4.0)):
        val, _ = integrate.quad(lambda x: math.exp(log_prob([m], [s], [x])), m - 20 * s, m + 20 * s, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-6)


# -- GAE ---------------------------------------------------------------------------


def test_gae_gamma_zero_is_one_step():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=30), rng.normal(size=30)
    d = (rng.uniform(size=30) < 0.2).astype(float)
    for lam in (0.0, 0.5, 1.0):
        adv, ret = gae(r, v, d, 0.0, lam, last_value=5.0)
        np.testing.assert_array_equal(adv, r - v)
        np.testing.assert_array_equal(ret, adv + v)


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=30), rng.normal(size=30)
    d = np.zeros(30)
    d[10] = 1
    adv, _ = gae(r, v, d, 0.9, 0.0, last_value=0.7)
    nv = np.append(v[1:], 0.7) * (1 - d)
    np.testing.assert_array_equal(adv, r + 0.9 * nv - v)


def test_gae_geometric_series():
    adv, _ = gae(np.ones(200), np.zeros(200), np.zeros(200), 0.9, 1.0)
    want = sum(0.9**t for t in range(200))
    assert adv[0] == pytest.approx(want, abs=1e-12)
    assert adv[0] == pytest.approx(10.0, abs=1e-6)


def test_gae_done_masks_bootstrap():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 9.0, 9.0])
    adv, _ = gae(r, v, np.array([1.0, 0.0, 0.0]), 0.99, 0.95, last_value=100.0)
    assert adv[0] == r[0] - v[0]


def test_gae_batched_matches_per_env():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    d = (rng.uniform(size=(20, 3)) < 0.1).astype(float)
    last = rng.normal(size=3)
    adv, _ = gae(r, v, d, 0.95, 0.9, last)
    for j in range(3):
        np.testing.assert_allclose(adv[:, j], gae(r[:, j], v[:, j], d[:, j], 0.95, 0.9, last[j])[0], atol=1e-14)


# -- loss, gradients, update --------------------------------------------------------


def full_loss(batch, w):
    def fn(net):
        rep, g = composite_loss(net, batch, w)
        return rep["total"], g

    return fn


def test_gradient_check_full_loss():
    net = small_net()
    assert net.n_params() <= 10_000
    batch = rand_batch(SMALL, seed=5)
    err = gradient_check(net, full_loss(batch, LossWeights(clip=10.0, ent_coef=0.01)), n_samples=250)
    assert err < 1e-4


def test_gradient_check_with_active_clipping():
    net = small_net(seed=8)
    batch = rand_batch(SMALL, seed=9)
    # old log-probs close to the current ones so some ratios straddle the clip range
    mean, std, _, _ = net.forward(batch.planes, batch.glob)
    batch.old_log_prob = log_prob(mean, std, batch.actions) + np.random.default_rng(0).normal(0, 0.3, len(batch))
    assert gradient_check(net, full_loss(batch, LossWeights()), n_samples=200) < 1e-4


def test_gradient_check_linear_loss_exact():
    net = small_net()
    rng = np.random.default_rng(1)
    # magnitudes bounded away from zero keep the relative error meaningful in float64
    coef = {k: rng.choice([-1, 1], v.shape) * rng.uniform(1, 2, v.shape) for k, v in net.params.items()}

    def linear(n):
        return sum(float(np.sum(coef[k] * n.params[k])) for k in coef), {k: c.copy() for k, c in coef.items()}

    assert gradient_check(net, linear, n_samples=200) < 1e-9


def test_gradient_check_detects_fault():
    net = small_net()
    batch = rand_batch(SMALL, seed=6)
    w = LossWeights(clip=10.0)

    def broken(n):
        total, g = full_loss(batch, w)(n)
        g["critic.b"] = g["critic.b"] * 2.0
        return total, g

    # a single-entry tensor, so the corrupted entry is always among the sampled ones
    assert gradient_check(net, broken, n_samples=200) > 0.1


def test_first_epoch_policy_term_is_zero():
    net = small_net()
    batch = rand_batch(SMALL, seed=7, n=32)
    mean, std, _, _ = net.forward(batch.planes, batch.glob)
    batch.old_log_prob = log_prob(mean, std, batch.actions)
    rep, _ = composite_loss(net, batch, LossWeights())
    assert abs(rep["policy"]) < 1e-12
    assert rep["clip_frac"] == 0.0


def test_tiny_clip_kills_policy_gradient_off_ratio_one():
    net = small_net()
    batch = rand_batch(SMALL, seed=10)
    mean, std, _, _ = net.forward(batch.planes, batch.glob)
    adv = normalize_advantages(batch.advantages)
    # move every ratio away from 1 on the side where the clipped branch is the minimum
    batch.old_log_prob = log_prob(mean, std, batch.actions) - 0.5 * np.sign(adv)
    w = LossWeights(clip=1e-9, vf_coef=0.0, aux_coef=0.0)
    rep, g = composite_loss(net, batch, w)
    assert rep["clip_frac"] == 1.0
    assert max(np.max(np.abs(v)) for v in g.values()) == 0.0


def test_advantage_shift_invariance():
    net = small_net()
    batch = rand_batch(SMALL, seed=11)
    a, _ = composite_loss(net, batch, LossWeights(), with_grad=False)
    batch.advantages = batch.advantages + 123.0
    b, _ = composite_loss(net, batch, LossWeights(), with_grad=False)
    assert a["policy"] == pytest.approx(b["policy"], abs=1e-9)


def test_aux_zero_ignores_block_targets():
    net = small_net()
    batch = rand_batch(SMALL, seed=12)
    w = LossWeights(aux_coef=0.0)
    _, g1 = composite_loss(net, batch, w)
    batch.block_targets = batch.block_targets + 50.0
    _, g2 = composite_loss(net, batch, w)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_non_finite_loss_aborts():
    net = small_net()
    batch = rand_batch(SMALL, seed=13)
    batch.returns[0] = np.inf
    with pytest.raises(NonFiniteLoss):
        composite_loss(net, batch, LossWeights())


def test_ppo_update_reports_and_changes_params():
    net = small_net()
    before = {k: v.copy() for k, v in net.params.items()}
    rep = ppo_update(net, rand_batch(SMALL, seed=14, n=32), Adam(net.params), LossWeights(), epochs=2, minibatch_size=8)
    assert set(rep) >= {"policy", "value", "entropy", "aux", "total"}
    assert all(np.isfinite(v) for v in rep.values())
    assert any(not np.array_equal(before[k], net.params[k]) for k in before)


def test_running_mean_std_matches_concatenation():
    rng = np.random.default_rng(0)
    parts = [rng.normal(3, 2, n) for n in (5, 17, 40)]
    rms = RunningMeanStd()
    for p in parts:
        rms.update(p)
    allv = np.concatenate(parts)
    assert rms.mean == pytest.approx(allv.mean(), rel=1e-12)
    assert rms.var == pytest.approx(allv.var(), rel=1e-12)


# -- training loop -----------------------------------------------------------------


def tiny_setup(total_frames, **kw):
    streams = [roi_world(s, 24, (64, 64)) for s in range(2)]
    cfg = TrainConfig(total_frames=total_frames, n_envs=2, horizon=8, minibatch_size=8, epochs=2, channels=(4, 4, 4), latent=16, **kw)
    return make_env_factory(streams, EnvConfig(lookahead=3), (100_000, 200_000), 0), cfg


def test_train_zero_frames_returns_initial_net():
    factory, cfg = tiny_setup(0)
    net, log = train(factory, cfg)
    assert log == []
    fresh = PolicyNet(net.spec, seed=cfg.seed)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], fresh.params[k])


def test_train_reproducible():
    runs = []
    for _ in range(2):
        factory, cfg = tiny_setup(3 * 16)
        runs.append(train(factory, cfg))
    assert runs[0][1] == runs[1][1]
    assert len(runs[0][1]) == 3
    for k in runs[0][0].params:
        np.testing.assert_array_equal(runs[0][0].params[k], runs[1][0].params[k])


def test_train_env_failure_aborts():
    def bad(i, ep):
        raise ValueError("no such stream")

    with pytest.raises(RuntimeError):
        train(bad, TrainConfig(total_frames=10))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(clip=0)
