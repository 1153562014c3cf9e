import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qprl.env import (
    EnvConfig,
    EnvError,
    RateControlEnv,
    RateController,
    action_shape,
    bilinear_upsample,
    bitrate_reward,
    combine_reward,
    upsample_action,
)
from qprl.synth import car_world, roi_world


@pytest.fixture(scope="module")
def stream():
    return roi_world(3, 12, (64, 64))


SHORT = roi_world(3, 3, (64, 64))


def run_episode(stream, cfg, action_fn):
    env = RateControlEnv(stream, cfg)
    env.reset()
    out = []
    while not env.done:
        out.append(env.step(action_fn(env)))
    return env, out


def zeros(env):
    return np.zeros(env.action_shape)


# -- upsampling --------------------------------------------------------------------


def test_upsample_constant_and_one_by_one():
    for v in (-3.4, 0.0, 2.6, 7.49):
        np.testing.assert_array_equal(upsample_action(np.full((2, 2), v), (8, 8)), np.full((8, 8), round(v)))
    np.testing.assert_array_equal(upsample_action([[5.2]], (4, 6)), np.full((4, 6), 5))


def test_upsample_two_by_two_cell_centres():
    # cell centres at 0.25 and 0.75 of the coarse cell pitch: weights 3/4 and 1/4 inside,
    # edge rows/cols clamp to the nearest coarse value
    got = bilinear_upsample([[0, 4], [4, 8]], (4, 4))
    want = np.array(
        [
            [0, 1, 3, 4],
            [1, 2, 4, 5],
            [3, 4, 6, 7],
            [4, 5, 7, 8],
        ],
        dtype=float,
    )
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_array_equal(got[1:3, 1:3], [[2, 4], [4, 6]])


def test_upsample_clamps_to_delta_max():
    out = upsample_action([[100.0, -100.0]], (2, 4), delta_max=5)
    assert out.max() == 5 and out.min() == -5
    assert out.dtype.kind == "i"


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(-4, 4))
def test_upsample_linearity_before_rounding(seed, a):
    g = np.random.default_rng(seed).uniform(-3, 3, (2, 4))
    np.testing.assert_allclose(bilinear_upsample(a * g, (8, 8)), a * bilinear_upsample(g, (8, 8)), atol=1e-12)


def test_upsample_errors():
    with pytest.raises(EnvError):
        upsample_action(np.zeros((3, 3)), (8, 8))
    with pytest.raises(EnvError):
        upsample_action(np.zeros((16, 16)), (8, 8))
    with pytest.raises(EnvError):
        upsample_action([[np.nan]], (8, 8))
    with pytest.raises(EnvError):
        action_shape((8, 8), 3)
    assert action_shape((8, 8), 4) == (2, 2)


# -- rewards -----------------------------------------------------------------------


def test_bitrate_reward_examples():
    assert bitrate_reward(5e4, 5e4) == 0.0
    assert bitrate_reward(2e5, 1e5) == pytest.approx(-math.log(2), abs=1e-12)
    assert bitrate_reward(5e4, 1e5) == pytest.approx(-math.log(2), abs=1e-12)
    with pytest.raises(EnvError):
        bitrate_reward(0, 1)
    with pytest.raises(EnvError):
        bitrate_reward(1, -1)


@given(st.floats(1, 1e7), st.floats(1, 1e7))
def test_bitrate_reward_sign(cur, tgt):
    r = bitrate_reward(cur, tgt)
    assert r <= 0
    assert (r == 0) == (cur == tgt) or abs(math.log(cur / tgt)) < 1e-15


def test_combine_reward_examples():
    assert combine_reward(0, 0, 7.0) == 0
    assert combine_reward(-0.5, 0.1, 20) == pytest.approx(1.5)
    assert combine_reward(-0.3, 123.0, 0) == -0.3
    with pytest.raises(EnvError):
        combine_reward(0, 0, -1)


# -- baseline controller -----------------------------------------------------------


def test_controller_on_target_keeps_qp():
    c = RateController(30_000, 30, start_qp=27)
    for _ in range(50):
        assert c.update(1000) == 27


def test_controller_overshoot_raises_qp_until_clamp():
    c = RateController(27_000, 30)  # 1000 bits/frame is 11% over target
    qps = [c.update(1000) for _ in range(1000)]
    assert all(b >= a for a, b in zip(qps, qps[1:]))
    first_clamp = qps.index(51)
    assert len(set(qps[:first_clamp])) > 3
    assert all(q == 51 for q in qps[first_clamp:])


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=80), st.floats(1e3, 1e6))
def test_controller_qp_range(bits, target):
    c = RateController(target, 30)
    for b in bits:
        assert 0 <= c.update(b) <= 51


# -- environment -------------------------------------------------------------------


def test_config_validation():
    for bad in ({"target_bitrate": 0}, {"lam": -1}, {"delta_max": 0}, {"delta_max": 26}, {"task": "x"}, {"coarsen": 0}):
        with pytest.raises(ValueError):
            EnvConfig(**bad)
    cfg = EnvConfig(lam=3.0)
    assert EnvConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg


def test_reset_state(stream):
    env = RateControlEnv(stream, EnvConfig())
    s = env.reset()
    assert s["progress"] == 0.0
    assert s["bitrate_error"] == 0.0
    assert s.per_block.min() >= 0 and s.per_block.max() <= 1
    assert env.cumulative_bits == 0


def test_env_errors(stream):
    with pytest.raises(EnvError):
        RateControlEnv(roi_world(0, 1, (64, 64)), EnvConfig())
    env = RateControlEnv(stream, EnvConfig())
    with pytest.raises(EnvError):
        env.step(np.zeros(env.action_shape))
    env.reset()
    with pytest.raises(EnvError):
        env.step(np.zeros((3, 3)))
    with pytest.raises(EnvError):
        RateControlEnv(roi_world(0, 4, (64, 64)), EnvConfig(task="detect"))


def test_zero_action_gives_constant_qp_map(stream):
    _, steps = run_episode(stream, EnvConfig(), zeros)
    for s in steps:
        np.testing.assert_array_equal(s.info["qp_map"], s.info["frame_qp"])


def test_done_only_at_last_frame_and_accounting(stream):
    _, steps = run_episode(stream, EnvConfig(), zeros)
    assert [s.done for s in steps] == [False] * (len(stream) - 1) + [True]
    assert sum(s.info["frame_bits"] for s in steps) == steps[-1].info["cumulative_bits"]
    env = RateControlEnv(stream, EnvConfig())
    env.reset()
    for _ in range(len(stream)):
        env.step(np.zeros(env.action_shape))
    with pytest.raises(EnvError):
        env.step(np.zeros(env.action_shape))


def test_reward_is_combination(stream):
    cfg = EnvConfig(lam=20.0)
    _, steps = run_episode(stream, cfg, zeros)
    for t, s in enumerate(steps):
        avg = s.info["cumulative_bits"] * cfg.fps / (t + 1)
        want = -abs(math.log(avg / cfg.target_bitrate)) + 20.0 * s.info["task_score"]
        assert s.reward == pytest.approx(want, rel=1e-12, abs=1e-15)
        assert s.block_rewards.sum() == pytest.approx(s.info["task_score"], rel=1e-9, abs=1e-15)


def test_lambda_zero_ignores_task(stream):
    _, steps = run_episode(stream, EnvConfig(lam=0.0), zeros)
    for s in steps:
        assert s.reward == s.info["r_bitrate"]


def test_identical_envs_are_deterministic(stream):
    rng = np.random.default_rng(0)
    acts = [rng.uniform(-8, 8, (2, 2)) for _ in range(len(stream))]
    runs = []
    for _ in range(2):
        it = iter(acts)
        _, steps = run_episode(stream, EnvConfig(), lambda env: next(it))
        runs.append(steps)
    for a, b in zip(*runs):
        assert a.reward == b.reward and a.info["frame_bits"] == b.info["frame_bits"]
        np.testing.assert_array_equal(a.block_rewards, b.block_rewards)
        np.testing.assert_array_equal(a.next_state.per_block, b.next_state.per_block)


def test_negative_action_costs_at_least_zero_action_bits(stream):
    cfg = EnvConfig()
    for fill in (0.0, -cfg.delta_max):
        env = RateControlEnv(stream, cfg)
        env.reset()
        r = env.step(np.full(env.action_shape, fill))
        if fill == 0:
            zero_bits = r.info["frame_bits"]
        else:
            assert r.info["frame_bits"] >= zero_bits


@settings(max_examples=10, deadline=None)
@given(st.floats(-1e3, 1e3))
def test_qp_map_in_range_for_any_action(v):
    env = RateControlEnv(SHORT, EnvConfig(delta_max=25, start_qp=45))
    env.reset()
    q = env.step(np.full(env.action_shape, v)).info["qp_map"]
    assert q.min() >= 0 and q.max() <= 51


def test_detect_env_runs():
    s = car_world(1, 4, (64, 96))
    _, steps = run_episode(s, EnvConfig(task="detect"), zeros)
    assert all(0.0 <= st_.info["task_score"] <= 1.0 for st_ in steps)
    assert steps[-1].block_rewards.shape == (4, 6)
