import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qprl import codec
from qprl.codec import (
    BLOCK_FIELDS,
    GLOBAL_FIELDS,
    HEADER_BITS,
    CodecError,
    Frame,
    compute_stats,
    dct8,
    dequantize,
    encode_frame,
    estimate_bits,
    idct8,
    motion_search,
    qp_to_step,
    quantize,
    se_length,
    ue_length,
)


def rand_frame(rng, h=64, w=64, sigma=30.0, idx=0):
    return Frame(np.clip(rng.normal(128, sigma, (h, w)), 0, 255).astype(np.uint8), idx)


# -- QP to step -------------------------------------------------------------------


@pytest.mark.parametrize("qp,step", [(4, 1.0), (10, 2.0), (22, 8.0)])
def test_qp_to_step_examples(qp, step):
    assert qp_to_step(qp) == step


def test_qp_to_step_strictly_increasing_and_doubling():
    steps = qp_to_step(np.arange(52))
    assert np.all(np.diff(steps) > 0)
    np.testing.assert_allclose(steps[6:] / steps[:-6], 2.0, rtol=1e-14)


@pytest.mark.parametrize("qp", [-1, 52, 100])
def test_qp_to_step_domain(qp):
    with pytest.raises(CodecError):
        qp_to_step(qp)


# -- transform --------------------------------------------------------------------


def test_dct_constant_block_has_only_dc():
    c = dct8(np.full((8, 8), 5.0))
    assert c[0, 0] == pytest.approx(40.0)
    c[0, 0] = 0
    assert np.max(np.abs(c)) < 1e-12


def test_dct_zero_block():
    assert not np.any(dct8(np.zeros((8, 8))))


@given(arrays(np.float64, (8, 8), elements=st.floats(-1e3, 1e3)))
def test_dct_round_trip_and_parseval(x):
    c = dct8(x)
    assert np.max(np.abs(idct8(c) - x)) < 1e-9
    assert np.sum(c**2) == pytest.approx(np.sum(x**2), rel=1e-9, abs=1e-6)


def test_dct_batched_matches_single():
    x = np.random.default_rng(0).normal(size=(3, 2, 8, 8))
    batched = dct8(x)
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(batched[i, j], dct8(x[i, j]), atol=1e-12)


# -- quantizer --------------------------------------------------------------------


def test_quantize_examples():
    assert quantize(0.0, 7.3) == 0
    assert quantize(3.4, 1.0) == 3
    assert dequantize(quantize(3.4, 1.0), 1.0) == 3.0
    assert quantize(-2.5, 1.0) == -3  # half rounds away from zero
    assert quantize(2.5, 1.0) == 3


@given(st.floats(-5e3, 5e3), st.floats(0.1, 300), st.floats(1.0, 50))
def test_quantize_level_non_increasing_in_step(c, s1, factor):
    assert abs(quantize(c, s1 * factor)) <= abs(quantize(c, s1))


# -- bit model --------------------------------------------------------------------


def test_exp_golomb_lengths():
    np.testing.assert_array_equal(ue_length([0, 1, 2, 3, 6, 7]), [1, 3, 3, 5, 5, 7])
    np.testing.assert_array_equal(se_length([0, 1, -1, 2, -2, 3]), [1, 3, 3, 5, 5, 5])


def test_estimate_bits_examples():
    z = np.zeros((8, 8), dtype=int)
    assert estimate_bits(z) == 1
    z[0, 0] = 1
    # run 0 (1 bit) + level +1 (3 bits) + terminator (1 bit)
    assert estimate_bits(z) == 5


def test_estimate_bits_zigzag_runs():
    z = np.zeros((8, 8), dtype=int)
    z[1, 0] = -1  # zigzag position 2 -> run 2
    assert estimate_bits(z) == int(ue_length(2) + se_length(-1) + 1)


@given(arrays(np.int64, (8, 8), elements=st.integers(-40, 40)))
def test_estimate_bits_doubling_never_decreases(levels):
    assert estimate_bits(2 * levels) >= estimate_bits(levels)


def test_estimate_bits_shape_error():
    with pytest.raises(CodecError):
        estimate_bits(np.zeros((4, 4)))


# -- frames and encoding -----------------------------------------------------------


def test_frame_validation():
    with pytest.raises(CodecError):
        Frame(np.zeros((20, 32)))
    with pytest.raises(CodecError):
        Frame(np.full((16, 16), 300.0))
    f = Frame(np.zeros((32, 48)), 3)
    assert (f.height, f.width, f.mb_shape, f.frame_index) == (32, 48, (2, 3), 3)


def test_identical_reference_is_all_skip():
    rng = np.random.default_rng(1)
    f = rand_frame(rng)
    for qp in (0, 20, 51):
        enc = encode_frame(f, f, np.full((4, 4), qp))
        assert enc.frame_type == "P"
        assert np.all(enc.mb_types == codec.MB_SKIP)
        assert np.all(enc.per_block_bits == 1)
        assert enc.total_bits == 16 + HEADER_BITS
        np.testing.assert_array_equal(enc.reconstruction.samples, f.samples)


def test_total_bits_accounting():
    rng = np.random.default_rng(2)
    ref, cur = rand_frame(rng), rand_frame(rng)
    for r in (None, ref):
        enc = encode_frame(cur, r, rng.integers(10, 40, (4, 4)))
        assert enc.total_bits == enc.per_block_bits.sum() + HEADER_BITS
        assert enc.header_bits == HEADER_BITS
        assert enc.reconstruction.samples.shape == cur.samples.shape


def test_constant_i_frame_at_qp4_is_near_lossless():
    f = Frame(np.full((32, 32), 117.3))
    enc = encode_frame(f, None, np.full((2, 2), 4))
    assert np.max(np.abs(enc.reconstruction.samples.astype(float) - f.samples)) <= 0.5


def test_i_frame_qp4_error_bound_random():
    f = rand_frame(np.random.default_rng(3), 32, 32)
    enc = encode_frame(f, None, np.full((2, 2), 4))
    # step 1 rounding per coefficient; orthonormal transform spreads at most 8 * 0.5 per pixel
    assert np.max(np.abs(enc.reconstruction.samples.astype(float) - f.samples)) <= 4


def test_encode_errors():
    f = rand_frame(np.random.default_rng(4))
    with pytest.raises(CodecError):
        encode_frame(f, None, np.full((3, 4), 20))
    with pytest.raises(CodecError):
        encode_frame(f, None, np.full((4, 4), 52))
    with pytest.raises(CodecError):
        encode_frame(f, None, np.full((4, 4), 20.5))
    with pytest.raises(CodecError):
        encode_frame(f, Frame(np.zeros((32, 64))), np.full((4, 4), 20))


def test_encode_is_deterministic():
    rng = np.random.default_rng(5)
    ref, cur = rand_frame(rng), rand_frame(rng)
    q = rng.integers(0, 52, (4, 4))
    a, b = encode_frame(cur, ref, q), encode_frame(cur, ref, q)
    assert a.total_bits == b.total_bits
    np.testing.assert_array_equal(a.per_block_bits, b.per_block_bits)
    np.testing.assert_array_equal(a.reconstruction.samples, b.reconstruction.samples)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(6, 51), st.booleans())
def test_lower_qp_never_decreases_bits(seed, qp, inter):
    rng = np.random.default_rng(seed)
    cur = rand_frame(rng, 32, 32, sigma=rng.uniform(2, 60))
    ref = rand_frame(rng, 32, 32) if inter else None
    hi = encode_frame(cur, ref, np.full((2, 2), qp))
    lo = encode_frame(cur, ref, np.full((2, 2), qp - 6))
    assert lo.total_bits >= hi.total_bits


def test_motion_search_recovers_shift():
    rng = np.random.default_rng(6)
    ref = np.clip(rng.normal(128, 40, (64, 64)), 0, 255).astype(np.uint8)
    cur = np.roll(ref, (2, -3), axis=(0, 1))
    mv, sad, pred = motion_search(cur, ref, 4)
    # interior blocks see the exact shifted content
    assert tuple(mv[1, 1]) == (-2, 3)
    assert sad[1, 1] == 0
    np.testing.assert_array_equal(pred[1, 1], cur[16:32, 16:32])


def test_motion_search_prefers_zero_on_ties():
    flat = np.full((32, 32), 9, dtype=np.uint8)
    mv, sad, _ = motion_search(flat, flat, 3)
    assert not np.any(mv) and not np.any(sad)


def test_p_frame_uses_motion():
    rng = np.random.default_rng(7)
    ref = Frame(np.clip(rng.normal(128, 40, (64, 64)), 0, 255).astype(np.uint8))
    cur = Frame(np.roll(ref.samples, (1, 1), axis=(0, 1)))
    p = encode_frame(cur, ref, np.full((4, 4), 20))
    i = encode_frame(cur, None, np.full((4, 4), 20))
    assert p.total_bits < i.total_bits
    assert p.motion_bits > 0


# -- statistics -------------------------------------------------------------------


def test_stats_shapes_and_ranges():
    rng = np.random.default_rng(8)
    frames = [rand_frame(rng, idx=i) for i in range(4)]
    s = compute_stats(frames[0], frames[1:], baseline_qp=30, stream_length=4)
    assert s.global_stats.shape == (len(GLOBAL_FIELDS),) == (16,)
    assert s.per_block.shape == (len(BLOCK_FIELDS), 4, 4)
    assert s.per_block.min() >= 0 and s.per_block.max() <= 1
    assert s["progress"] == 0.0
    assert s["bitrate_error"] == 0.0
    assert s["next_frame_qp"] == 30


def test_stats_constant_frame_energy_zero():
    f = Frame(np.full((32, 32), 50))
    s = compute_stats(f, [f], baseline_qp=30, stream_length=10)
    assert not np.any(s.per_block[0])


def test_stats_static_scene_propagate_zero():
    f = rand_frame(np.random.default_rng(9))
    s = compute_stats(f, [f] * 10, baseline_qp=30, stream_length=20)
    assert not np.any(s.per_block[2])


def test_stats_progress_is_index_over_length():
    f = rand_frame(np.random.default_rng(10), idx=7)
    assert compute_stats(f, (), baseline_qp=30, stream_length=28)["progress"] == 0.25


def test_stats_inverse_qscale_plane():
    f = rand_frame(np.random.default_rng(11))
    s = compute_stats(f, (), baseline_qp=16, stream_length=2)
    np.testing.assert_allclose(s.per_block[3], 1 / qp_to_step(16))


def test_propagate_cost_decay():
    rng = np.random.default_rng(12)
    f = rand_frame(rng)
    g = rand_frame(rng)
    raw = codec.raw_block_features(f, [g, g], beta=0.5)
    one = codec.block_sum(np.abs(g.samples.astype(float) - f.samples))
    np.testing.assert_allclose(raw[2], 1.5 * one)


def test_update_progress_fractions_sum_to_one():
    rng = np.random.default_rng(13)
    a, b = rand_frame(rng), rand_frame(rng)
    prog = codec.EncodeProgress(stream_length=2)
    enc = encode_frame(b, a, np.full((4, 4), 30))
    codec.update_progress(prog, b, enc, 30, 30.0, 100_000.0)
    assert sum(prog.frac) == pytest.approx(1.0)
    assert prog.bitrate_error == pytest.approx(np.log(enc.total_bits * 30 / 100_000))
