import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qprl.metrics import mse, psnr
from qprl.synth import template_bank
from qprl.tasks import (
    Detection,
    TaskError,
    detect,
    iou,
    match_detections,
    precision_recall,
    saliency_weighted_mse,
    saliency_weighted_psnr,
    task_reward,
)


def rand_pair(seed, shape=(32, 48)):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, shape).astype(np.uint8)
    recon = np.clip(raw + rng.integers(-20, 21, shape), 0, 255).astype(np.uint8)
    return raw, recon, rng


# -- saliency-weighted distortion ---------------------------------------------------


def test_wmse_identity_is_zero():
    raw, _, rng = rand_pair(0)
    g, blocks = saliency_weighted_mse(raw, raw, rng.uniform(0, 1, raw.shape))
    assert g == 0 and not np.any(blocks)


def test_wmse_uniform_saliency_is_plain_mse():
    raw, recon, _ = rand_pair(1)
    g, _ = saliency_weighted_mse(raw, recon, np.full(raw.shape, 3.7))
    assert g == pytest.approx(mse(raw, recon), rel=1e-12)


def test_wmse_single_block_support():
    raw, recon, _ = rand_pair(2)
    sal = np.zeros(raw.shape)
    sal[16:32, 16:32] = 1.0
    g, blocks = saliency_weighted_mse(raw, recon, sal)
    err = (raw.astype(float) - recon)[16:32, 16:32] ** 2
    assert g == pytest.approx(err.mean(), rel=1e-12)
    assert blocks[1, 1] == pytest.approx(g, rel=1e-12)
    assert np.count_nonzero(blocks) == 1


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(0.01, 1e4))
def test_wmse_decomposition_and_scale_invariance(seed, k):
    raw, recon, rng = rand_pair(seed)
    sal = rng.uniform(0, 1, raw.shape)
    g, blocks = saliency_weighted_mse(raw, recon, sal)
    assert blocks.sum() == pytest.approx(g, rel=1e-9)
    g2, blocks2 = saliency_weighted_mse(raw, recon, sal * k)
    assert g2 == pytest.approx(g, rel=1e-9)
    np.testing.assert_allclose(blocks2, blocks, rtol=1e-9)


def test_wmse_errors():
    raw, recon, _ = rand_pair(3)
    with pytest.raises(TaskError):
        saliency_weighted_mse(raw, recon, np.zeros(raw.shape))
    with pytest.raises(TaskError):
        saliency_weighted_mse(raw, recon, -np.ones(raw.shape))
    with pytest.raises(TaskError):
        saliency_weighted_mse(raw, recon, np.ones((16, 16)))


def test_saliency_psnr_examples():
    raw = np.full((32, 32), 100, dtype=np.uint8)
    assert saliency_weighted_psnr(raw, raw, np.ones(raw.shape)) == 100.0
    # uniform error of 1 per pixel, uniform saliency
    got = saliency_weighted_psnr(raw, raw + 1, np.ones(raw.shape))
    assert got == pytest.approx(10 * math.log10(65025), abs=1e-12)
    assert got == pytest.approx(48.13, abs=0.005)


def test_plain_psnr_example():
    raw = np.full((16, 16), 50, dtype=np.uint8)
    assert psnr(raw, raw + 16) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-12)
    assert psnr(raw, raw) == 100.0


# -- IoU and matching --------------------------------------------------------------


def test_iou_examples():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 2, 2), (5, 5, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3)


box = st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30))


@given(box, box)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


def D(x, y, s=0.9, w=16, h=16):
    return Detection((x, y, w, h), s)


def test_precision_recall_examples():
    gt = [D(0, 0), D(40, 40)]
    p, r, _ = precision_recall(gt, gt)
    assert (p, r) == (1.0, 1.0)
    p, r, _ = precision_recall([], gt)
    assert (p, r) == (0.0, 0.0)
    p, r, _ = precision_recall([], [])
    assert (p, r) == (1.0, 1.0)
    p, r, _ = precision_recall([D(0, 0, 0.9), D(100, 100, 0.8)], gt)
    assert (p, r) == (0.5, 0.5)


def test_matching_is_greedy_by_score_and_one_to_one():
    gt = [D(0, 0)]
    pred = [D(1, 0, 0.7), D(0, 0, 0.95)]
    assert match_detections(pred, gt) == [None, 0]


def test_tp_map_places_matched_centres():
    gt = [D(0, 0), D(40, 40)]
    pred = [D(0, 0, 0.9), D(40, 40, 0.8), D(90, 90, 0.7)]
    _, _, tp = precision_recall(pred, gt, mb_shape=(8, 8))
    assert tp[0, 0] == pytest.approx(1 / 3)
    assert tp[3, 3] == pytest.approx(1 / 3)
    assert tp.sum() == pytest.approx(2 / 3)


# -- detector ----------------------------------------------------------------------


def test_detect_exact_copy():
    t = template_bank(1)[0]
    img = np.full((64, 96), 128.0)
    img[20:36, 40:72] = t
    dets = detect(img, [t], threshold=0.9)
    assert len(dets) == 1
    assert dets[0].box == (40, 20, 32, 16)
    assert dets[0].score >= 0.99


def test_detect_blank_frame():
    assert detect(np.full((64, 64), 77.0), template_bank(2), threshold=0.5) == []


def test_detect_two_copies_and_ordering():
    t = template_bank(1)[0]
    img = np.full((96, 96), 128.0)
    img[8:24, 8:40] = t
    img[60:76, 48:80] = t
    dets = detect(img, [t], threshold=0.9)
    assert sorted(d.box for d in dets) == [(8, 8, 32, 16), (48, 60, 32, 16)]
    assert dets == detect(img, [t], threshold=0.9)


def test_detect_errors():
    t = template_bank(1)[0]
    with pytest.raises(TaskError):
        detect(np.zeros((16, 16)), [t])
    with pytest.raises(TaskError):
        detect(np.zeros((64, 64)), [])
    with pytest.raises(TaskError):
        detect(np.zeros((64, 64)), [t], threshold=1.0)


# -- task rewards ------------------------------------------------------------------


def test_roi_reward_fixed_point_and_decomposition():
    raw, recon, rng = rand_pair(4)
    sal = rng.uniform(0, 1, raw.shape)
    same = task_reward("roi", raw, raw, saliency=sal)
    assert same.global_score == 0 and not np.any(same.block_rewards)
    res = task_reward("roi", raw, recon, saliency=sal)
    assert res.global_score < 0
    assert res.block_rewards.sum() == pytest.approx(res.global_score, rel=1e-9)
    assert res.global_score == pytest.approx(-saliency_weighted_mse(raw, recon, sal)[0] / 255**2)


def test_detect_reward_fixed_point():
    bank = template_bank(3)
    img = np.full((64, 96), 120.0)
    img[24:40, 32:64] = bank[1]
    res = task_reward("detect", img, img, templates=bank)
    assert res.global_score == 1.0
    assert res.details["n_gt"] >= 1


def test_task_reward_errors():
    raw, recon, _ = rand_pair(5)
    with pytest.raises(TaskError):
        task_reward("roi", raw, recon)
    with pytest.raises(TaskError):
        task_reward("detect", raw, recon)
    with pytest.raises(TaskError):
        task_reward("segment", raw, recon)
