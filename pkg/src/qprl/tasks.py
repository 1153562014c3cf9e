"""Downstream-task surrogates and their self-supervised rewards.

ROI encoding scores reconstructions with saliency-weighted distortion.
Detection uses a zero-normalized cross-correlation template matcher; its
output on the raw frame serves as pseudo ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import MB, block_sum
from .metrics import PEAK, psnr_from_mse

DETECT_STRIDE = 4
NMS_IOU = 0.5


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # x, y, w, h
    score: float

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0


@dataclass
class TaskResult:
    global_score: float
    block_rewards: np.ndarray
    details: dict = field(default_factory=dict)


def _pixels(frame) -> np.ndarray:
    return np.asarray(getattr(frame, "samples", frame), dtype=np.float64)


# -- ROI encoding ---------------------------------------------------------------


def saliency_weighted_mse(raw, recon, saliency) -> tuple[float, np.ndarray]:
    """Global saliency-weighted MSE and its exact per-macroblock decomposition."""
    a, b = _pixels(raw), _pixels(recon)
    s = np.asarray(saliency, dtype=np.float64)
    if not (a.shape == b.shape == s.shape):
        raise TaskError(f"shape mismatch: raw {a.shape}, recon {b.shape}, saliency {s.shape}")
    if np.any(s < 0):
        raise TaskError("saliency weights must be non-negative")
    total = s.sum()
    if total <= 0:
        raise TaskError("saliency map sums to zero")
    contrib = block_sum(s * (a - b) ** 2) / total
    return float(contrib.sum()), contrib


def saliency_weighted_psnr(raw, recon, saliency) -> float:
    wmse, _ = saliency_weighted_mse(raw, recon, saliency)
    return psnr_from_mse(wmse)


# -- detection ------------------------------------------------------------------


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(inter / union) if union > 0 else 0.0


def _integral(x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    out[1:, 1:] = x.cumsum(0).cumsum(1)
    return out


def _ncc_map(x: np.ndarray, template: np.ndarray, stride: int) -> np.ndarray:
    t = np.asarray(template, dtype=np.float64)
    th, tw = t.shape
    tz = t - t.mean()
    tnorm = np.sqrt((tz**2).sum())
    win = sliding_window_view(x, t.shape)[::stride, ::stride]
    if tnorm == 0:
        return np.zeros(win.shape[:2])
    # window sums from integral images; exact for integer-valued frames
    ys = np.arange(win.shape[0])[:, None] * stride
    xs = np.arange(win.shape[1])[None, :] * stride
    s1, s2 = (ii[ys + th, xs + tw] - ii[ys, xs + tw] - ii[ys + th, xs] + ii[ys, xs] for ii in (_integral(x), _integral(x * x)))
    var = s2 - s1 * s1 / (th * tw)
    flat = var <= 1e-12 * np.maximum(s2, 1.0)
    wnorm = np.sqrt(np.where(flat, 1.0, var))
    # tz sums to zero, so correlating the raw window equals correlating its centred copy
    num = np.tensordot(win, tz, axes=([2, 3], [0, 1]))
    return np.where(flat, 0.0, np.clip(num / (wnorm * tnorm), 0.0, 1.0))


def _local_maxima(score: np.ndarray) -> np.ndarray:
    padded = np.pad(score, 1, mode="constant", constant_values=-np.inf)
    neigh = sliding_window_view(padded, (3, 3))
    return score >= neigh.max(axis=(2, 3))


def detect(frame, templates: Sequence[np.ndarray], threshold: float = 0.6, stride: int = DETECT_STRIDE) -> list[Detection]:
    """Template-matching detector with greedy non-maximum suppression."""
    if len(templates) == 0:
        raise TaskError("template bank is empty")
    if not 0.0 < threshold < 1.0:
        raise TaskError(f"threshold must lie in (0, 1), got {threshold}")
    x = _pixels(frame)
    cands = []
    for t in templates:
        th, tw = np.shape(t)
        if th > x.shape[0] or tw > x.shape[1]:
            raise TaskError(f"template {tw}x{th} larger than frame {x.shape[1]}x{x.shape[0]}")
        score = _ncc_map(x, t, stride)
        keep = _local_maxima(score) & (score > threshold)
        for iy, ix in zip(*np.nonzero(keep)):
            cands.append((float(score[iy, ix]), int(iy * stride), int(ix * stride), tw, th))
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    kept: list[Detection] = []
    for s, y, x0, w, h in cands:
        box = (x0, y, w, h)
        if all(iou(box, d.box) <= NMS_IOU for d in kept):
            kept.append(Detection(box, s))
    return kept


def match_detections(pred: Sequence[Detection], pseudo_gt: Sequence[Detection], iou_thresh: float = 0.5) -> list[Optional[int]]:
    """Greedy matching by descending prediction score; returns gt index or None per pred."""
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, pred[i].box[1], pred[i].box[0]))
    taken: set[int] = set()
    out: list[Optional[int]] = [None] * len(pred)
    for i in order:
        best, best_iou = None, -1.0
        for j, g in enumerate(pseudo_gt):
            v = iou(pred[i].box, g.box)
            if j not in taken and v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken.add(best)
            out[i] = best
    return out


def precision_recall(pred, pseudo_gt, iou_thresh: float = 0.5, mb_shape: Optional[tuple[int, int]] = None):
    """Precision, recall and a per-macroblock true-positive map."""
    matches = match_detections(pred, pseudo_gt, iou_thresh)
    tp = sum(m is not None for m in matches)
    n_pred, n_gt = len(pred), len(pseudo_gt)
    if n_pred:
        precision = tp / n_pred
    else:
        precision = 1.0 if n_gt == 0 else 0.0
    recall = tp / n_gt if n_gt else 1.0
    tp_map = None
    if mb_shape is not None:
        tp_map = np.zeros(mb_shape)
        share = 1.0 / max(n_pred, 1)
        for d, m in zip(pred, matches):
            if m is None:
                continue
            cx, cy = d.center
            by = min(int(cy // MB), mb_shape[0] - 1)
            bx = min(int(cx // MB), mb_shape[1] - 1)
            tp_map[by, bx] += share
    return precision, recall, tp_map


# -- rewards --------------------------------------------------------------------


def task_reward(
    task: str,
    raw,
    recon,
    *,
    saliency=None,
    templates=None,
    threshold: float = 0.6,
    raw_detections: Optional[Sequence[Detection]] = None,
) -> TaskResult:
    """Self-supervised task score of a reconstruction against its raw frame."""
    a = _pixels(raw)
    mb_shape = (a.shape[0] // MB, a.shape[1] // MB)
    if task == "roi":
        if saliency is None:
            raise TaskError("roi task needs a saliency map")
        wmse, contrib = saliency_weighted_mse(a, recon, saliency)
        return TaskResult(-wmse / PEAK**2, -contrib / PEAK**2, {"wmse": wmse})
    if task == "detect":
        if templates is None:
            raise TaskError("detect task needs a template bank")
        gt = detect(a, templates, threshold) if raw_detections is None else list(raw_detections)
        pred = detect(recon, templates, threshold)
        precision, recall, tp_map = precision_recall(pred, gt, mb_shape=mb_shape)
        tp = sum(m is not None for m in match_detections(pred, gt))
        n_fp = len(pred) - tp
        blocks = tp_map - (n_fp / max(len(pred), 1)) / tp_map.size
        return TaskResult(
            precision,
            blocks,
            {"precision": precision, "recall": recall, "tp": tp, "n_pred": len(pred), "n_gt": len(gt)},
        )
    raise TaskError(f"unknown task {task!r}")
