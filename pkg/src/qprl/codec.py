"""Block-based toy video codec with per-macroblock QP control.

Luma only. Each 16x16 macroblock carries its own QP; residuals are coded
per 8x8 sub-block with an orthonormal DCT, a uniform quantizer and an
exp-Golomb run-level bit-cost model. P-frames use exhaustive integer-pel
motion search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import psnr

MB = 16
SUB = 8
QP_MIN, QP_MAX = 0, 51
HEADER_BITS = 32
EOB_BITS = 1  # ue(0) terminator
INTRA_DC_BITS = 8
DEFAULT_SEARCH_RADIUS = 4

GLOBAL_FIELDS = (
    "next_frame_qp",
    "frame_number",
    "bitstream_size",
    "current_frame_qp",
    "average_qp",
    "frac_intra",
    "frac_inter",
    "frac_skip",
    "psnr",
    "ssim_proxy",
    "motion_bits_frac",
    "coef_bits_frac",
    "progress",
    "bitrate_error",
    "next_frame_type",
    "next_frame_complexity",
)
BLOCK_FIELDS = ("energy", "intra_cost", "propagate_cost", "inv_qscale")

MB_INTRA, MB_INTER, MB_SKIP = 0, 1, 2


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    samples: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise CodecError(f"frame samples must be 2-D, got shape {s.shape}")
        h, w = s.shape
        if h <= 0 or w <= 0 or h % MB or w % MB:
            raise CodecError(f"frame dimensions {w}x{h} are not positive multiples of {MB}")
        if s.dtype != np.uint8:
            if np.any(s < 0) or np.any(s > 255):
                raise CodecError("frame samples must lie in [0, 255]")
            s = np.rint(s).astype(np.uint8)
        object.__setattr__(self, "samples", s)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def mb_shape(self) -> tuple[int, int]:
        return self.height // MB, self.width // MB


@dataclass
class EncodedFrame:
    total_bits: int
    per_block_bits: np.ndarray
    reconstruction: Frame
    frame_type: str
    qp_map: np.ndarray
    mb_types: np.ndarray
    motion_vectors: np.ndarray
    motion_bits: int
    coef_bits: int

    @property
    def header_bits(self) -> int:
        return self.total_bits - int(self.per_block_bits.sum())


@dataclass
class EncoderStats:
    """Agent-facing state: 16 global scalars plus 4 normalized per-MB planes."""

    global_stats: np.ndarray
    per_block: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.global_stats[GLOBAL_FIELDS.index(name)])

    @property
    def mb_shape(self) -> tuple[int, int]:
        return self.per_block.shape[1:]


@dataclass
class EncodeProgress:
    """Running-encode quantities that feed the global statistics."""

    stream_length: int
    frames_encoded: int = 0
    bits_so_far: int = 0
    last_frame_qp: float = 0.0
    last_avg_qp: float = 0.0
    frac: tuple[float, float, float] = (1.0, 0.0, 0.0)
    psnr: float = 0.0
    ssim_proxy: float = 0.0
    motion_bits_frac: float = 0.0
    coef_bits_frac: float = 0.0
    bitrate_error: float = 0.0
    history: list = field(default_factory=list, repr=False)


# -- quantizer ------------------------------------------------------------------


def qp_to_step(qp):
    """Quantizer step for a QP; +6 QP doubles the step."""
    q = np.asarray(qp)
    if np.any(q < QP_MIN) or np.any(q > QP_MAX):
        raise CodecError(f"QP outside [{QP_MIN}, {QP_MAX}]: {qp}")
    step = np.power(2.0, (q.astype(np.float64) - 4.0) / 6.0)
    return float(step) if step.ndim == 0 else step


def quantize(coeffs, step):
    c = np.asarray(coeffs, dtype=np.float64)
    return (np.sign(c) * np.floor(np.abs(c) / step + 0.5)).astype(np.int64)


def dequantize(levels, step):
    return np.asarray(levels, dtype=np.float64) * step


# -- transform ------------------------------------------------------------------


def _dct_matrix(n: int = SUB) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = _dct_matrix()


def dct8(block):
    """Orthonormal 2-D DCT-II over the trailing 8x8 axes."""
    return DCT8 @ np.asarray(block, dtype=np.float64) @ DCT8.T


def idct8(coeffs):
    return DCT8.T @ np.asarray(coeffs, dtype=np.float64) @ DCT8


# -- bit-cost model -------------------------------------------------------------


def _zigzag(n: int = SUB) -> np.ndarray:
    order = sorted(
        ((i, j) for i in range(n) for j in range(n)),
        key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]),
    )
    return np.array([i * n + j for i, j in order])


ZIGZAG = _zigzag()


def _bit_length(v: np.ndarray) -> np.ndarray:
    # frexp exponent of a positive integer equals its bit length
    return np.frexp(np.asarray(v, dtype=np.float64))[1].astype(np.int64)


def ue_length(v):
    """Unsigned exp-Golomb code length."""
    v = np.asarray(v, dtype=np.int64)
    if np.any(v < 0):
        raise CodecError("unsigned exp-Golomb value must be non-negative")
    return 2 * (_bit_length(v + 1) - 1) + 1


def se_length(v):
    """Signed exp-Golomb code length (v>0 -> 2v-1, v<0 -> -2v)."""
    v = np.asarray(v, dtype=np.int64)
    mapped = np.where(v > 0, 2 * v - 1, -2 * v)
    return ue_length(mapped)


def estimate_bits_batch(levels: np.ndarray) -> np.ndarray:
    """Bit cost of each 8x8 level grid in a (..., 8, 8) stack."""
    lv = np.asarray(levels, dtype=np.int64)
    lead = lv.shape[:-2]
    flat = lv.reshape(-1, SUB * SUB)[:, ZIGZAG]
    rows, cols = np.nonzero(flat)
    bits = np.full(flat.shape[0], EOB_BITS, dtype=np.int64)
    if rows.size:
        prev = np.empty_like(cols)
        prev[0] = -1
        prev[1:] = cols[:-1]
        prev[1:][rows[1:] != rows[:-1]] = -1
        runs = cols - prev - 1
        cost = ue_length(runs) + se_length(flat[rows, cols])
        bits += np.bincount(rows, weights=cost, minlength=flat.shape[0]).astype(np.int64)
    return bits.reshape(lead)


def estimate_bits(levels) -> int:
    lv = np.asarray(levels)
    if lv.shape != (SUB, SUB):
        raise CodecError(f"expected an 8x8 level grid, got {lv.shape}")
    return int(estimate_bits_batch(lv))


# -- block helpers --------------------------------------------------------------


def to_blocks(plane: np.ndarray, size: int = MB) -> np.ndarray:
    """(H, W) -> (H/size, W/size, size, size) view."""
    h, w = plane.shape
    return plane.reshape(h // size, size, w // size, size).swapaxes(1, 2)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw, s, _ = blocks.shape
    return blocks.swapaxes(1, 2).reshape(bh * s, bw * s)


def block_sum(plane: np.ndarray, size: int = MB) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // size, size, w // size, size).sum(axis=(1, 3))


def _search_offsets(radius: int) -> list[tuple[int, int]]:
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # zero vector first so ties resolve toward short vectors
    return sorted(offs, key=lambda o: (abs(o[0]) + abs(o[1]), max(abs(o[0]), abs(o[1])), o))


def _sad_grid(cur: np.ndarray, pad: np.ndarray, radius: int) -> np.ndarray:
    """SAD of every MB at every offset, indexed [dy + r, dx + r, mby, mbx]."""
    h, w = cur.shape
    n = 2 * radius + 1
    out = np.empty((n, n, h // MB, w // MB), dtype=np.int64)
    for i in range(n):
        win = sliding_window_view(pad[i : i + h], w, axis=1)  # (h, n, w)
        d = np.abs(win - cur[:, None, :])
        rows = d.reshape(h, n, w // MB, MB).sum(-1, dtype=np.int64)
        out[i] = rows.reshape(h // MB, MB, n, w // MB).sum(1).transpose(1, 0, 2)
    return out


def motion_search(cur: np.ndarray, ref: np.ndarray, radius: int):
    """Exhaustive integer-pel SAD search per macroblock.

    Returns (motion vectors (mbh, mbw, 2), best SAD (mbh, mbw), predictor blocks).
    """
    h, w = cur.shape
    mbh, mbw = h // MB, w // MB
    pad = np.pad(np.asarray(ref), radius, mode="edge")
    offs = np.asarray(_search_offsets(radius))
    # 8-bit samples fit int16 differences exactly
    grid = _sad_grid(np.asarray(cur).astype(np.int16), pad.astype(np.int16), radius)
    sads = grid[offs[:, 0] + radius, offs[:, 1] + radius]
    best = np.argmin(sads, axis=0)
    mv = offs[best]
    best_sad = np.take_along_axis(sads, best[None], axis=0)[0].astype(np.float64)
    by = np.arange(mbh)[:, None] * MB + mv[..., 0] + radius
    bx = np.arange(mbw)[None, :] * MB + mv[..., 1] + radius
    r = by[:, :, None, None] + np.arange(MB)[None, None, :, None]
    c = bx[:, :, None, None] + np.arange(MB)[None, None, None, :]
    return mv, best_sad, pad[r, c].astype(np.float64)


def _validate_qp_map(qp_map, mb_shape) -> np.ndarray:
    q = np.asarray(qp_map)
    if q.shape != tuple(mb_shape):
        raise CodecError(f"QP map shape {q.shape} does not match macroblock grid {tuple(mb_shape)}")
    if not np.all(np.isfinite(q)) or np.any(q != np.round(q)):
        raise CodecError("QP map entries must be integers")
    q = q.astype(np.int64)
    if q.min() < QP_MIN or q.max() > QP_MAX:
        raise CodecError(f"QP map entries outside [{QP_MIN}, {QP_MAX}]")
    return q


def _qp_delta_bits(qp: np.ndarray, coded: np.ndarray) -> np.ndarray:
    """Per-MB bits for QP deltas, chained over coded MBs in raster order."""
    flat_qp = qp.ravel()
    idx = np.flatnonzero(coded.ravel())
    bits = np.zeros(flat_qp.size, dtype=np.int64)
    if idx.size:
        seq = flat_qp[idx]
        deltas = np.diff(seq, prepend=flat_qp[0])
        bits[idx] = se_length(deltas)
    return bits.reshape(qp.shape)


def encode_frame(
    frame: Frame,
    reference: Optional[Frame],
    qp_map,
    *,
    search_radius: int = DEFAULT_SEARCH_RADIUS,
) -> EncodedFrame:
    """Encode one frame; a reference makes it a P-frame, none an I-frame."""
    qp = _validate_qp_map(qp_map, frame.mb_shape)
    x = frame.samples.astype(np.float64)
    mbh, mbw = frame.mb_shape
    xb = to_blocks(x)

    intra_pred = np.rint(xb.mean(axis=(2, 3)))
    intra_sad = np.abs(xb - intra_pred[:, :, None, None]).sum(axis=(2, 3))

    if reference is None:
        frame_type = "I"
        mv = np.zeros((mbh, mbw, 2), dtype=np.int64)
        use_intra = np.ones((mbh, mbw), dtype=bool)
        pred = np.broadcast_to(intra_pred[:, :, None, None], xb.shape)
    else:
        if reference.samples.shape != frame.samples.shape:
            raise CodecError(
                f"reference shape {reference.samples.shape} differs from frame {frame.samples.shape}"
            )
        frame_type = "P"
        mv, inter_sad, inter_pred = motion_search(frame.samples, reference.samples, search_radius)
        use_intra = intra_sad < inter_sad
        mv = np.where(use_intra[..., None], 0, mv)
        pred = np.where(use_intra[:, :, None, None], intra_pred[:, :, None, None], inter_pred)

    step = qp_to_step(qp)[:, :, None, None, None, None]
    resid = (xb - pred).reshape(mbh, mbw, 2, SUB, 2, SUB).swapaxes(3, 4)
    levels = quantize(dct8(resid), step)
    coef_bits = estimate_bits_batch(levels).sum(axis=(2, 3))

    nonzero = np.any(levels != 0, axis=(2, 3, 4, 5))
    if frame_type == "I":
        skip = np.zeros((mbh, mbw), dtype=bool)
        mode_bits = INTRA_DC_BITS * np.ones((mbh, mbw), dtype=np.int64)
        mv_bits = np.zeros((mbh, mbw), dtype=np.int64)
    else:
        skip = ~use_intra & ~nonzero & np.all(mv == 0, axis=-1)
        mv_bits = np.where(use_intra, 0, se_length(mv[..., 0]) + se_length(mv[..., 1]))
        # skip flag + intra/inter flag, plus the DC value for intra blocks
        mode_bits = 2 + np.where(use_intra, INTRA_DC_BITS, 0)
    coded = ~skip
    qp_bits = _qp_delta_bits(qp, coded)
    block_bits = np.where(skip, 1, mode_bits + mv_bits + qp_bits + coef_bits).astype(np.int64)
    mv_bits = np.where(skip, 0, mv_bits)
    coef_bits = np.where(skip, 0, coef_bits)

    rec_res = idct8(dequantize(levels, step)).swapaxes(3, 4).reshape(mbh, mbw, MB, MB)
    recon = np.clip(np.rint(pred + rec_res), 0, 255).astype(np.uint8)

    mb_types = np.where(use_intra, MB_INTRA, np.where(skip, MB_SKIP, MB_INTER))
    return EncodedFrame(
        total_bits=int(block_bits.sum()) + HEADER_BITS,
        per_block_bits=block_bits,
        reconstruction=Frame(from_blocks(recon), frame.frame_index),
        frame_type=frame_type,
        qp_map=qp,
        mb_types=mb_types,
        motion_vectors=mv,
        motion_bits=int(mv_bits.sum()),
        coef_bits=int(coef_bits.sum()),
    )


# -- statistics -----------------------------------------------------------------


def ssim_proxy(raw: Frame, recon: Frame) -> float:
    """Mean per-MB structure/contrast term 2cov/(var_x+var_y), stabilized."""
    c2 = (0.03 * 255) ** 2
    a = to_blocks(raw.samples.astype(np.float64))
    b = to_blocks(recon.samples.astype(np.float64))
    da = a - a.mean(axis=(2, 3), keepdims=True)
    db = b - b.mean(axis=(2, 3), keepdims=True)
    cov = (da * db).mean(axis=(2, 3))
    return float(np.mean((2 * cov + c2) / ((da**2).mean(axis=(2, 3)) + (db**2).mean(axis=(2, 3)) + c2)))


def raw_block_features(frame: Frame, lookahead: Sequence[Frame], beta: float = 0.5) -> np.ndarray:
    """Unnormalized (energy, intra cost, propagate cost) planes."""
    x = frame.samples.astype(np.float64)
    xb = to_blocks(x)
    energy = xb.var(axis=(2, 3)) * MB * MB
    intra = np.abs(xb - np.rint(xb.mean(axis=(2, 3)))[:, :, None, None]).sum(axis=(2, 3))
    prop = np.zeros(frame.mb_shape)
    for k, nxt in enumerate(lookahead):
        prop += beta**k * block_sum(np.abs(nxt.samples.astype(np.float64) - x))
    return np.stack([energy, intra, prop])


def normalize_plane(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant plane keeps its value clipped to [0, 1]."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        return (plane - lo) / (hi - lo)
    return np.clip(plane, 0.0, 1.0) * np.ones_like(plane)


def frame_complexity(frame: Frame, lookahead: Sequence[Frame]) -> float:
    """Mean absolute difference between the next lookahead frame and this one."""
    if not lookahead:
        return 0.0
    return float(np.mean(np.abs(lookahead[0].samples.astype(np.float64) - frame.samples)))


def assemble_stats(
    raw_planes: np.ndarray,
    *,
    baseline_qp: int,
    frame_index: int,
    frame_type: str,
    complexity: float,
    progress: EncodeProgress,
) -> EncoderStats:
    n = max(progress.stream_length, 1)
    g = np.array(
        [
            baseline_qp,
            frame_index,
            progress.bits_so_far,
            progress.last_frame_qp,
            progress.last_avg_qp,
            *progress.frac,
            progress.psnr,
            progress.ssim_proxy,
            progress.motion_bits_frac,
            progress.coef_bits_frac,
            frame_index / n,
            progress.bitrate_error,
            1.0 if frame_type == "I" else 0.0,
            complexity,
        ],
        dtype=np.float64,
    )
    inv_q = np.full(raw_planes.shape[1:], 1.0 / qp_to_step(int(baseline_qp)))
    planes = np.stack([normalize_plane(p) for p in (*raw_planes, inv_q)])
    return EncoderStats(g, planes)


def compute_stats(
    frame: Frame,
    lookahead: Sequence[Frame] = (),
    *,
    baseline_qp: int,
    stream_length: int,
    frame_type: str = "P",
    progress: Optional[EncodeProgress] = None,
    beta: float = 0.5,
) -> EncoderStats:
    """State for the frame about to be encoded, given up to L lookahead frames."""
    if progress is None:
        progress = EncodeProgress(stream_length=stream_length)
    return assemble_stats(
        raw_block_features(frame, lookahead, beta),
        baseline_qp=baseline_qp,
        frame_index=frame.frame_index,
        frame_type=frame_type,
        complexity=frame_complexity(frame, lookahead),
        progress=progress,
    )


def update_progress(progress: EncodeProgress, raw: Frame, enc: EncodedFrame, frame_qp: int, fps: float, target_bitrate: float) -> None:
    """Fold one encoded frame into the running-encode statistics."""
    progress.frames_encoded += 1
    progress.bits_so_far += enc.total_bits
    progress.last_frame_qp = float(frame_qp)
    progress.last_avg_qp = float(enc.qp_map.mean())
    n = enc.mb_types.size
    progress.frac = tuple(float(np.count_nonzero(enc.mb_types == t)) / n for t in (MB_INTRA, MB_INTER, MB_SKIP))
    progress.psnr = psnr(raw.samples, enc.reconstruction.samples)
    progress.ssim_proxy = ssim_proxy(raw, enc.reconstruction)
    progress.motion_bits_frac = enc.motion_bits / enc.total_bits
    progress.coef_bits_frac = enc.coef_bits / enc.total_bits
    avg_rate = progress.bits_so_far * fps / progress.frames_encoded
    progress.bitrate_error = float(np.log(avg_rate / target_bitrate))
