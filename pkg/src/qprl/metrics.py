"""Pixel-domain quality metrics shared by the codec statistics and evaluation."""

import numpy as np

PEAK = 255.0
PSNR_CAP = 100.0
_MSE_FLOOR = PEAK**2 * 1e-10


def mse(raw, recon) -> float:
    a = np.asarray(raw, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float) -> float:
    if value < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(PEAK**2 / value))


def psnr(raw, recon) -> float:
    """PSNR in dB for 8-bit data, capped at 100 dB."""
    raw = getattr(raw, "samples", raw)
    recon = getattr(recon, "samples", recon)
    return psnr_from_mse(mse(raw, recon))
