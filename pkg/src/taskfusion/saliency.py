"""Histogram-contrast visual saliency and the saliency-weighted pseudo fusion.

Saliency of a pixel at quantized level ``l`` is ``sum_j hist[j] * |l - j|``,
max-normalized to [0, 1]. The pseudo fused image ``u_m = m1*x + m2*y`` serves
as the discriminator's reference sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class PseudoFusion:
    u_m: np.ndarray
    m1: np.ndarray
    m2: np.ndarray


def quantize(img: np.ndarray, bins: int) -> np.ndarray:
    """Uniform bins over [0, 1]; the last bin includes 1.0."""
    q = np.floor(np.asarray(img, dtype=np.float64) * bins).astype(np.int64)
    return np.clip(q, 0, bins - 1)


def vsm(img, bins: int = 256) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise UsageError("saliency of an empty image")
    if bins < 2:
        raise UsageError(f"bins must be >= 2, got {bins}")
    levels = quantize(img, bins)
    hist = np.bincount(levels.ravel(), minlength=bins).astype(np.float64)
    grid = np.arange(bins, dtype=np.float64)
    # contrast per level: O(bins^2), then a lookup per pixel
    per_level = np.abs(grid[:, None] - grid[None, :]) @ hist
    sal = per_level[levels]
    peak = sal.max()
    if peak <= 0:
        return np.full(img.shape, 0.5)
    return sal / peak


def pseudo_fusion(x, y, bins: int = 256) -> PseudoFusion:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise UsageError(f"pseudo_fusion: shapes {x.shape} and {y.shape} differ")
    return weights_to_fusion(x, y, vsm(x, bins), vsm(y, bins))


def weights_to_fusion(x, y, s_x, s_y) -> PseudoFusion:
    """Ratio-normalize two saliency maps into complementary weights."""
    total = s_x + s_y
    m1 = np.where(total > 0, s_x / np.where(total > 0, total, 1.0), 0.5)
    m2 = 1.0 - m1
    return PseudoFusion(u_m=m1 * x + m2 * y, m1=m1, m2=m2)
