"""Histogram-based fusion quality metrics: entropy, MI and gradient-feature MI."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import UsageError
from .saliency import quantize

# |sobel_x| and |sobel_y| are each bounded by 4 on [0, 1] images
_SOBEL_MAX = 4.0 * np.sqrt(2.0)


@dataclass(frozen=True)
class MetricReport:
    pair_id: str
    mi_x: float
    mi_y: float
    mi_total: float
    fmi: float
    entropy_u: float

    def row(self) -> dict:
        return asdict(self)


CSV_COLUMNS = ("pair_id", "mi_x", "mi_y", "mi_total", "fmi", "entropy_u")


def _check(a: np.ndarray, b: np.ndarray | None = None) -> None:
    if a.size == 0:
        raise UsageError("metric of an empty image")
    if b is not None and a.shape != b.shape:
        raise UsageError(f"images differ in shape: {a.shape} vs {b.shape}")


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def joint_histogram(a, b, bins: int = 256) -> np.ndarray:
    qa = quantize(a, bins).ravel()
    qb = quantize(b, bins).ravel()
    counts = np.bincount(qa * bins + qb, minlength=bins * bins)
    return counts.reshape(bins, bins) / qa.size


def entropy(a, bins: int = 256) -> float:
    a = np.asarray(a, dtype=np.float64)
    _check(a)
    counts = np.bincount(quantize(a, bins).ravel(), minlength=bins)
    return _entropy_bits(counts / a.size)


def mutual_information(a, b, bins: int = 256) -> float:
    """I(a; b) in bits from the joint histogram of two images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    pab = joint_histogram(a, b, bins)
    pa = pab.sum(axis=1)
    pb = pab.sum(axis=0)
    nz = pab > 0
    outer = np.outer(pa, pb)
    mi = float((pab[nz] * np.log2(pab[nz] / outer[nz])).sum())
    return max(mi, 0.0)


def gradient_magnitude(img) -> np.ndarray:
    """Sobel gradient magnitude scaled into [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(img, axis=-1, mode="nearest")
    gy = ndimage.sobel(img, axis=-2, mode="nearest")
    return np.clip(np.hypot(gx, gy) / _SOBEL_MAX, 0.0, 1.0)


def _normalized_mi(gu: np.ndarray, gs: np.ndarray, bins: int) -> float:
    hu, hs = entropy(gu, bins), entropy(gs, bins)
    if hu == 0.0 or hs == 0.0:
        same = np.array_equal(quantize(gu, bins), quantize(gs, bins))
        return 1.0 if same else 0.0
    value = 2.0 * mutual_information(gu, gs, bins) / (hu + hs)
    return min(max(value, 0.0), 1.0)


def fmi(u, x, y, bins: int = 256) -> float:
    u, x, y = (np.asarray(v, dtype=np.float64) for v in (u, x, y))
    _check(u, x)
    _check(u, y)
    gu = gradient_magnitude(u)
    terms = [_normalized_mi(gu, gradient_magnitude(s), bins) for s in (x, y)]
    return float(np.mean(terms))


def report(pair_id: str, u, x, y, bins: int = 256) -> MetricReport:
    mi_x = mutual_information(u, x, bins)
    mi_y = mutual_information(u, y, bins)
    return MetricReport(
        pair_id=pair_id,
        mi_x=mi_x,
        mi_y=mi_y,
        mi_total=mi_x + mi_y,
        fmi=fmi(u, x, y, bins),
        entropy_u=entropy(u, bins),
    )
