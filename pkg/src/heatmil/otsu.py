"""Histogram Otsu thresholding and the masking step built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_RANGE = 1e-9


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    intra_class_variance: float
    degenerate: bool


def bin_indices(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    """Histogram bin of each value over ``[lo, hi]``; ``hi`` falls in the last bin."""
    idx = np.floor((values - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def otsu_threshold(values, bins: int = 256) -> OtsuResult:
    """Threshold minimizing the weighted within-class variance.

    Candidates are the ``bins - 1`` interior bin boundaries of a histogram
    spanning ``[min, max]``.  Per-bin sums of values and squares are kept, so
    the variance of each split is exact rather than estimated from bin
    centres.  When several consecutive boundaries realize the same (minimal)
    split, the middle one is returned.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("otsu_threshold needs at least one value")
    if bins < 2:
        raise ValueError("otsu_threshold needs at least two bins")
    if not np.all(np.isfinite(v)):
        raise ValueError("otsu_threshold values must be finite")
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < DEGENERATE_RANGE:
        return OtsuResult(lo, float(v.var()), True)

    idx = bin_indices(v, bins, lo, hi)
    cnt = np.bincount(idx, minlength=bins).astype(np.float64)
    s1 = np.bincount(idx, weights=v, minlength=bins)
    s2 = np.bincount(idx, weights=v * v, minlength=bins)
    # split k puts bins [0, k) below the boundary, k = 1 .. bins-1
    n0 = np.cumsum(cnt)[:-1]
    a1 = np.cumsum(s1)[:-1]
    a2 = np.cumsum(s2)[:-1]
    n1 = v.size - n0
    b1 = s1.sum() - a1
    b2 = s2.sum() - a2
    # n * sigma_w^2 = sum of within-class squared deviations
    ssw = (a2 - a1 * a1 / n0) + (b2 - b1 * b1 / n1)
    ssw = np.maximum(ssw, 0.0)
    best = float(ssw.min())
    tol = 1e-12 * max(best, float(s2.sum() - s1.sum() ** 2 / v.size), 1e-300)
    k0 = int(np.argmax(ssw <= best + tol))
    k1 = k0
    # consecutive boundaries separated by empty bins give the identical split
    while k1 + 1 < ssw.size and cnt[k1 + 1] == 0:
        k1 += 1
    k = (k0 + k1) // 2 + 1
    threshold = lo + k * (hi - lo) / bins
    return OtsuResult(float(threshold), float(ssw[k - 1] / v.size), False)


def within_class_variance(values, threshold: float) -> float:
    """Weighted within-class variance of the split ``values <= t`` / ``values > t``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    total = 0.0
    for part in (v[v <= threshold], v[v > threshold]):
        if part.size:
            total += part.size * part.var()
    return total / v.size


def otsu_mask(values: np.ndarray, bins: int = 256) -> tuple[np.ndarray, OtsuResult]:
    """Boolean keep-mask for ``values`` under the Otsu rule.

    A degenerate (near-constant) input keeps everything.
    """
    res = otsu_threshold(values, bins)
    if res.degenerate:
        return np.ones(np.shape(values), dtype=bool), res
    return np.asarray(values) > res.threshold, res


def apply_mask(h: np.ndarray, threshold: float, degenerate: bool = False) -> np.ndarray:
    """Zero every entry not strictly above ``threshold``."""
    if degenerate:
        return h.copy()
    return np.where(h > threshold, h, 0).astype(h.dtype, copy=False)
