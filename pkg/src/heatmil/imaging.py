"""Bicubic upsampling and grayscale heatmap export."""
from __future__ import annotations

import numpy as np

from .formats import write_pgm

CATMULL_ROM_A = -0.5


def cubic_kernel(d: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    d = np.abs(d)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _resample_matrix(n: int, factor: int) -> np.ndarray:
    """``(n * factor, n)`` interpolation weights with edge replication.

    Output sample ``j`` sits at source coordinate ``(j + 0.5) / factor - 0.5``.
    """
    m = np.zeros((n * factor, n))
    x = (np.arange(n * factor) + 0.5) / factor - 0.5
    base = np.floor(x).astype(int)
    for tap in range(-1, 3):
        idx = base + tap
        wts = cubic_kernel(x - idx)
        np.add.at(m, (np.arange(n * factor), np.clip(idx, 0, n - 1)), wts)
    return m


def bicubic_upsample(field: np.ndarray, factor: int) -> np.ndarray:
    """Upsample a 2-D field by an integer factor with the Catmull-Rom kernel."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("bicubic_upsample expects a 2-D field")
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be an integer >= 1")
    if factor == 1:
        return field.copy()
    rows = _resample_matrix(field.shape[0], int(factor))
    cols = _resample_matrix(field.shape[1], int(factor))
    return rows @ field @ cols.T


def to_uint8(field: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding half away from zero; out-of-range values are clipped."""
    v = np.clip(np.asarray(field, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def render_heatmap(full: np.ndarray, label: int, factor: int = 1) -> np.ndarray:
    full = np.asarray(full)
    if not 0 <= label < full.shape[0]:
        raise IndexError(f"label {label} out of range for {full.shape[0]} channels")
    return to_uint8(bicubic_upsample(full[label], factor))


def export_heatmap(full: np.ndarray, label: int, factor: int, path) -> np.ndarray:
    """Write one heatmap channel as an 8-bit PGM, upsampled by ``factor``."""
    img = render_heatmap(full, label, factor)
    write_pgm(path, img)
    return img
