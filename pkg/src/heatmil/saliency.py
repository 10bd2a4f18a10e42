"""Post-hoc gradient saliency (Grad-CAM style) on the projected features.

Used as the comparison baseline for the model's built-in heatmaps.
"""
from __future__ import annotations

import numpy as np

from .bags import BagOfPatches
from .model import ModelParams, backward_bag, forward_bag, stitch

DEGENERATE_SPAN = 1e-12


def gradcam_combine(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Rectified, gradient-weighted channel sum.

    ``features`` and ``grads`` are ``(N, K, h, w)``; channel weights are the
    mean gradient over all patches and positions.  Returns ``(N, h, w)``.
    """
    weights = grads.mean(axis=(0, 2, 3))
    return np.maximum(np.einsum("k,nkhw->nhw", weights, features), 0.0)


def normalize_minmax(values: np.ndarray, coverage: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale covered entries to [0, 1]; a flat map becomes zeros and is flagged."""
    out = np.zeros(values.shape, dtype=np.float64)
    v = values[coverage]
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < DEGENERATE_SPAN:
        return out, True
    out[coverage] = (v - lo) / (hi - lo)
    return out, False


def grad_cam_saliency(bag: BagOfPatches, params: ModelParams) -> tuple[np.ndarray, np.ndarray, list[bool]]:
    """Per-label saliency stitched onto the bag grid.

    Returns ``(maps, coverage, degenerate)`` with ``maps`` of shape
    ``(C, H, W)`` in [0, 1].
    """
    cfg = params.config
    pred, cache = forward_bag(bag, params, return_cache=True)
    maps, flags = [], []
    for c in range(cfg.num_labels):
        d_y = np.zeros(cfg.num_labels)
        d_y[c] = 1.0
        _, d_proj = backward_bag(cache, d_y, need_param_grads=False)
        sal = gradcam_combine(np.asarray(cache["proj"], dtype=np.float64), np.asarray(d_proj, dtype=np.float64))
        full, coverage = stitch(sal[:, None], cache["coords"])
        norm, degenerate = normalize_minmax(full[0], coverage)
        maps.append(norm)
        flags.append(degenerate)
    return np.stack(maps), pred.coverage, flags
