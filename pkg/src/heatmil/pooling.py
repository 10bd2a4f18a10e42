"""Global pooling operators that turn a heatmap channel into a probability.

Each operator returns ``(value, grad)`` where ``grad`` is the derivative of
the pooled value with respect to every input entry.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

LP_CLIP = 1e-6


def _flat(h) -> np.ndarray:
    v = np.asarray(h).ravel()
    if v.size == 0:
        raise ValueError("cannot pool an empty channel")
    return v


def smoothmax_pool(h, alpha: float) -> tuple[float, np.ndarray]:
    """Boltzmann-weighted mean ``sum h e^(a h) / sum e^(a h)``."""
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    v = _flat(h)
    w = np.exp(alpha * (v - v.max()))
    w /= w.sum()
    y = float(np.dot(w, v))
    grad = w * (1.0 + alpha * (v - y))
    return y, grad.reshape(np.shape(h))


def max_pool(h) -> tuple[float, np.ndarray]:
    """Maximum entry; the subgradient goes to the first maximizer (row-major)."""
    v = _flat(h)
    i = int(np.argmax(v))
    grad = np.zeros_like(v)
    grad[i] = 1.0
    return float(v[i]), grad.reshape(np.shape(h))


def lp_pool(h, p: float) -> tuple[float, np.ndarray]:
    """Power mean ``(mean h^p)^(1/p)`` clipped to ``[1e-6, 1 - 1e-6]``."""
    if p < 2:
        raise ConfigError(f"LP pooling needs p >= 2, got {p}")
    v = _flat(h)
    m = float(np.mean(v ** p))
    if m <= 0:
        return LP_CLIP, np.zeros(np.shape(h), dtype=v.dtype)
    y = m ** (1.0 / p)
    if y < LP_CLIP or y > 1 - LP_CLIP:
        return float(np.clip(y, LP_CLIP, 1 - LP_CLIP)), np.zeros(np.shape(h), dtype=v.dtype)
    grad = m ** (1.0 / p - 1.0) * v ** (p - 1) / v.size
    return y, grad.reshape(np.shape(h))


def pool(h, mode: str, alpha: float = 8.0, p: float = 2.0) -> tuple[float, np.ndarray]:
    if mode == "smoothmax":
        return smoothmax_pool(h, alpha)
    if mode == "max":
        return max_pool(h)
    if mode == "lp":
        return lp_pool(h, p)
    raise ConfigError(f"unknown pooling mode {mode!r}")
