"""Bag-level objective: binary cross-entropy plus spectral decoupling."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class LossConfig:
    lambda_sd: float = 0.01
    label_smoothing: float = 0.0
    eps_clip: float = 1e-7

    def __post_init__(self):
        if self.lambda_sd < 0:
            raise ConfigError("lambda_sd must be non-negative")
        if not 0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must be in [0, 0.5)")
        if not 0 < self.eps_clip < 0.5:
            raise ConfigError("eps_clip must be in (0, 0.5)")

    def to_dict(self):
        return asdict(self)


def _clamp(y_hat, eps):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    return np.clip(y_hat, eps, 1 - eps), (y_hat > eps) & (y_hat < 1 - eps)


def smooth_targets(y, s: float) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * (1 - s) + s / 2


def bce_loss(y_hat, y, cfg: LossConfig | None = None) -> float:
    """Mean over labels of the binary cross-entropy."""
    cfg = cfg or LossConfig()
    p, _ = _clamp(y_hat, cfg.eps_clip)
    t = smooth_targets(y, cfg.label_smoothing)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))


def spectral_decoupling(z, lambda_sd: float) -> float:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * lambda_sd * float(np.dot(z.ravel(), z.ravel()))


def total_loss(y_hat, z, y, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return bce_loss(y_hat, y, cfg) + spectral_decoupling(z, cfg.lambda_sd)


def loss_and_grad(y_hat, y, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Total loss with ``z = logit(y_hat)`` and its derivative in ``y_hat``.

    Clamped components get zero gradient.
    """
    cfg = cfg or LossConfig()
    p, inside = _clamp(y_hat, cfg.eps_clip)
    t = smooth_targets(y, cfg.label_smoothing)
    z = np.log(p) - np.log1p(-p)
    loss = float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p)))) + spectral_decoupling(z, cfg.lambda_sd)
    pq = p * (1 - p)
    grad = (p - t) / pq / p.size + cfg.lambda_sd * z / pq
    return loss, np.where(inside, grad, 0.0)
