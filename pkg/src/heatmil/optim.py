"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .errors import TrainingError


class AdamW:
    def __init__(self, lr=1e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params):
        """Update every tensor of ``params`` in place from its ``grad`` buffer."""
        for name, pair in params.tensors.items():
            if not np.all(np.isfinite(pair.grad)):
                raise TrainingError(f"non-finite gradient for {name} at optimizer step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, pair in params.tensors.items():
            g = pair.grad
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w = pair.value
            if self.weight_decay:
                w *= 1 - self.lr * self.weight_decay
            w -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype)
