"""Adam with global gradient-norm clipping."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads = [np.asarray(g.data if hasattr(g, "data") else g) for g in grads]
        total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(total):
            raise FloatingPointError("non-finite gradient")
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        return total

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

