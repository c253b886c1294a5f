"""Adam with optional coordinate masking.

When a mask is supplied, both the update and the moment accumulators touch
only the masked coordinates, so unmasked ones stay bitwise constant.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Adam"]


class Adam:
    def __init__(self, n_params: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 mask: np.ndarray | None = None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.idx = None if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        if self.idx is not None:
            g = grad[self.idx]
            m = self.m[self.idx] = self.b1 * self.m[self.idx] + (1 - self.b1) * g
            v = self.v[self.idx] = self.b2 * self.v[self.idx] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[self.idx] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        else:
            self.m = self.b1 * self.m + (1 - self.b1) * grad
            self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
            mhat = self.m / (1 - self.b1**self.t)
            vhat = self.v / (1 - self.b2**self.t)
            params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
