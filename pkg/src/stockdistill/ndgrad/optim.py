"""Adaptive-moment gradient descent over named parameter dicts."""
from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Standard first/second-moment adaptive update with bias correction.

    Parameters are replaced, never mutated in place, so snapshots taken via
    ``{k: v.copy() ...}`` stay valid.
    """

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.params = params
        self.lr = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            self.params[name] = self.params[name] - self.lr * update
