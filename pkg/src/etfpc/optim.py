"""Adam over a fixed list of arrays.

The constrained-rotation head and the extractor both train with this;
per-coordinate step scaling is what lets the prescribed 1e-3 rate move a
small rectifier network.  Deterministic: state updates are elementwise in
a fixed tensor order.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, shapes, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, grads, lr: float) -> list[np.ndarray]:
        """Consume one gradient list; return the deltas to subtract."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        deltas = []
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            deltas.append(lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))
        return deltas
