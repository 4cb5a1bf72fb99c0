"""SGD with momentum and selective weight decay."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .nn import Param


class SgdOptimizer:
    """v <- momentum*v + (grad + wd*p); p <- p - lr*v.

    Weight decay skips parameters flagged decay=False (batch-norm scale and
    shift, prototypes). Parameters flagged unit_rows get their rows
    re-normalized after every update.
    """

    def __init__(self, params: Sequence[Param], momentum: float = 0.9, weight_decay: float = 5e-5):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, np.ndarray] = {
            p.name: np.zeros_like(p.value) for p in self.params
        }

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for p in self.params:
            g = grads[p.name]
            if g.shape != p.value.shape:
                raise ValueError(
                    f"{p.name}: gradient shape {g.shape} != parameter shape {p.value.shape}"
                )
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocities[p.name]
            v *= self.momentum
            v += g
            p.value -= lr * v
            if p.unit_rows:
                norms = np.linalg.norm(p.value, axis=1, keepdims=True)
                p.value /= np.maximum(norms, 1e-12)

    def load_velocities(self, tensors: Mapping[str, np.ndarray]) -> None:
        for name, v in self.velocities.items():
            v[...] = tensors[name]
