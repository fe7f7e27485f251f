"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from ..tensor import ParamStore


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, t: int | None = None) -> None:
        """Apply one update from the current ``.grad`` buffers; ``t`` is 1-based."""
        self.t = self.t + 1 if t is None else t
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step_size = self.lr / c1
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (step_size * m / denom).astype(p.data.dtype, copy=False)
