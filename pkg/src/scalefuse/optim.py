"""Adam with decoupled weight decay (constant learning rate)."""

from __future__ import annotations

from typing import Dict, Iterable, List, Tuple

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
