"""Root-mean-square-propagation optimizer.

Per parameter p with gradient g:

    acc <- decay * acc + (1 - decay) * g^2
    p   <- p - lr * g / (sqrt(acc) + eps)

A parameter whose gradient is absent (it did not reach the loss) is treated
as having a zero gradient: its accumulator decays and its value is
unchanged.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN or infinity; the step was aborted."""


class RMSProp:
    def __init__(self, lr: float = 1e-3, decay: float = 0.9, eps: float = 1e-8):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {decay}")
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc: Dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, named_params: Dict[str, Tensor]) -> None:
        """Apply one update. Raises NonFiniteGradient (naming the parameter)
        before touching anything if any gradient is non-finite."""
        grads: Dict[str, Optional[np.ndarray]] = {}
        for name in sorted(named_params):
            g = named_params[name].grad
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            grads[name] = g
        for name in sorted(named_params):
            p = named_params[name]
            acc = self.acc.get(name)
            if acc is None:
                acc = self.acc[name] = np.zeros_like(p.data)
            g = grads[name]
            acc *= self.decay
            if g is None:
                continue
            acc += (1.0 - self.decay) * (g * g)
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)
        self.steps += 1
