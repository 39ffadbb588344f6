"""Adam optimizer over named parameter dicts.

Parameters and gradients travel as ``dict[str, ndarray]`` (matching what
:meth:`vclab.autodiff.Graph.backward` returns), so this stays decoupled
from any particular model.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads`` (keys must match)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            params[name] -= scale * m / (np.sqrt(v) + self.eps)
