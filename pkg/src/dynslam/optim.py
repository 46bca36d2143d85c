"""First-order optimizer for dict-of-array parameter sets."""

import numpy as np


class Adam:
    """Classic Adam with bias correction; state keyed by parameter name.

    `step` mutates parameter arrays in place.  Separate instances are used
    for map parameters and pose vectors so learning rates stay independent.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}

    def step(self, items) -> None:
        """items: iterable of (name, param_array, grad_array)."""
        for name, p, g in items:
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def forget(self, name: str) -> None:
        """Drop state for a parameter (used when a pose anchor is re-centered)."""
        self._m.pop(name, None)
        self._v.pop(name, None)
        self._t.pop(name, None)
