"""Adam with a staircase exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam", "staircase_lr"]


def staircase_lr(lr: float, t: int, decay_rate: float = 0.96, decay_steps: int = 50) -> float:
    """``lr * decay_rate ** floor(t / decay_steps)``."""
    return lr * decay_rate ** (t // decay_steps)


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a dict of named arrays.

    ``step`` advances the counter first, so the first update uses ``t = 1``.
    """

    def __init__(self, lr=3e-4, decay_rate=0.96, decay_steps=50,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.decay_rate, self.decay_steps = lr, decay_rate, decay_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def current_lr(self, t=None) -> float:
        return staircase_lr(self.lr, self.t if t is None else t, self.decay_rate, self.decay_steps)

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place."""
        self.t += 1
        t = self.t
        lr = self.current_lr(t)
        b1, b2 = self.beta1, self.beta2
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "decay_rate": self.decay_rate,
                "decay_steps": self.decay_steps}
