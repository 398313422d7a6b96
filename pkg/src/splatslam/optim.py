"""Adam with per-group learning rates and row-congruent state."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a dict of named numpy arrays.

    State rows follow the leading axis of every parameter so that the owner
    can append or drop rows (Gaussians) and keep the moments aligned.
    """

    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def init_state(self, params: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name in self.lrs:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Update ``params`` in place and return the applied deltas."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        deltas = {}
        for name, g in grads.items():
            if name not in self.lrs:
                continue
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lrs[name]
            delta = -(lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p += delta
            deltas[name] = delta
        return deltas

    def keep_rows(self, keep: np.ndarray) -> None:
        for name in list(self.m):
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def append_rows(self, count: int) -> None:
        for name in list(self.m):
            m = self.m[name]
            pad = np.zeros((count,) + m.shape[1:])
            self.m[name] = np.concatenate([m, pad])
            self.v[name] = np.concatenate([self.v[name], pad.copy()])

    def copy_rows(self, src: np.ndarray) -> None:
        """Append copies of the moments of rows ``src``."""
        for name in list(self.m):
            self.m[name] = np.concatenate([self.m[name], self.m[name][src]])
            self.v[name] = np.concatenate([self.v[name], self.v[name][src]])

    def drop(self, name: str) -> None:
        self.lrs.pop(name, None)
        self.m.pop(name, None)
        self.v.pop(name, None)

    def rows(self) -> dict[str, int]:
        return {name: len(m) for name, m in self.m.items()}


class PoseAdam:
    """Adam on a 6-dim left-perturbation tangent, separate translation/rotation rates."""

    def __init__(self, lr_translation: float, lr_rotation: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.lr = np.array([lr_translation] * 3 + [lr_rotation] * 3)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the tangent step for gradient ``grad`` at tau = 0."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
