"""Adam and gradient utilities operating on ``name -> numpy array`` dicts."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        if set(grads) != set(self.params):
            missing = sorted(set(self.params) - set(grads))
            extra = sorted(set(grads) - set(self.params))
            raise KeyError(f"gradient names do not match parameters: missing={missing} extra={extra}")
        norm = global_norm(grads)
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        if self.lr == 0.0:
            return norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - step
        return norm


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def average_gradients(per_learner: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Arithmetic mean per parameter, reduced in fixed learner order."""
    if not per_learner:
        raise ValueError("no gradients to average")
    names = list(per_learner[0])
    for i, g in enumerate(per_learner[1:], start=1):
        if set(g) != set(names):
            missing = sorted(set(names) - set(g))
            extra = sorted(set(g) - set(names))
            raise KeyError(f"learner {i} gradient names differ: missing={missing} extra={extra}")
        for k in names:
            if g[k].shape != per_learner[0][k].shape:
                raise ValueError(f"learner {i} gradient {k} has shape {g[k].shape}")
    n = len(per_learner)
    out = {}
    for k in names:
        acc = np.array(per_learner[0][k], dtype=np.float64)
        for g in per_learner[1:]:
            acc = acc + g[k]
        out[k] = acc / n
    return out
