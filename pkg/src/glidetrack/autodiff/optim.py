"""In-place optimizers. Each step consumes the gradients and zeroes them."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


def _tensors(params) -> list[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


def sgd_step(params, lr: float) -> None:
    for p in _tensors(params):
        if p.grad is None:
            continue
        p.data = p.data - lr * p.grad
        p.grad = np.zeros_like(p.data)


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = _tensors(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            n = self.grad_norm()
            if n > self.clip_norm:
                scale = self.clip_norm / n
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = np.zeros_like(p.data)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              state: Adam | None = None) -> Adam:
    """Functional form; pass the returned state back in on the next call."""
    opt = state if state is not None else Adam(params, lr, beta1, beta2, eps)
    opt.lr = lr
    opt.step()
    return opt
