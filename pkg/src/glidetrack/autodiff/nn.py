"""Parameter containers and the recurrent cell."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Tensor


class Params(OrderedDict):
    """Ordered name -> Tensor mapping of trainable leaves."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        for k, t in self.items():
            if k not in state:
                if strict:
                    raise KeyError(f"missing parameter {k}")
                continue
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.shape}")
            t.data = v.copy()
        if strict:
            extra = set(state) - set(self)
            if extra:
                raise KeyError(f"unexpected parameters {sorted(extra)}")

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3) -> np.ndarray:
    std = math.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM update. Gate blocks in ``wx``/``wh``/``b`` are ordered i, f, g, o."""
    if h.shape != c.shape or x.shape[0] != h.shape[0] or wx.shape[0] != x.shape[1]:
        raise ValueError(f"lstm_cell: inconsistent shapes x{x.shape} h{h.shape} c{c.shape} wx{wx.shape}")
    n = h.shape[1]
    if wx.shape[1] != 4 * n or wh.shape != (n, 4 * n):
        raise ValueError("lstm_cell: weight shapes do not match hidden size")
    z = ops.linear(x, wx, b) + ops.linear(h, wh)
    i = ops.sigmoid(z[:, 0:n])
    f = ops.sigmoid(z[:, n:2 * n])
    g = ops.tanh(z[:, 2 * n:3 * n])
    o = ops.sigmoid(z[:, 3 * n:4 * n])
    c2 = f * c + i * g
    h2 = o * ops.tanh(c2)
    return h2, c2


class LSTMCell:
    def __init__(self, params: Params, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.wx = params.add(f"{prefix}.wx", glorot(rng, n_in, 4 * n_hidden, (n_in, 4 * n_hidden)))
        self.wh = params.add(f"{prefix}.wh", glorot(rng, n_hidden, 4 * n_hidden, (n_hidden, 4 * n_hidden)))
        b = np.zeros(4 * n_hidden)
        b[n_hidden:2 * n_hidden] = 1.0  # forget-gate bias
        self.b = params.add(f"{prefix}.b", b)

    def __call__(self, x, h, c):
        return lstm_cell(x, h, c, self.wx, self.wh, self.b)


class Dense:
    def __init__(self, params: Params, prefix: str, n_in: int, n_out: int, rng: np.random.Generator,
                 scale: float = 1.0):
        self.w = params.add(f"{prefix}.w", scale * glorot(rng, n_in, n_out, (n_in, n_out)))
        self.b = params.add(f"{prefix}.b", np.zeros(n_out))

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class Conv:
    def __init__(self, params: Params, prefix: str, cin: int, cout: int, rng: np.random.Generator, k: int = 3):
        self.w = params.add(f"{prefix}.w", he_conv(rng, cout, cin, k))
        self.b = params.add(f"{prefix}.b", np.zeros(cout))

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b)
