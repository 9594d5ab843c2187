"""Differentiable operations. Image tensors use (N, C, H, W) layout."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor

_make = Tensor._make


def _scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _pair(a, b, opname):
    """Coerce operands; shapes must match unless one side is a plain scalar."""
    if _scalar(b):
        return as_tensor(a), float(b), "rscalar"
    if _scalar(a):
        return float(a), as_tensor(b), "lscalar"
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape} (use broadcast_to)")
    return a, b, "tensor"


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b, kind = _pair(a, b, "add")
    if kind == "rscalar":
        return _make(a.data + b, (a,), lambda g: (g,))
    if kind == "lscalar":
        return _make(a + b.data, (b,), lambda g: (g,))
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b, kind = _pair(a, b, "sub")
    if kind == "rscalar":
        return _make(a.data - b, (a,), lambda g: (g,))
    if kind == "lscalar":
        return _make(a - b.data, (b,), lambda g: (-g,))
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b, kind = _pair(a, b, "mul")
    if kind == "rscalar":
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if kind == "lscalar":
        return _make(a * b.data, (b,), lambda g: (g * a,))
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b, kind = _pair(a, b, "div")
    if kind == "rscalar":
        return _make(a.data / b, (a,), lambda g: (g / b,))
    if kind == "lscalar":
        bd = b.data
        return _make(a / bd, (b,), lambda g: (-g * a / (bd * bd),))
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"minimum: shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    src = x.shape

    def back(g):
        extra = g.ndim - len(src)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), back)


# -- nonlinearities -----------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back)


# -- reductions and shape ops --------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make(np.array(x.data[idx]), (x,), back)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(v) for v in xs]
    sizes = [v.shape[axis] for v in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([v.data for v in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(v) for v in xs]
    n = len(xs)
    return _make(np.stack([v.data for v in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def cummin(x, axis: int = -1) -> Tensor:
    """Running minimum; the gradient goes to the (first) element holding it."""
    return _running(x, axis, np.less)


def cummax(x, axis: int = -1) -> Tensor:
    return _running(x, axis, np.greater)


def _running(x, axis, better):
    x = as_tensor(x)
    d = np.moveaxis(x.data, axis, -1)
    n = d.shape[-1]
    src = np.zeros(d.shape, dtype=np.int64)
    cur = d[..., 0].copy()
    arg = np.zeros(d.shape[:-1], dtype=np.int64)
    out = np.empty_like(d)
    out[..., 0] = cur
    for i in range(1, n):
        take = better(d[..., i], cur)
        cur = np.where(take, d[..., i], cur)
        arg = np.where(take, i, arg)
        out[..., i] = cur
        src[..., i] = arg
    out = np.moveaxis(out, -1, axis)

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        res = np.zeros(gm.shape)
        flat_res = res.reshape(-1, n)
        flat_g = gm.reshape(-1, n)
        flat_src = src.reshape(-1, n)
        rows = np.arange(flat_res.shape[0])[:, None]
        np.add.at(flat_res, (np.broadcast_to(rows, flat_src.shape), flat_src), flat_g)
        return (np.moveaxis(res, -1, axis),)

    return _make(out, (x,), back)


# -- linear algebra ------------------------------------------------------------

def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """numpy matmul semantics for >=2-D operands (leading dims may broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """x (N, in) @ w (in, out) + b (out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: cannot apply {w.shape} to {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape}")
    return _make(out + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def _columns(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Shifted copies of a padded (N, C, H+k-1, W+k-1) input as a (k*k*C, N*H*W) matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((k * k, c, n, h, w))
    for dy in range(k):
        for dx in range(k):
            cols[dy * k + dx] = xt[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(k * k * c, n * h * w)


def conv2d(x, w, b=None) -> Tensor:
    """'Same'-padded stride-1 convolution; x (N, C, H, W), w (F, C, k, k) with odd k."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ValueError(f"conv2d: cannot apply {w.shape} to {x.shape}")
    n, c, h, wd_ = x.shape
    f, k = w.shape[0], w.shape[2]
    p = k // 2
    xd = x.data
    # weight matrix with columns ordered (dy, dx, c) to match _columns
    wm = w.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    if k == 1:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wd_)
    else:
        cols = _columns(np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))), k, h, wd_)
    out = (wm @ cols).reshape(f, n, h, wd_).transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    if b is not None:
        out = out + parents[2].data[None, :, None, None]

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, n * h * wd_)
        gw = (gm @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2)
        gc = (wm.T @ gm).reshape(k * k, c, n, h, wd_)
        if k == 1:
            gx = gc[0].transpose(1, 0, 2, 3)
        else:
            gxp = np.zeros((c, n, h + 2 * p, wd_ + 2 * p))
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + h, dx:dx + wd_] += gc[dy * k + dx]
            gx = gxp[:, :, p:p + h, p:p + wd_].transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, back)


def maxpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the smallest flat index."""
    x = as_tensor(x)
    if k == 1:
        return x
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), back)


def upsample(x, k: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor along H and W."""
    x = as_tensor(x)
    if k == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),))
