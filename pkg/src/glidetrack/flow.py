"""Dense Horn-Schunck optical flow and the per-frame flow stacks.

The smoothness term couples 4-neighbours inside the image only (Neumann
boundary). Each iteration minimises the energy exactly for every pixel with
its neighbours frozen (block Jacobi). For this energy that update can never
increase it, and it treats both scan directions alike, so mirroring the
input mirrors the flow.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, Frame, ImageSequence

# intensities are rescaled to 0..255 so the usual alpha values apply
INTENSITY_SCALE = 255.0


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    energies: tuple[float, ...] = ()

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise DataError("u and v must share one shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise DataError("non-finite flow")

    @property
    def shape(self):
        return self.u.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v])


def to_gray(x) -> np.ndarray:
    """Frame / RGB array / gray array -> float gray array (channel mean)."""
    if isinstance(x, Frame):
        return x.gray
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3:
        return a.mean(axis=2)
    return a


def derivatives(a: np.ndarray, b: np.ndarray):
    """Spatial derivatives of the mean image (central differences, edge padding) and b - a."""
    m = 0.5 * (a + b)
    p = np.pad(m, 1, mode="edge")
    ix = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    iy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    it = b - a
    return ix, iy, it


def _neighbour_sum(f: np.ndarray) -> np.ndarray:
    s = np.zeros_like(f)
    s[1:, :] += f[:-1, :]
    s[:-1, :] += f[1:, :]
    s[:, 1:] += f[:, :-1]
    s[:, :-1] += f[:, 1:]
    return s


def _neighbour_count(shape) -> np.ndarray:
    return _neighbour_sum(np.ones(shape))


def hs_energy(u, v, ix, iy, it, alpha: float) -> float:
    data = ((ix * u + iy * v + it) ** 2).sum()
    smooth = (np.diff(u, axis=0) ** 2).sum() + (np.diff(u, axis=1) ** 2).sum() \
        + (np.diff(v, axis=0) ** 2).sum() + (np.diff(v, axis=1) ** 2).sum()
    return float(data + alpha ** 2 * smooth)


def horn_schunck(a, b, alpha: float = 10.0, iters: int = 200, record_energy: bool = False) -> FlowField:
    """Flow from gray frame ``a`` to ``b`` (pixels per frame, u along x / columns)."""
    a = to_gray(a) * INTENSITY_SCALE
    b = to_gray(b) * INTENSITY_SCALE
    if a.shape != b.shape:
        raise DataError(f"frame size mismatch {a.shape} vs {b.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ix, iy, it = derivatives(a, b)
    n = _neighbour_count(a.shape)
    denom = alpha ** 2 * n + ix ** 2 + iy ** 2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    energies = [hs_energy(u, v, ix, iy, it, alpha)] if record_energy else []
    residual = 0.0
    for _ in range(iters):
        ubar = _neighbour_sum(u) / n
        vbar = _neighbour_sum(v) / n
        r = (ix * ubar + iy * vbar + it) / denom
        un = ubar - ix * r
        vn = vbar - iy * r
        residual = float(max(np.abs(un - u).max(), np.abs(vn - v).max()))
        u, v = un, vn
        if record_energy:
            energies.append(hs_energy(u, v, ix, iy, it, alpha))
    return FlowField(u, v, residual, iters, tuple(energies))


class FlowCache:
    """One ``<key>.bin`` (float64 LE, u then v, row-major) plus ``<key>.json`` per frame pair."""

    def __init__(self, directory: str | Path | None):
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls) -> "FlowCache":
        return cls(os.environ.get("GLIDETRACK_CACHE") or None)

    @staticmethod
    def key(a: np.ndarray, b: np.ndarray, alpha: float, iters: int) -> str:
        h = hashlib.sha256()
        for arr in (a, b):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{arr.shape}|{alpha!r}|{iters}".encode())
        return h.hexdigest()[:32]

    def get(self, key: str) -> FlowField | None:
        if not self.dir:
            return None
        meta_p, bin_p = self.dir / f"{key}.json", self.dir / f"{key}.bin"
        if not (meta_p.exists() and bin_p.exists()):
            return None
        meta = json.loads(meta_p.read_text())
        h, w = meta["height"], meta["width"]
        raw = np.frombuffer(bin_p.read_bytes(), dtype="<f8")
        if raw.size != 2 * h * w:
            return None
        return FlowField(raw[:h * w].reshape(h, w).copy(), raw[h * w:].reshape(h, w).copy(),
                         meta.get("residual", 0.0), meta.get("iterations", 0))

    def put(self, key: str, flow: FlowField) -> None:
        if not self.dir:
            return
        h, w = flow.shape
        data = np.concatenate([flow.u.ravel(), flow.v.ravel()]).astype("<f8")
        (self.dir / f"{key}.bin").write_bytes(data.tobytes())
        (self.dir / f"{key}.json").write_text(json.dumps(
            {"height": h, "width": w, "dtype": "float64-le", "order": "u,v row-major",
             "residual": flow.residual, "iterations": flow.iterations}))


def pair_flow(a: Frame, b: Frame, alpha: float = 10.0, iters: int = 200, cache: FlowCache | None = None) -> FlowField:
    if a is b or np.array_equal(a.data, b.data):
        z = np.zeros(a.shape)
        return FlowField(z, z.copy())
    if cache is not None and cache.dir:
        k = FlowCache.key(a.data, b.data, alpha, iters)
        hit = cache.get(k)
        if hit is not None:
            return hit
        f = horn_schunck(a, b, alpha, iters)
        cache.put(k, f)
        return f
    return horn_schunck(a, b, alpha, iters)


def window_indices(t: int, L: int, T: int) -> list[int]:
    """Frame indices t-L..t+L, clamped to the sequence by repeating the boundary frames."""
    return [min(max(i, 0), T - 1) for i in range(t - L, t + L + 1)]


def flow_stack(seq: ImageSequence, t: int, L: int, alpha: float = 10.0, iters: int = 200,
               cache: FlowCache | None = None, pair_flows: dict | None = None) -> list[FlowField]:
    """The 2L flows between consecutive frames of the (clamped) window around t, ascending in time."""
    if L < 1:
        raise ValueError("L must be >= 1")
    idx = window_indices(t, L, len(seq))
    out = []
    for i, j in zip(idx[:-1], idx[1:]):
        if pair_flows is not None and (i, j) in pair_flows:
            out.append(pair_flows[(i, j)])
            continue
        f = pair_flow(seq[i], seq[j], alpha, iters, cache)
        if pair_flows is not None:
            pair_flows[(i, j)] = f
        out.append(f)
    return out


def sequence_flows(seq: ImageSequence, alpha: float = 10.0, iters: int = 200,
                   cache: FlowCache | None = None) -> dict:
    """Flows for every consecutive pair, keyed (t, t+1); reused by all windows."""
    return {(t, t + 1): pair_flow(seq[t], seq[t + 1], alpha, iters, cache) for t in range(len(seq) - 1)}
