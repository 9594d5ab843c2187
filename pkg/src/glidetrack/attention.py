"""Visual attention: tile features, the spatial LSTM loop and the Gaussian window.

Layout conventions: image tensors are (N, C, H, W). A window is described by
its centre and scale along rows and columns. The row filter bank ``f_row``
(H1 x H3) and the column filter bank ``f_col`` (W1 x W3) play the roles of
Fx and Fy in ``P = Fx^T G Fy``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Params, Tensor, ops
from .autodiff.nn import Conv, Dense, LSTMCell


@dataclass(frozen=True)
class AttentionConfig:
    in_channels: int = 8
    height: int = 64
    width: int = 64
    depths: tuple[int, ...] = (8, 16, 16)
    pools: tuple[int, ...] = (2, 2, 2)
    lstm_hidden: int = 32
    mlp_hidden: int = 5
    max_iters: int = 10
    tol: float = 1e-3
    out_h: int = 24
    out_w: int = 24
    sigma_min: float = 0.5
    sigma_max: float | None = None
    use_lstm: bool = True
    tile_coords: bool = True
    coord_channels: bool = True
    cover_bias: float | None = 4.0  # initial weight of the covered-tile penalty on A; None disables it

    def __post_init__(self):
        if len(self.depths) != len(self.pools):
            raise ValueError("depths and pools must have equal length")
        if not (self.out_h < self.height and self.out_w < self.width):
            raise ValueError("attended size must be smaller than the frame")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.height % self.total_pool or self.width % self.total_pool:
            raise ValueError("frame size must be divisible by the total pooling factor")

    @property
    def total_pool(self) -> int:
        return int(np.prod(self.pools))

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.total_pool, self.width // self.total_pool

    @property
    def feature_depth(self) -> int:
        return self.depths[-1]

    @property
    def smax(self) -> float:
        return self.sigma_max if self.sigma_max is not None else self.height / 2.0

    @classmethod
    def paper_geometry(cls, in_channels: int) -> "AttentionConfig":
        """The full-size network: 256x256 input, 8 conv layers, 8x8 tiles of depth 64."""
        return cls(in_channels=in_channels, height=256, width=256,
                   depths=(8, 8, 16, 16, 32, 32, 64, 64), pools=(1, 1, 2, 2, 1, 2, 2, 2),
                   out_h=64, out_w=64)


@dataclass
class GaussianWindow:
    """Window parameters (per batch sample) and the two filter banks."""

    mu_row: Tensor
    mu_col: Tensor
    sigma_row: Tensor
    sigma_col: Tensor
    f_row: Tensor  # (N, H1, H3)
    f_col: Tensor  # (N, W1, W3)
    stride_row: Tensor
    stride_col: Tensor

    @property
    def Fx(self) -> Tensor:
        return self.f_row

    @property
    def Fy(self) -> Tensor:
        return self.f_col

    def box(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Attention region as (row0, row1, col0, col1) = centre -/+ 2 sigma."""
        return (self.mu_row - 2.0 * self.sigma_row, self.mu_row + 2.0 * self.sigma_row,
                self.mu_col - 2.0 * self.sigma_col, self.mu_col + 2.0 * self.sigma_col)

    def numpy(self, i: int = 0) -> dict:
        return {"mu_row": float(self.mu_row.data[i]), "mu_col": float(self.mu_col.data[i]),
                "sigma_row": float(self.sigma_row.data[i]), "sigma_col": float(self.sigma_col.data[i])}


def filterbank(mu: Tensor, sigma: Tensor, n_in: int, n_out: int, stride: Tensor | float | None = None):
    """(N, n_in, n_out) bank of Gaussians, one per output sample, each column summing to 1.

    Column j is centred at ``mu + (j - (n_out - 1) / 2) * stride`` with
    ``stride = 4 sigma / n_out`` unless given, so the bank covers mu -/+ 2 sigma.
    Its spread is half a stride (and 2 sigma / n_out when the stride is forced).
    """
    n = mu.shape[0]
    if stride is None:
        stride = sigma * (4.0 / n_out)
    elif not isinstance(stride, Tensor):
        stride = Tensor(np.full(n, float(stride)))
    spread = sigma * (2.0 / n_out)
    offs = np.arange(n_out) - (n_out - 1) / 2.0
    centres = ops.broadcast_to(ops.reshape(mu, (n, 1)), (n, n_out)) \
        + ops.broadcast_to(ops.reshape(stride, (n, 1)), (n, n_out)) * Tensor(np.broadcast_to(offs, (n, n_out)))
    grid = Tensor(np.broadcast_to(np.arange(n_in, dtype=np.float64)[None, :, None], (n, n_in, n_out)))
    d = grid - ops.broadcast_to(ops.reshape(centres, (n, 1, n_out)), (n, n_in, n_out))
    inv = ops.broadcast_to(ops.reshape(1.0 / (spread * spread * 2.0), (n, 1, 1)), (n, n_in, n_out))
    return ops.softmax(-(d * d) * inv, axis=1), stride


def make_window(mu_row, mu_col, sigma_row, sigma_col, h1: int, w1: int, h3: int, w3: int,
                stride: float | None = None) -> GaussianWindow:
    as_t = lambda v: v if isinstance(v, Tensor) else Tensor(np.atleast_1d(np.asarray(v, dtype=np.float64)))
    mu_row, mu_col, sigma_row, sigma_col = map(as_t, (mu_row, mu_col, sigma_row, sigma_col))
    fr, sr = filterbank(mu_row, sigma_row, h1, h3, stride)
    fc, sc = filterbank(mu_col, sigma_col, w1, w3, stride)
    return GaussianWindow(mu_row, mu_col, sigma_row, sigma_col, fr, fc, sr, sc)


def apply_window(g: Tensor, w: GaussianWindow) -> Tensor:
    """P = Fx^T G Fy per channel: (N, C, H1, W1) -> (N, C, H3, W3)."""
    n, c, h1, w1 = g.shape
    if w.f_row.shape[:2] != (n, h1) or w.f_col.shape[:2] != (n, w1):
        raise ValueError(f"window banks {w.f_row.shape}/{w.f_col.shape} do not fit input {g.shape}")
    h3, w3 = w.f_row.shape[2], w.f_col.shape[2]
    frt = ops.reshape(ops.transpose(w.f_row, (0, 2, 1)), (n, 1, h3, h1))
    fc = ops.reshape(w.f_col, (n, 1, w1, w3))
    return ops.matmul(ops.matmul(frt, g), fc)


def unwarp(p_hat: Tensor, w: GaussianWindow, clip: bool = True) -> Tensor:
    """Place the (N, H3, W3) window prediction back on the (N, H1, W1) frame.

    The product with the column-normalised banks is rescaled by the two
    strides so that a constant patch maps to the same constant inside the window.
    """
    n, h3, w3 = p_hat.shape
    full = ops.matmul(ops.matmul(w.f_row, p_hat), ops.transpose(w.f_col, (0, 2, 1)))
    h1, w1 = full.shape[1:]
    scale = ops.broadcast_to(ops.reshape(w.stride_row * w.stride_col, (n, 1, 1)), (n, h1, w1))
    out = full * scale
    return ops.clip(out, 0.0, 1.0) if clip else out


CENTROID_EPS = 1e-3


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class AttentionNet:
    """CNN tiles -> spatial LSTM over tile contributions -> Gaussian window."""

    def __init__(self, cfg: AttentionConfig, params: Params, rng: np.random.Generator, prefix: str = "att"):
        self.cfg = cfg
        self.convs = []
        cin = cfg.in_channels + (2 if cfg.coord_channels else 0)
        for i, d in enumerate(cfg.depths):
            self.convs.append(Conv(params, f"{prefix}.conv{i}", cin, d, rng))
            cin = d
        h2, w2 = cfg.grid
        self.n_tiles = h2 * w2
        # with tile coordinates the readout also carries q * row and q * col,
        # i.e. attention-weighted centroids of every feature channel
        dq = cfg.feature_depth * 3 + 2 if cfg.tile_coords else cfg.feature_depth
        if cfg.use_lstm:
            self.lstm = LSTMCell(params, f"{prefix}.lstm", dq, cfg.lstm_hidden, rng)
            self.mlp1 = Dense(params, f"{prefix}.mlp1", cfg.lstm_hidden, cfg.mlp_hidden, rng)
            self.mlp2 = Dense(params, f"{prefix}.mlp2", cfg.mlp_hidden, self.n_tiles, rng)
            zdim = cfg.lstm_hidden
            self.cover = params.add(f"{prefix}.cover", [cfg.cover_bias]) if cfg.cover_bias is not None else None
        else:
            # CNN-only variant: the window comes from a dense layer over all tile features
            self.fc = Dense(params, f"{prefix}.fc", self.n_tiles * cfg.feature_depth, cfg.lstm_hidden, rng)
            zdim = cfg.lstm_hidden
        self.zdim = zdim
        self.head = Dense(params, f"{prefix}.window", zdim, 4, rng, scale=0.1)
        s0 = (cfg.height / 4.0 - cfg.sigma_min) / (cfg.smax - cfg.sigma_min)
        self.head.b.data[:] = [0.0, 0.0, _logit(s0), _logit(s0)]
        ys, xs = np.mgrid[0:h2, 0:w2]
        self.tile_pos = np.stack([(ys.ravel() + 0.5) / h2 * 2 - 1, (xs.ravel() + 0.5) / w2 * 2 - 1], axis=1)

    def extract_tiles(self, x: Tensor) -> Tensor:
        """(N, C, H1, W1) -> Q of shape (N, D, H2, W2)."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(f"attention input must be (N, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}")
        h = self.with_coords(x)
        for conv, k in zip(self.convs, cfg.pools):
            h = ops.relu(ops.maxpool2d(conv(h), k))
        return h

    def coord_planes(self, n: int) -> np.ndarray:
        """(n, 2, H1, W1) row and column coordinates scaled to [-1, 1]."""
        cfg = self.cfg
        rows = np.linspace(-1.0, 1.0, cfg.height)[:, None] * np.ones((1, cfg.width))
        cols = np.ones((cfg.height, 1)) * np.linspace(-1.0, 1.0, cfg.width)[None, :]
        return np.broadcast_to(np.stack([rows, cols]), (n, 2, cfg.height, cfg.width)).copy()

    def with_coords(self, x: Tensor) -> Tensor:
        if not self.cfg.coord_channels:
            return x
        return ops.concat([x, Tensor(self.coord_planes(x.shape[0]))], axis=1)

    def tile_features(self, q: Tensor) -> Tensor:
        n, d, h2, w2 = q.shape
        f = ops.transpose(ops.reshape(q, (n, d, h2 * w2)), (0, 2, 1))
        if self.cfg.tile_coords:
            t = h2 * w2
            pr = Tensor(np.broadcast_to(self.tile_pos[None, :, 0:1], (n, t, d)).copy())
            pc = Tensor(np.broadcast_to(self.tile_pos[None, :, 1:2], (n, t, d)).copy())
            pos = Tensor(np.broadcast_to(self.tile_pos, (n, t, 2)).copy())
            f = ops.concat([f, f * pr, f * pc, pos], axis=2)
        return f

    def readout(self, a: Tensor, feats: Tensor) -> Tensor:
        """Attention-weighted sum of tile features.

        With tile coordinates the coordinate-weighted sums are divided by the
        plain sum of their channel, giving one attention-weighted centroid per
        feature channel (features are non-negative after the ReLU).
        """
        n = a.shape[0]
        r = ops.reshape(ops.matmul(ops.reshape(a, (n, 1, self.n_tiles)), feats), (n, feats.shape[2]))
        if not self.cfg.tile_coords:
            return r
        d = self.cfg.feature_depth
        mass = r[:, 0:d]
        denom = mass + CENTROID_EPS
        return ops.concat([mass, r[:, d:2 * d] / denom, r[:, 2 * d:3 * d] / denom, r[:, 3 * d:]], axis=1)

    def tile_cover(self, covered: np.ndarray) -> np.ndarray:
        """(N, H1, W1) covered-pixel map -> (N, H2*W2) covered fraction of every tile."""
        n = covered.shape[0]
        h2, w2 = self.cfg.grid
        k = self.cfg.total_pool
        return covered.reshape(n, h2, k, w2, k).mean(axis=(2, 4)).reshape(n, h2 * w2)

    def attend_loop(self, q: Tensor, cover: np.ndarray | None = None):
        """Iterate the LSTM until every entry of A settles or max_iters is reached.

        Convergence is judged between consecutive MLP outputs (u >= 2); the
        uniform initial A is a prior, not an output. Samples that converged
        are frozen while the rest keep iterating. ``cover`` (N, tiles) is the
        explained share of every tile; a learned weight times it is taken off
        the attention logits so explained tiles draw less attention.
        Returns (z, A, iterations per sample).
        """
        cfg = self.cfg
        n = q.shape[0]
        feats = self.tile_features(q)
        if not cfg.use_lstm:
            z = ops.relu(self.fc(ops.reshape(q, (n, -1))))
            a = Tensor(np.full((n, self.n_tiles), 1.0 / self.n_tiles))
            return z, a, np.ones(n, dtype=int)
        a = Tensor(np.full((n, self.n_tiles), 1.0 / self.n_tiles))
        h = Tensor(np.zeros((n, cfg.lstm_hidden)))
        c = Tensor(np.zeros((n, cfg.lstm_hidden)))
        done = np.zeros(n, dtype=bool)
        iters = np.zeros(n, dtype=int)
        penalty = None
        if cover is not None and self.cover is not None:
            penalty = ops.broadcast_to(ops.reshape(self.cover, (1, 1)), (n, self.n_tiles)) * Tensor(cover)
        for u in range(1, cfg.max_iters + 1):
            r = self.readout(a, feats)
            h2, c2 = self.lstm(r, h, c)
            logits = self.mlp2(ops.tanh(self.mlp1(h2)))
            a2 = ops.softmax(logits - penalty if penalty is not None else logits, axis=-1)
            active = ~done
            iters[active] = u
            if done.any():
                keep = Tensor(done[:, None].astype(float))
                go = Tensor(active[:, None].astype(float))
                hm = lambda new, old, k=keep, g=go: new * ops.broadcast_to(g, new.shape) + old * ops.broadcast_to(k, old.shape)
                h2, c2, a2 = hm(h2, h), hm(c2, c), hm(a2, a)
            if u >= 2:
                delta = np.abs(a2.data - a.data).max(axis=1)
                done = done | (delta < cfg.tol)
            h, c, a = h2, c2, a2
            if done.all():
                break
        return h, a, iters

    def window_params(self, z: Tensor, stride: float | None = None) -> GaussianWindow:
        cfg = self.cfg
        raw = self.head(z)
        span = cfg.smax - cfg.sigma_min
        mu_row = ops.sigmoid(raw[:, 0]) * float(cfg.height)
        mu_col = ops.sigmoid(raw[:, 1]) * float(cfg.width)
        sigma_row = ops.sigmoid(raw[:, 2]) * span + cfg.sigma_min
        sigma_col = ops.sigmoid(raw[:, 3]) * span + cfg.sigma_min
        return make_window(mu_row, mu_col, sigma_row, sigma_col, cfg.height, cfg.width, cfg.out_h, cfg.out_w, stride)

    def __call__(self, x: Tensor, cover: np.ndarray | None = None):
        q = self.extract_tiles(x)
        z, a, iters = self.attend_loop(q, cover)
        return z, a, iters, self.window_params(z)
