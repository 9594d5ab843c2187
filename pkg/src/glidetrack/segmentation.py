"""Recurrent instance segmentation: one attended instance per step.

For frame t and step k the network sees an input group made of the frame
window around t (raw mode) or the flows of that window plus frame t (flow
mode), with the running mean of the k-1 masks found so far as last channel.
The attention network picks a window, a small encoder/decoder segments the
attended patch, the result is mapped back to the frame, and a counter head
scores whether this step still found a real instance.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionConfig, AttentionNet, GaussianWindow, apply_window, unwarp
from .autodiff import Params, Tensor, ops
from .autodiff.nn import Conv, Dense
from .core import ImageSequence, InstanceMask, weighted_average
from .flow import FlowCache, FlowField, flow_stack, sequence_flows, window_indices

FLOW_SCALE = 0.5
CANVAS_INHIBITION = 2.0


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "flow"  # "flow" | "raw"
    L: int = 1
    height: int = 64
    width: int = 64
    att_depths: tuple[int, ...] = (8, 16, 16)
    att_pools: tuple[int, ...] = (2, 2, 2)
    lstm_hidden: int = 32
    max_iters: int = 10
    tol: float = 1e-3
    use_lstm: bool = True
    tile_coords: bool = True
    coord_channels: bool = True
    out_h: int = 24
    out_w: int = 24
    enc_depths: tuple[int, ...] = (8, 16, 16)
    enc_pools: tuple[int, ...] = (2, 2, 2)
    code_dim: int = 32
    skip: bool = True
    canvas_peak: bool = True  # the networks read the canvas scaled to a peak of 1
    cover_bias: float | None = 4.0
    threshold: float = 0.23
    max_instances: int = 20
    flow_alpha: float = 10.0
    flow_iters: int = 200
    mask_level: float = 0.5

    def __post_init__(self):
        if self.mode not in ("flow", "raw"):
            raise ValueError(f"unknown input mode {self.mode!r}")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if len(self.enc_depths) != len(self.enc_pools):
            raise ValueError("encoder depths and pools must have equal length")
        p = int(np.prod(self.enc_pools))
        if self.out_h % p or self.out_w % p:
            raise ValueError("attended size must be divisible by the encoder pooling")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def frame_channels(self) -> int:
        return 3 * (2 * self.L + 1)

    @property
    def att_channels(self) -> int:
        """Channels of the attention input, canvas included."""
        if self.mode == "flow":
            return 2 * 2 * self.L + 3 + 1
        return self.frame_channels + 1

    @property
    def seg_channels(self) -> int:
        return self.frame_channels + 1

    def attention(self) -> AttentionConfig:
        return AttentionConfig(in_channels=self.att_channels, height=self.height, width=self.width,
                               depths=self.att_depths, pools=self.att_pools, lstm_hidden=self.lstm_hidden,
                               max_iters=self.max_iters, tol=self.tol, out_h=self.out_h, out_w=self.out_w,
                               use_lstm=self.use_lstm, tile_coords=self.tile_coords,
                               coord_channels=self.coord_channels, cover_bias=self.cover_bias)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
        return cls(**kw)


# ---------------------------------------------------------------------------
# input groups

def frame_window(seq: ImageSequence, t: int, L: int) -> np.ndarray:
    """(3(2L+1), H, W) float frames t-L..t+L, boundary frames repeated."""
    return np.concatenate([seq[i].pixels.transpose(2, 0, 1) for i in window_indices(t, L, len(seq))])


def flow_channels(flows: list[FlowField]) -> np.ndarray:
    return np.concatenate([f.stacked() for f in flows]) * FLOW_SCALE


def static_inputs(cfg: ModelConfig, seq: ImageSequence, t: int, flows: list[FlowField] | None = None):
    """Canvas-free parts of the attention input and the segmentation input for frame t.

    Channel order: flows ascending in time, then frame t (flow mode) or the
    frame window ascending in time (raw mode). The canvas goes last.
    """
    frames = frame_window(seq, t, cfg.L)
    if cfg.mode == "flow":
        if flows is None or len(flows) != 2 * cfg.L:
            raise ValueError(f"flow mode needs {2 * cfg.L} flows for frame {t}")
        att = np.concatenate([flow_channels(flows), seq[t].pixels.transpose(2, 0, 1)])
    else:
        att = frames
    return att, frames


def peak_normalised(canvas: np.ndarray) -> np.ndarray:
    """Scale every (H, W) canvas of a batch to a maximum of 1; empty canvases stay zero.

    A mean of k disjoint masks becomes their union, whatever k is, while a
    ground-truth/prediction mix keeps the relative weight of its parts.
    """
    peak = canvas.max(axis=(-2, -1), keepdims=True)
    return np.divide(canvas, peak, out=np.zeros_like(canvas, dtype=np.float64), where=peak > 0)


def input_group(static: np.ndarray, canvas: np.ndarray) -> np.ndarray:
    return np.concatenate([static, canvas[None]])


# ---------------------------------------------------------------------------
# networks

class SegmentationNet:
    """Encoder to a code vector and decoder back to an attended-size mask."""

    def __init__(self, cfg: ModelConfig, params: Params, rng: np.random.Generator, prefix: str = "seg"):
        self.cfg = cfg
        self.enc = []
        cin = cfg.seg_channels
        for i, d in enumerate(cfg.enc_depths):
            self.enc.append(Conv(params, f"{prefix}.enc{i}", cin, d, rng))
            cin = d
        p = int(np.prod(cfg.enc_pools))
        self.bottom = (cfg.enc_depths[-1], cfg.out_h // p, cfg.out_w // p)
        flat = int(np.prod(self.bottom))
        self.code = Dense(params, f"{prefix}.code", flat, cfg.code_dim, rng)
        self.expand = Dense(params, f"{prefix}.expand", cfg.code_dim, flat, rng)
        self.dec = []
        depths = list(cfg.enc_depths)
        for i in range(len(depths) - 1, -1, -1):
            cout = depths[i - 1] if i > 0 else depths[0]
            self.dec.append(Conv(params, f"{prefix}.dec{i}", depths[i], cout, rng))
        last_in = depths[0] + (cfg.seg_channels if cfg.skip else 0)
        self.fuse = Conv(params, f"{prefix}.fuse", last_in, depths[0], rng)
        self.out = Conv(params, f"{prefix}.out", depths[0], 1, rng, k=1)

    def encode(self, p: Tensor) -> Tensor:
        n = p.shape[0]
        h = p
        for conv, k in zip(self.enc, self.cfg.enc_pools):
            h = ops.relu(ops.maxpool2d(conv(h), k))
        return self.code(ops.reshape(h, (n, -1)))

    def decode(self, v: Tensor, p: Tensor) -> Tensor:
        n = v.shape[0]
        h = ops.reshape(ops.relu(self.expand(v)), (n,) + self.bottom)
        for conv, k in zip(self.dec, self.cfg.enc_pools[::-1]):
            h = ops.relu(conv(ops.upsample(h, k)))
        if self.cfg.skip:
            h = ops.concat([h, p], axis=1)
        h = ops.relu(self.fuse(h))
        return ops.reshape(ops.sigmoid(self.out(h)), (n, self.cfg.out_h, self.cfg.out_w))


@dataclass
class InstanceResult:
    """One kept instance: soft and binary full-frame masks, score and window."""

    mask_soft: np.ndarray
    mask: np.ndarray
    score: float
    window: dict


@dataclass
class InstanceOutput:
    window: GaussianWindow
    z: Tensor
    attention: Tensor
    iterations: np.ndarray
    patch: Tensor  # P, (N, C, H3, W3)
    patch_mask: Tensor  # decoder output, (N, H3, W3)
    mask: Tensor  # unwarped soft mask, (N, H1, W1)
    score: Tensor  # (N,)


class InstanceSegmenter:
    """Attention + segmentation + counter, sharing one parameter set."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = Params()
        rng = np.random.default_rng(seed)
        self.att = AttentionNet(cfg.attention(), self.params, rng)
        self.seg = SegmentationNet(cfg, self.params, rng)
        self.counter = Dense(self.params, "count", self.att.zdim + cfg.code_dim, 1, rng)
        self.counter.b.data[:] = 1.0
        # canvas starts inhibitory so already explained pixels damp the first features
        ci = cfg.att_channels - 1
        self.att.convs[0].w.data[:, ci] = 0.0
        self.att.convs[0].w.data[:, ci, 1, 1] = -CANVAS_INHIBITION

    # parameter groups used by the two training stages
    def group(self, name: str) -> list[Tensor]:
        pre = {"attention": ("att.",), "segmentation": ("seg.",), "count": ("count.",)}[name]
        return [t for k, t in self.params.items() if k.startswith(pre)]

    def forward(self, att_static: Tensor, seg_static: np.ndarray, canvas: np.ndarray,
                att_base: Tensor | None = None) -> InstanceOutput:
        """One step for a batch of frames.

        ``att_base`` may carry the first attention convolution of the static
        channels; the canvas part is then added separately, which is the same
        linear map as convolving the whole input group.
        """
        n = canvas.shape[0]
        covered = peak_normalised(canvas) if self.cfg.canvas_peak else canvas
        ct = Tensor(covered[:, None])
        if att_base is None:
            x = ops.concat([att_static, ct], axis=1)
            q = self.att.extract_tiles(x)
        else:
            conv0 = self.att.convs[0]
            ci = self.cfg.att_channels - 1
            wc = conv0.w[:, ci:ci + 1]
            h = att_base + ops.conv2d(ct, wc)
            h = ops.relu(ops.maxpool2d(h, self.att.cfg.pools[0]))
            for conv, k in zip(self.att.convs[1:], self.att.cfg.pools[1:]):
                h = ops.relu(ops.maxpool2d(conv(h), k))
            q = h
        z, a, iters = self.att.attend_loop(q, self.att.tile_cover(covered))
        win = self.att.window_params(z)
        g = Tensor(np.concatenate([seg_static, covered[:, None]], axis=1))
        p = apply_window(g, win)
        v = self.seg.encode(p)
        pm = self.seg.decode(v, p)
        mask = unwarp(pm, win)
        score = ops.reshape(ops.sigmoid(self.counter(ops.concat([z, v], axis=1))), (n,))
        return InstanceOutput(win, z, a, iters, p, pm, mask, score)

    def static_conv(self, att_static: np.ndarray) -> Tensor:
        """First attention convolution applied to the canvas-free channels (bias included)."""
        conv0 = self.att.convs[0]
        ci = self.cfg.att_channels - 1
        keep = np.array([i for i in range(conv0.w.shape[1]) if i != ci])
        x = np.concatenate([att_static, self.att.coord_planes(len(att_static))], axis=1) \
            if self.att.cfg.coord_channels else att_static
        return ops.conv2d(Tensor(x), conv0.w[:, keep], conv0.b)

    # ------------------------------------------------------------------
    def segment_batch(self, att_static: np.ndarray, seg_static: np.ndarray,
                      max_instances: int | None = None, threshold: float | None = None) -> list[list["InstanceResult"]]:
        """Greedy inference on a batch of frames.

        Stops a frame at the first score below the threshold (that instance is
        dropped) or after ``max_instances`` steps. Returns the kept instances
        of every frame in the order they were found.
        """
        m_max = self.cfg.max_instances if max_instances is None else max_instances
        thr = self.cfg.threshold if threshold is None else threshold
        n, _, h, w = att_static.shape
        base = self.static_conv(att_static)
        kept: list[list[InstanceResult]] = [[] for _ in range(n)]
        alive = np.ones(n, dtype=bool)
        canvas = np.zeros((n, h, w))
        for _ in range(m_max):
            out = self.forward(None, seg_static, canvas, att_base=base)
            scores = out.score.data
            soft = out.mask.data
            for i in np.flatnonzero(alive):
                if scores[i] < thr:
                    alive[i] = False
                    continue
                bits = soft[i] >= self.cfg.mask_level
                kept[i].append(InstanceResult(soft[i].copy(), bits, float(scores[i]), out.window.numpy(i)))
                canvas[i] = weighted_average([InstanceMask.from_array(r.mask) for r in kept[i]])
            if not alive.any():
                break
        return kept

    def state(self) -> dict:
        return self.params.state()

    def load_state(self, state: dict) -> None:
        self.params.load_state(state)


# ---------------------------------------------------------------------------
# sequences

def sequence_inputs(cfg: ModelConfig, seq: ImageSequence, cache: FlowCache | None = None,
                    frames: list[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked static inputs (T, C, H, W) of the attention and segmentation networks."""
    idx = range(len(seq)) if frames is None else frames
    flows = sequence_flows(seq, cfg.flow_alpha, cfg.flow_iters, cache) if cfg.mode == "flow" else None
    att, seg = [], []
    for t in idx:
        fl = flow_stack(seq, t, cfg.L, cfg.flow_alpha, cfg.flow_iters, cache, flows) if flows is not None else None
        a, s = static_inputs(cfg, seq, t, fl)
        att.append(a)
        seg.append(s)
    return np.stack(att), np.stack(seg)


def segment_frame(model: InstanceSegmenter, seq: ImageSequence, t: int, cache: FlowCache | None = None,
                  max_instances: int | None = None) -> list[InstanceResult]:
    """Instances of frame t, found one at a time until the counter stops."""
    att, seg = sequence_inputs(model.cfg, seq, cache, [t])
    return model.segment_batch(att, seg, max_instances)[0]


def segment_sequence(model: InstanceSegmenter, seq: ImageSequence, cache: FlowCache | None = None,
                     max_instances: int | None = None, batch: int = 8) -> list[list[InstanceResult]]:
    """Per-frame instance lists for a whole sequence, processed in frame batches."""
    att, seg = sequence_inputs(model.cfg, seq, cache)
    out: list[list[InstanceResult]] = []
    for i in range(0, len(seq), batch):
        out.extend(model.segment_batch(att[i:i + batch], seg[i:i + batch], max_instances))
    return out
