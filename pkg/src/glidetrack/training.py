"""Losses, result/label matching and the two-stage training driver."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assignment import hungarian_max, similarity_matrix
from .autodiff import Adam, Tensor, ops, save_checkpoint
from .core import ImageSequence, LabelStack
from .flow import FlowCache, flow_stack, sequence_flows
from .segmentation import InstanceSegmenter, ModelConfig, static_inputs

SCORE_EPS = 1e-6
BOX_PAD = 2.0


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 300
    stage2_steps: int = 1700
    batch: int = 4
    lr: float = 1e-3
    clip_norm: float | None = 5.0
    seed: int = 0
    forced_iters: int | None = None  # M; defaults to the largest label count in the data
    kappa: float | None = None  # fixed knob value; None anneals 1 -> 0 over the first half of stage 2
    log_every: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.kappa is not None and not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def kappa_at(self, step: int) -> float:
        """Ground-truth share of the canvas at a global step (1.0 throughout stage 1)."""
        if self.kappa is not None:
            return self.kappa
        s = step - self.stage1_steps
        if s < 0:
            return 1.0
        half = max(1, self.stage2_steps // 2)
        return max(0.0, 1.0 - s / half)

    def stage_at(self, step: int) -> str:
        return "attention_only" if step < self.stage1_steps else "joint"


@dataclass
class LossReport:
    step: int
    stage: str
    kappa: float
    L_att: float
    L_seg: float
    L_count: float

    @property
    def L_total(self) -> float:
        return self.L_att + self.L_seg + self.L_count


# ---------------------------------------------------------------------------
# boxes and losses

def label_boxes(masks: np.ndarray, pad: float = BOX_PAD) -> np.ndarray:
    """(n, H, W) bool -> (n, 4) boxes (row0, row1, col0, col1) around the pixel extents, dilated by pad."""
    out = np.zeros((len(masks), 4))
    for i, m in enumerate(masks):
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        if rows.size == 0:
            continue
        out[i] = (rows[0] - 0.5 - pad, rows[-1] + 0.5 + pad, cols[0] - 0.5 - pad, cols[-1] + 0.5 + pad)
    return out


def box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (m, 4) and (n, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ih = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iw = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 2], b[None, :, 2]), 0, None)
    inter = ih * iw
    area = lambda x: np.clip(x[:, 1] - x[:, 0], 0, None) * np.clip(x[:, 3] - x[:, 2], 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_iou(r0: Tensor, r1: Tensor, c0: Tensor, c1: Tensor, boxes: np.ndarray) -> Tensor:
    """Differentiable IoU of predicted boxes (P,) against fixed (P, 4) boxes."""
    b = [Tensor(boxes[:, i].copy()) for i in range(4)]
    ih = ops.relu(ops.minimum(r1, b[1]) - ops.maximum(r0, b[0]))
    iw = ops.relu(ops.minimum(c1, b[3]) - ops.maximum(c0, b[2]))
    inter = ih * iw
    pa = ops.relu(r1 - r0) * ops.relu(c1 - c0)
    la = Tensor((boxes[:, 1] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 2]))
    return inter / (pa + la - inter + 1e-12)


def soft_iou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Soft Jaccard per leading index: sum(min) / sum(max) over the last two axes."""
    y = Tensor(np.asarray(target, dtype=np.float64))
    inter = ops.sum(ops.minimum(pred, y), axis=(1, 2))
    union = ops.sum(ops.maximum(pred, y), axis=(1, 2))
    return inter / (union + 1e-12)


def loss_from_matches(values: Tensor | None, m_t: int) -> Tensor:
    """-(1/m_t) * sum of the matched similarity values (0 with no matches)."""
    if values is None or m_t == 0:
        return Tensor(0.0)
    return ops.sum(values) * (-1.0 / m_t)


def loss_att(windows_or_boxes: Tensor | np.ndarray, label_box: np.ndarray, pairs, m_t: int):
    """Attention loss for one frame given predicted boxes (m, 4) and label boxes (n, 4)."""
    if not pairs:
        return Tensor(0.0)
    pb = windows_or_boxes if isinstance(windows_or_boxes, Tensor) else Tensor(np.asarray(windows_or_boxes, float))
    ri = np.array([i for i, _ in pairs])
    lj = np.array([j for _, j in pairs])
    sel = ops.index(pb, ri)
    vals = box_iou(sel[:, 0], sel[:, 1], sel[:, 2], sel[:, 3], np.asarray(label_box, float)[lj])
    return loss_from_matches(vals, m_t)


def loss_seg(masks: Tensor | np.ndarray, labels: np.ndarray, pairs, m_t: int):
    """Segmentation loss for one frame: soft masks (m, H, W), binary labels (n, H, W)."""
    if not pairs:
        return Tensor(0.0)
    pm = masks if isinstance(masks, Tensor) else Tensor(np.asarray(masks, float))
    ri = np.array([i for i, _ in pairs])
    lj = np.array([j for _, j in pairs])
    return loss_from_matches(soft_iou(ops.index(pm, ri), np.asarray(labels)[lj]), m_t)


def loss_count(scores: Tensor | np.ndarray, truth: np.ndarray, eps: float = SCORE_EPS) -> Tensor:
    """Monotonic score loss, averaged over slots (and over rows for a 2-D batch).

    A slot that should be on is charged for the smallest score up to it; a
    slot that should be off is charged for the largest score from it onward.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, float))
    y = np.asarray(truth, dtype=np.float64)
    flat = s.ndim == 1
    if flat:
        s = ops.reshape(s, (1, -1))
        y = y.reshape(1, -1)
    s = ops.clip(s, eps, 1.0 - eps)
    m = s.shape[1]
    prefix_min = ops.cummin(s, axis=1)
    rev = np.arange(m - 1, -1, -1)
    suffix_max = ops.index(ops.cummax(ops.index(s, (slice(None), rev)), axis=1), (slice(None), rev))
    on = Tensor(y)
    off = Tensor(1.0 - y)
    terms = -(on * ops.log(prefix_min)) - off * ops.log(1.0 - suffix_max)
    return ops.mean(terms)


def match_for_loss(results, labels, extra: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Hungarian matching of binary result masks to label masks on mask IoU.

    ``extra`` (m, n) is added to the similarity; training passes a small
    multiple of the box IoU so empty or saturated masks still match sensibly.
    """
    sim = similarity_matrix(results, labels)
    if extra is not None and sim.size:
        sim = sim + extra
    return hungarian_max(sim) if sim.size else []


# ---------------------------------------------------------------------------
# data

@dataclass
class TrainSample:
    att_static: np.ndarray
    seg_static: np.ndarray
    labels: np.ndarray  # (n, H, W) bool
    boxes: np.ndarray  # (n, 4)


def build_samples(dataset: Sequence[tuple[ImageSequence, Sequence[LabelStack]]], cfg: ModelConfig,
                  cache: FlowCache | None = None) -> list[TrainSample]:
    out = []
    for seq, labels in dataset:
        flows = sequence_flows(seq, cfg.flow_alpha, cfg.flow_iters, cache) if cfg.mode == "flow" else None
        for t in range(len(seq)):
            fl = flow_stack(seq, t, cfg.L, cfg.flow_alpha, cfg.flow_iters, cache, flows) if flows is not None else None
            att, seg = static_inputs(cfg, seq, t, fl)
            lab = labels[t].tensor().transpose(2, 0, 1).astype(bool) if labels[t].count else np.zeros((0,) + seq.shape, bool)
            out.append(TrainSample(att, seg, lab, label_boxes(lab)))
    return out


def forced_iterations(samples: Sequence[TrainSample]) -> int:
    return max(1, max(len(s.labels) for s in samples))


# ---------------------------------------------------------------------------
# one batch

def batch_loss(model: InstanceSegmenter, batch: Sequence[TrainSample], m_forced: int, kappa: float,
               stage: str = "joint"):
    """Forward M forced steps on a batch and return (objective, report values).

    The canvas of step k mixes the mean of the ground-truth masks matched so
    far (weight kappa) with the mean of the k binarised predictions (weight
    1 - kappa); the in-loop match is greedy, the loss match is Hungarian.
    """
    n = len(batch)
    h, w = batch[0].labels.shape[1:] if batch[0].labels.size else batch[0].att_static.shape[1:]
    att = np.stack([b.att_static for b in batch])
    seg = np.stack([b.seg_static for b in batch])
    base = model.static_conv(att)
    level = model.cfg.mask_level
    gt_sum = np.zeros((n, h, w))
    pred_sum = np.zeros((n, h, w))
    used = [np.zeros(len(b.labels), bool) for b in batch]
    outs = []
    for k in range(m_forced):
        if k == 0:
            canvas = np.zeros((n, h, w))
        else:
            n_used = np.array([max(1, int(u.sum())) for u in used], dtype=np.float64)[:, None, None]
            canvas = kappa * (gt_sum / n_used) + (1.0 - kappa) * (pred_sum / k)
        out = model.forward(None, seg, canvas, att_base=base)
        outs.append(out)
        bits = out.mask.data >= level
        pred_sum += bits
        boxes = np.stack([t.data for t in out.window.box()], axis=1)
        for i, b in enumerate(batch):
            if not len(b.labels) or used[i].all():
                continue
            cost = box_iou_np(boxes[i:i + 1], b.boxes)[0]
            if stage != "attention_only":
                cost = similarity_matrix(bits[i:i + 1], b.labels)[0] + 1e-3 * cost
            cost[used[i]] = -np.inf
            j = int(np.argmax(cost))
            used[i][j] = True
            gt_sum[i] += b.labels[j]

    # stack per-step tensors to (N, M, ...)
    box_t = [ops.stack([t for t in o.window.box()], axis=1) for o in outs]  # each (N, 4)
    boxes_all = ops.stack(box_t, axis=1)  # (N, M, 4)
    masks_all = ops.stack([o.mask for o in outs], axis=1)  # (N, M, H, W)
    scores_all = ops.stack([o.score for o in outs], axis=1)  # (N, M)
    bits_all = masks_all.data >= level
    att_terms, seg_terms = [], []
    truth = np.zeros((n, m_forced))
    for i, b in enumerate(batch):
        nl = len(b.labels)
        truth[i, :min(nl, m_forced)] = 1.0
        if not nl:
            continue
        bx = box_iou_np(boxes_all.data[i], b.boxes)
        extra = bx if stage == "attention_only" else 1e-3 * bx
        if stage == "attention_only":
            pairs = hungarian_max(bx)
        else:
            pairs = match_for_loss(list(bits_all[i]), list(b.labels), extra)
        if not pairs:
            continue
        att_terms.append(loss_att(boxes_all[i], b.boxes, pairs, m_forced))
        seg_terms.append(loss_seg(masks_all[i], b.labels, pairs, m_forced))
    zero = Tensor(0.0)
    l_att = ops.sum(ops.stack(att_terms)) * (1.0 / n) if att_terms else zero
    l_seg = ops.sum(ops.stack(seg_terms)) * (1.0 / n) if seg_terms else zero
    l_cnt = loss_count(scores_all, truth)
    objective = l_att + l_cnt if stage == "attention_only" else l_att + l_seg + l_cnt
    return objective, (float(l_att.data), float(l_seg.data), float(l_cnt.data))


# ---------------------------------------------------------------------------
# driver

LOSS_COLUMNS = ("step", "stage", "kappa", "L_att", "L_seg", "L_count", "L_total", "seconds")


@dataclass
class TrainResult:
    model: InstanceSegmenter
    history: list[LossReport]
    m_forced: int
    seconds: float

    def losses_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(LOSS_COLUMNS[:-1])
        for r in self.history:
            wr.writerow([r.step, r.stage, repr(r.kappa), repr(r.L_att), repr(r.L_seg), repr(r.L_count), repr(r.L_total)])
        return buf.getvalue()


def train(samples: Sequence[TrainSample], model_cfg: ModelConfig, cfg: TrainConfig,
          model: InstanceSegmenter | None = None, progress: Callable[[LossReport], None] | None = None,
          time_budget: float | None = None) -> TrainResult:
    """Two-stage training: attention and counter first, then everything jointly."""
    if not samples:
        raise ValueError("no training samples")
    model = model or InstanceSegmenter(model_cfg, seed=cfg.seed)
    m_forced = cfg.forced_iters or forced_iterations(samples)
    rng = np.random.default_rng(cfg.seed)
    opt1 = Adam(model.group("attention") + model.group("count"), lr=cfg.lr, clip_norm=cfg.clip_norm)
    opt2 = None
    history: list[LossReport] = []
    order = rng.permutation(len(samples))
    cursor = 0
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        stage = cfg.stage_at(step)
        if stage == "joint" and opt2 is None:
            opt2 = Adam(list(model.params.values()), lr=cfg.lr, clip_norm=cfg.clip_norm)
        opt = opt1 if stage == "attention_only" else opt2
        idx = []
        for _ in range(min(cfg.batch, len(samples))):
            if cursor == len(order):
                order = rng.permutation(len(samples))
                cursor = 0
            idx.append(order[cursor])
            cursor += 1
        kappa = cfg.kappa_at(step)
        objective, (la, ls, lc) = batch_loss(model, [samples[i] for i in idx], m_forced, kappa, stage)
        rep = LossReport(step, stage, kappa, la, ls, lc)
        if not np.isfinite(objective.data) or not np.isfinite(rep.L_total):
            raise DivergenceError(f"non-finite loss at step {step}")
        model.params.zero_grad()
        objective.backward()
        for p in opt.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {p.name} at step {step}")
        opt.step()
        model.params.zero_grad()
        history.append(rep)
        if progress is not None and step % cfg.log_every == 0:
            progress(rep)
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return TrainResult(model, history, m_forced, time.perf_counter() - t0)


def save_model(result: TrainResult, out_dir: str | Path, extra_meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"model": result.model.cfg.to_dict(), "forced_iters": result.m_forced}
    meta.update(extra_meta or {})
    save_checkpoint(out / "model.ckpt", result.model.params, meta)
    (out / "losses.csv").write_text(result.losses_csv())
    return out / "model.ckpt"


def load_model(path: str | Path) -> InstanceSegmenter:
    from .autodiff import load_checkpoint

    state, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta.get("model", {}))
    model = InstanceSegmenter(cfg)
    model.load_state(state)
    return model
