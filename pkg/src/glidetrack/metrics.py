"""Segmentation, counting and velocity metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .assignment import hungarian_max, similarity_f, similarity_matrix
from .core import Displacement


# ---------------------------------------------------------------------------
# segmentation

def jaccard_best(result, labels) -> float:
    """Best IoU of one result mask over a label stack (0 for an empty stack)."""
    masks = list(labels)
    if not masks:
        return 0.0
    return max(similarity_f(result, m) for m in masks)


def _bits(m) -> np.ndarray:
    return np.asarray(getattr(m, "array", m), dtype=bool)


def pixel_rates(result, label) -> tuple[float, float]:
    """(FNR, FPR) of one result against one label at pixel level.

    FNR = missed label pixels / label pixels, FPR = extra result pixels /
    background pixels.
    """
    r, y = _bits(result), _bits(label)
    pos = int(y.sum())
    neg = y.size - pos
    fn = int((y & ~r).sum())
    fp = int((r & ~y).sum())
    return (fn / pos if pos else 0.0), (fp / neg if neg else 0.0)


@dataclass
class SegmentationScores:
    j_mean: float
    j_best: float
    fnr: float
    fpr: float
    n_results: int
    n_labels: int


def segmentation_scores(frames_results: Sequence[Sequence], frames_labels: Sequence[Sequence]) -> SegmentationScores:
    """Aggregate J and pixel-level FNR/FPR over frames.

    Each label is matched one-to-one to a result by Hungarian on IoU. A label
    with no result counts as FNR 1 (FPR 0); the FNR is the mean over labels
    and the FPR the mean over results (an unmatched result counts as its
    own pixel share of the background).
    """
    js, fnrs, fprs = [], [], []
    best = 0.0
    n_res = n_lab = 0
    for res, lab in zip(frames_results, frames_labels):
        res, lab = list(res), list(lab)
        n_res += len(res)
        n_lab += len(lab)
        for r in res:
            j = jaccard_best(r, lab)
            js.append(j)
            best = max(best, j)
        sim = similarity_matrix(res, lab)
        pairs = [(i, j) for i, j in hungarian_max(sim) if sim[i, j] > 0] if sim.size else []
        matched_r = {i: j for i, j in pairs}
        matched_l = {j for _, j in pairs}
        for j, y in enumerate(lab):
            if j not in matched_l:
                fnrs.append(1.0)
        for i, r in enumerate(res):
            if i in matched_r:
                fn, fp = pixel_rates(r, lab[matched_r[i]])
                fnrs.append(fn)
                fprs.append(fp)
            else:
                b = _bits(r)
                fprs.append(float(b.sum()) / b.size)
    mean = lambda v: float(np.mean(v)) if v else 0.0
    return SegmentationScores(mean(js), best, mean(fnrs), mean(fprs), n_res, n_lab)


# ---------------------------------------------------------------------------
# displacements

def _vec(d, mode: str) -> np.ndarray:
    if isinstance(d, Displacement):
        return d.vector(mode)
    return np.asarray(d, dtype=np.float64)


def vsim(d, g, mode: str = "literal4") -> float:
    """Bounded similarity d.g / (|d|^2 + |g|^2) + 1/2; 1 when both are zero."""
    a, b = _vec(d, mode), _vec(g, mode)
    den = float(a @ a + b @ b)
    if den == 0.0:
        return 1.0
    return float(a @ b) / den + 0.5


def vsim_matrix(est: Sequence, gts: Sequence, mode: str = "literal4") -> np.ndarray:
    if not len(est) or not len(gts):
        return np.zeros((len(est), len(gts)))
    a = np.stack([_vec(d, mode) for d in est])
    b = np.stack([_vec(d, mode) for d in gts])
    dot = a @ b.T
    den = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :]
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, 1.0, dot / safe + 0.5)


def bvs(d, gts: Sequence, mode: str = "literal4") -> float:
    if not len(gts):
        raise ValueError("bvs needs at least one ground-truth displacement")
    return max(vsim(d, g, mode) for g in gts)


@dataclass(frozen=True)
class TPCriteria:
    """A matched pair is a true positive when all three tests pass.

    The magnitude test reads the 10% rule as | |d| - |g| | <= 0.10 |g|. Angle
    and magnitude are taken on the same vectors Vsim uses (the 4-vector in
    ``literal4`` mode, the motion vector in ``diff2`` mode).
    """

    max_center_dist: float = 7.0
    max_angle_deg: float = 30.0
    max_mag_ratio: float = 0.10

    def __post_init__(self):
        if min(self.max_center_dist, self.max_angle_deg, self.max_mag_ratio) <= 0:
            raise ValueError("TP criteria must be positive")


def angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 180.0
    c = float(a @ b) / (na * nb)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def is_true_positive(d: Displacement, g: Displacement, crit: TPCriteria = TPCriteria(),
                     mode: str = "literal4") -> bool:
    if float(np.hypot(*(d.center - g.center))) >= crit.max_center_dist:
        return False
    a, b = d.vector(mode), g.vector(mode)
    if angle_deg(a, b) >= crit.max_angle_deg:
        return False
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    return abs(na - nb) <= crit.max_mag_ratio * nb


@dataclass
class Classification:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)
    empty_est: bool = False
    empty_gt: bool = False

    @property
    def fdr(self) -> float:
        n = self.tp + self.fp
        return self.fp / n if n else 0.0

    @property
    def fnr(self) -> float:
        n = self.tp + self.fn
        return self.fn / n if n else 0.0


def classify_displacements(est: Sequence[Displacement], gts: Sequence[Displacement],
                           crit: TPCriteria = TPCriteria(), mode: str = "literal4") -> Classification:
    """Match estimates to ground truth on Vsim, then apply the TP tests to each pair."""
    est, gts = list(est), list(gts)
    sim = vsim_matrix(est, gts, mode)
    pairs = hungarian_max(sim) if sim.size else []
    tp = sum(1 for i, j in pairs if is_true_positive(est[i], gts[j], crit, mode))
    return Classification(tp, len(est) - tp, len(gts) - tp, pairs, not est, not gts)


# ---------------------------------------------------------------------------
# counting

def dic(m_counts: Sequence[int], n_counts: Sequence[int]) -> tuple[float, int]:
    """Mean of |m - n| / n over frames with n > 0; also returns how many frames were skipped."""
    if len(m_counts) != len(n_counts):
        raise ValueError("count sequences must be aligned")
    vals = [abs(m - n) / n for m, n in zip(m_counts, n_counts) if n > 0]
    skipped = sum(1 for n in n_counts if n <= 0)
    return (float(np.mean(vals)) if vals else 0.0), skipped


def transition_counts(frames: Sequence[Sequence], iou_floor: float = 0.05) -> dict[str, list[int]]:
    """Per-transition transfer / exit / entry counts from consecutive-frame association."""
    from .assignment import associate_frames

    out = {"trans": [], "ext": [], "ent": []}
    for a, b in zip(frames[:-1], frames[1:]):
        r = associate_frames(list(a), list(b), iou_floor)
        out["trans"].append(r.transfers)
        out["ext"].append(len(a) - r.transfers)
        out["ent"].append(len(b) - r.transfers)
    return out


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    J_mean: float = 0.0
    J_best: float = 0.0
    BVs_mean: float = 0.0
    BVs_best: float = 0.0
    FDR: float = 0.0
    FNR: float = 0.0
    FPR: float = 0.0
    seg_FNR: float = 0.0
    DiC_trans: float = 0.0
    DiC_ext: float = 0.0
    DiC_ent: float = 0.0
    TP: int = 0
    FP: int = 0
    FN: int = 0
    mode: str = "literal4"
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, title: str = "") -> str:
        """Fixed-width text table of the headline numbers."""
        cols = [("J", self.J_mean), ("BVs", self.BVs_mean), ("FDR", self.FDR), ("FNR", self.FNR),
                ("segFNR", self.seg_FNR), ("segFPR", self.FPR), ("DiC-t", self.DiC_trans),
                ("DiC-x", self.DiC_ext), ("DiC-e", self.DiC_ent)]
        head = " ".join(f"{n:>8}" for n, _ in cols)
        row = " ".join(f"{v:8.3f}" for _, v in cols)
        lines = [title] if title else []
        return "\n".join(lines + [head, row])


def velocity_scores(est_frames: Sequence[Sequence[Displacement]], gt_frames: Sequence[Sequence[Displacement]],
                    crit: TPCriteria = TPCriteria(), mode: str = "literal4") -> dict:
    """Pooled TP/FP/FN, FDR/FNR and BVs over frame transitions."""
    tp = fp = fn = 0
    b_all = []
    for est, gts in zip(est_frames, gt_frames):
        c = classify_displacements(est, gts, crit, mode)
        tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        if gts:
            b_all.extend(bvs(d, gts, mode) for d in est)
    return {"TP": tp, "FP": fp, "FN": fn,
            "FDR": fp / (tp + fp) if tp + fp else 0.0,
            "FNR": fn / (tp + fn) if tp + fn else 0.0,
            "BVs_mean": float(np.mean(b_all)) if b_all else 0.0,
            "BVs_best": float(np.max(b_all)) if b_all else 0.0}
