"""Score per-frame instances and their trajectories against simulator ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DataError, Displacement, HeadPoint, LabelStack, TrajectoryRow
from .metrics import EvalReport, TPCriteria, dic, segmentation_scores, velocity_scores
from .tracking import TrajectorySet, build_tracks


@dataclass
class GroundTruth:
    labels: list[LabelStack]
    heads: list[dict[int, HeadPoint]]

    @classmethod
    def from_sim(cls, result) -> "GroundTruth":
        return cls(list(result.labels), list(result.heads))

    def displacements(self) -> list[list[Displacement]]:
        out = []
        for h0, h1 in zip(self.heads[:-1], self.heads[1:]):
            out.append([Displacement.between((h0[u].x, h0[u].y), (h1[u].x, h1[u].y))
                        for u in sorted(set(h0) & set(h1))])
        return out

    def transition_counts(self) -> dict[str, list[int]]:
        out = {"trans": [], "ext": [], "ent": []}
        for a, b in zip(self.labels[:-1], self.labels[1:]):
            ia = {m.instance_id for m in a}
            ib = {m.instance_id for m in b}
            k = len(ia & ib)
            out["trans"].append(k)
            out["ext"].append(len(ia) - k)
            out["ent"].append(len(ib) - k)
        return out


def result_counts(tracks: TrajectorySet, frames: Sequence[Sequence]) -> dict[str, list[int]]:
    out = {"trans": [], "ext": [], "ent": []}
    if tracks.associations:
        for t, a in enumerate(tracks.associations):
            out["trans"].append(a.transfers)
            out["ext"].append(len(frames[t]) - a.transfers)
            out["ent"].append(len(frames[t + 1]) - a.transfers)
        return out
    # linkers without association records: count continuing tracks per transition
    cont = [0] * max(0, len(frames) - 1)
    for tr in tracks.tracks:
        for t in tr.frames[:-1]:
            cont[t] += 1
    for t, k in enumerate(cont):
        out["trans"].append(k)
        out["ext"].append(len(frames[t]) - k)
        out["ent"].append(len(frames[t + 1]) - k)
    return out


def _dics(rc: dict, gc: dict, flags: list[str]) -> dict[str, float]:
    out = {}
    for k in ("trans", "ext", "ent"):
        v, skipped = dic(rc[k], gc[k])
        out[k] = v
        if skipped:
            flags.append(f"DiC_{k}: {skipped} transitions with no ground truth skipped")
    return out


def evaluate(frames: Sequence[Sequence], gt: GroundTruth, tracks: TrajectorySet | None = None,
             mode: str = "literal4", crit: TPCriteria = TPCriteria(), iou_floor: float = 0.05) -> EvalReport:
    """All headline metrics for one sequence of per-frame result masks."""
    frames = [list(f) for f in frames]
    if tracks is None:
        tracks = build_tracks(frames, iou_floor)
    seg = segmentation_scores(frames, [list(s) for s in gt.labels])
    est = tracks.per_transition(len(frames))
    vel = velocity_scores(est, gt.displacements(), crit, mode)
    rc, gc = result_counts(tracks, frames), gt.transition_counts()
    flags: list[str] = []
    dics = _dics(rc, gc, flags)
    return EvalReport(J_mean=seg.j_mean, J_best=seg.j_best, BVs_mean=vel["BVs_mean"], BVs_best=vel["BVs_best"],
                      FDR=vel["FDR"], FNR=vel["FNR"], FPR=seg.fpr, seg_FNR=seg.fnr,
                      DiC_trans=dics["trans"], DiC_ext=dics["ext"], DiC_ent=dics["ent"],
                      TP=vel["TP"], FP=vel["FP"], FN=vel["FN"], mode=mode, flags=flags)


def pool_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool counts across sequences (rates recomputed from pooled TP/FP/FN; others averaged)."""
    if not reports:
        return EvalReport()
    tp = sum(r.TP for r in reports)
    fp = sum(r.FP for r in reports)
    fn = sum(r.FN for r in reports)
    mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))
    return EvalReport(J_mean=mean("J_mean"), J_best=max(r.J_best for r in reports), BVs_mean=mean("BVs_mean"),
                      BVs_best=max(r.BVs_best for r in reports), FDR=fp / (tp + fp) if tp + fp else 0.0,
                      FNR=fn / (tp + fn) if tp + fn else 0.0, FPR=mean("FPR"), seg_FNR=mean("seg_FNR"),
                      DiC_trans=mean("DiC_trans"), DiC_ext=mean("DiC_ext"), DiC_ent=mean("DiC_ent"),
                      TP=tp, FP=fp, FN=fn, mode=reports[0].mode,
                      flags=[f for r in reports for f in r.flags])


def rows_per_transition(rows: Sequence[TrajectoryRow], num_frames: int) -> list[list[Displacement]]:
    out: list[list[Displacement]] = [[] for _ in range(max(0, num_frames - 1))]
    for r in rows:
        if not 0 <= r.t < num_frames - 1:
            raise DataError(f"trajectory row at t={r.t} lies outside {num_frames} frames")
        out[r.t].append(r.displacement)
    return out


def evaluate_rows(rows: Sequence[TrajectoryRow], gt: GroundTruth, frames: Sequence[Sequence] | None = None,
                  mode: str = "literal4", crit: TPCriteria = TPCriteria()) -> EvalReport:
    """Score a trajectory file; segmentation metrics need the per-frame result masks.

    Without masks the per-frame instance count is taken as the number of distinct
    tracks touching the frame, which misses single-frame tracks.
    """
    n = len(gt.labels)
    est = rows_per_transition(rows, n)
    vel = velocity_scores(est, gt.displacements(), crit, mode)
    flags = []
    if frames is not None:
        frames = [list(f) for f in frames] + [[] for _ in range(n - len(frames))]
        seg = segmentation_scores(frames, [list(s) for s in gt.labels])
        m = [len(f) for f in frames]
    else:
        seg = None
        present: list[set[int]] = [set() for _ in range(n)]
        for r in rows:
            present[r.t].add(r.track_id)
            present[r.t + 1].add(r.track_id)
        m = [len(p) for p in present]
        flags.append("no result masks: J and segmentation rates not computed, instance counts taken from tracks")
    trans = [len(e) for e in est]
    rc = {"trans": trans, "ext": [m[t] - k for t, k in enumerate(trans)],
          "ent": [m[t + 1] - k for t, k in enumerate(trans)]}
    gc = gt.transition_counts()
    dics = _dics(rc, gc, flags)
    return EvalReport(J_mean=seg.j_mean if seg else 0.0, J_best=seg.j_best if seg else 0.0,
                      BVs_mean=vel["BVs_mean"], BVs_best=vel["BVs_best"], FDR=vel["FDR"], FNR=vel["FNR"],
                      FPR=seg.fpr if seg else 0.0, seg_FNR=seg.fnr if seg else 0.0,
                      DiC_trans=dics["trans"], DiC_ext=dics["ext"], DiC_ent=dics["ent"],
                      TP=vel["TP"], FP=vel["FP"], FN=vel["FN"], mode=mode, flags=flags)
