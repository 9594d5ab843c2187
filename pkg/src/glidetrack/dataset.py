"""Annotated sequences on disk: frames, ground-truth masks and heads, GT trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .core import (DataError, Frame, HeadPoint, ImageSequence, InstanceRecord, LabelStack, TrajectoryRow,
                   group_by_frame, load_sequence, read_jsonl, save_sequence, write_jsonl, write_trajectories)

GT_FILE = "gt.jsonl"
GT_TRACKS_FILE = "gt_tracks.csv"


@dataclass(frozen=True)
class AnnotatedSequence:
    sequence: ImageSequence
    labels: list[LabelStack]
    heads: list[dict[int, HeadPoint]]

    def __iter__(self):
        return iter((self.sequence, self.labels, self.heads))

    @property
    def max_count(self) -> int:
        return max((len(s) for s in self.labels), default=0)

    @classmethod
    def from_result(cls, result) -> "AnnotatedSequence":
        return cls(result.sequence, list(result.labels), list(result.heads))


def gt_records(ann: AnnotatedSequence) -> list[InstanceRecord]:
    out = []
    for t, (stack, hd) in enumerate(zip(ann.labels, ann.heads)):
        for m in stack:
            h = hd.get(m.instance_id)
            out.append(InstanceRecord(t, m.instance_id, m, None if h is None else (h.x, h.y)))
    return out


def gt_rows(ann: AnnotatedSequence) -> list[TrajectoryRow]:
    """True head displacements in the trajectory-row format, keyed by simulator id."""
    rows = []
    for t, (h0, h1) in enumerate(zip(ann.heads[:-1], ann.heads[1:])):
        for u in sorted(set(h0) & set(h1)):
            a, b = h0[u], h1[u]
            speed = math.hypot(b.x - a.x, b.y - a.y) * ann.sequence.frame_rate
            rows.append(TrajectoryRow(u, t, a.x, a.y, b.x, b.y, speed))
    return rows


def labels_from_records(records: Sequence[InstanceRecord], num_frames: int, shape: tuple[int, int]):
    labels, heads = [], []
    for t, recs in enumerate(group_by_frame(records, num_frames)):
        masks = []
        for r in recs:
            if r.mask.shape != tuple(shape):
                raise DataError(f"frame {t}: mask {r.mask.shape} does not match frames {tuple(shape)}")
            masks.append(r.mask)
        labels.append(LabelStack(tuple(masks), tuple(shape)))
        heads.append({r.id: HeadPoint(r.head[0], r.head[1], t) for r in recs if r.head is not None})
    return labels, heads


def save_annotated(ann: AnnotatedSequence, directory: str | Path) -> Path:
    d = Path(directory)
    save_sequence(ann.sequence, d)
    write_jsonl(gt_records(ann), d / GT_FILE)
    write_trajectories(gt_rows(ann), d / GT_TRACKS_FILE)
    return d


def load_annotated(directory: str | Path) -> AnnotatedSequence:
    d = Path(directory)
    seq = load_sequence(d)
    gt = d / GT_FILE
    if not gt.exists():
        raise DataError(f"{gt} not found")
    recs = read_jsonl(gt)
    if any(r.frame >= len(seq) for r in recs):
        raise DataError(f"{gt} refers to frames beyond the sequence")
    labels, heads = labels_from_records(recs, len(seq), seq.shape)
    return AnnotatedSequence(seq, labels, heads)


def sequence_dirs(directory: str | Path) -> list[Path]:
    """A single sequence directory, or the sorted sequence subdirectories of a collection."""
    d = Path(directory)
    if (d / "sequence.json").exists():
        return [d]
    subs = sorted(p for p in d.glob("*") if (p / "sequence.json").exists()) if d.is_dir() else []
    if not subs:
        raise DataError(f"no sequences under {d}")
    return subs


def load_collection(directory: str | Path) -> list[AnnotatedSequence]:
    return [load_annotated(p) for p in sequence_dirs(directory)]


def save_collection(items: Sequence[AnnotatedSequence], directory: str | Path) -> list[Path]:
    d = Path(directory)
    if len(items) == 1:
        return [save_annotated(items[0], d)]
    return [save_annotated(a, d / f"seq_{i:03d}") for i, a in enumerate(items)]


def subsample(ann: AnnotatedSequence, step: int) -> AnnotatedSequence:
    """Keep every step-th frame, as if recorded at frame_rate / step."""
    if step < 1:
        raise ValueError("step must be >= 1")
    keep = range(0, len(ann.sequence), step)
    frames = tuple(Frame(ann.sequence[t].data, i, ann.sequence[t].timestamp) for i, t in enumerate(keep))
    seq = replace(ann.sequence, frames=frames, frame_rate=ann.sequence.frame_rate / step)
    heads = [{u: replace(h, frame_index=i) for u, h in ann.heads[t].items()} for i, t in enumerate(keep)]
    return AnnotatedSequence(seq, [ann.labels[t] for t in keep], heads)
