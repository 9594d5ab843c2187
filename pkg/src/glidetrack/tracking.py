"""Chain per-frame instances into tracks and read off head displacements."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assignment import AssociationResult, associate_frames
from .core import DataError, Displacement, HeadPoint, TrajectoryRow


def _bits(m) -> np.ndarray:
    return np.asarray(getattr(m, "array", m), dtype=bool)


def axis_endpoints(mask) -> tuple[np.ndarray, np.ndarray] | None:
    """The two pixels at the extremes of the mask's principal axis, as (x, y)."""
    ys, xs = np.nonzero(_bits(mask))
    if xs.size == 0:
        return None
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    if len(pts) == 1:
        return pts[0], pts[0]
    c = pts.mean(axis=0)
    cov = np.cov((pts - c).T)
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, np.argmax(evals)]
    # fix the sign so the ordering of the two ends is deterministic
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    proj = (pts - c) @ axis
    return pts[int(np.argmin(proj))], pts[int(np.argmax(proj))]


def head_of(mask_t, mask_t1, frame_index: int = 0, prev_head: HeadPoint | None = None) -> HeadPoint:
    """Head of the instance in frame t+1 given its mask in frame t.

    Fallback chain: centroid of mask_t1 minus mask_t ("difference"); the
    principal-axis end of mask_t1 nearest the previous head ("stationary");
    with no mask in t, the far end along the axis ("birth"); the previous
    head when mask_t1 is empty ("carried").
    """
    b1 = _bits(mask_t1)
    b0 = _bits(mask_t) if mask_t is not None else np.zeros_like(b1)
    if not b1.any():
        if prev_head is not None:
            return HeadPoint(prev_head.x, prev_head.y, frame_index, "carried")
        raise DataError("cannot locate a head: both masks are empty")
    if not b0.any():
        ends = axis_endpoints(b1)
        e = ends[1]
        if prev_head is not None:
            e = min(ends, key=lambda p: math.hypot(p[0] - prev_head.x, p[1] - prev_head.y))
        return HeadPoint(float(e[0]), float(e[1]), frame_index, "birth")
    diff = b1 & ~b0
    if diff.any():
        ys, xs = np.nonzero(diff)
        return HeadPoint(float(xs.mean()), float(ys.mean()), frame_index, "difference")
    ends = axis_endpoints(b1)
    if prev_head is not None:
        e = min(ends, key=lambda p: math.hypot(p[0] - prev_head.x, p[1] - prev_head.y))
    else:
        e = ends[1]
    return HeadPoint(float(e[0]), float(e[1]), frame_index, "stationary")


@dataclass
class Track:
    track_id: int
    frames: list[int] = field(default_factory=list)
    members: list[int] = field(default_factory=list)  # instance index within each frame
    heads: list[HeadPoint] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    @property
    def start(self) -> int:
        return self.frames[0]

    def displacements(self) -> list[tuple[int, Displacement]]:
        return [(t0, Displacement.between((a.x, a.y), (b.x, b.y)))
                for t0, a, b in zip(self.frames[:-1], self.heads[:-1], self.heads[1:])]


@dataclass
class TrajectorySet:
    tracks: list[Track]
    associations: list[AssociationResult]

    def rows(self, frame_rate: float, pixel_size: float | None = None) -> list[TrajectoryRow]:
        out = []
        for tr in self.tracks:
            for (t, d), s in zip(tr.displacements(), velocity(tr, frame_rate, pixel_size)[0]):
                c = d.coords
                out.append(TrajectoryRow(tr.track_id, t, c[0], c[1], c[2], c[3], s))
        out.sort(key=lambda r: (r.t, r.track_id))
        return out

    def per_transition(self, num_frames: int) -> list[list[Displacement]]:
        """Estimated displacements grouped by their start frame."""
        out: list[list[Displacement]] = [[] for _ in range(max(0, num_frames - 1))]
        for tr in self.tracks:
            for t, d in tr.displacements():
                out[t].append(d)
        return out


def build_tracks(frames: Sequence[Sequence], iou_floor: float = 0.05,
                 associations: Sequence[AssociationResult] | None = None) -> TrajectorySet:
    """Fold frame-to-frame associations into tracks; unmatched instances open new tracks.

    Empty masks have no head to follow, so they never open a track.
    """
    frames = [list(f) for f in frames]
    if associations is None:
        associations = [associate_frames(a, b, iou_floor) for a, b in zip(frames[:-1], frames[1:])]
    tracks: list[Track] = []
    live: dict[int, Track] = {}
    for i, m in enumerate(frames[0] if frames else []):
        if not _bits(m).any():
            continue
        tr = Track(len(tracks))
        tr.frames.append(0)
        tr.members.append(i)
        tr.heads.append(head_of(None, m, 0))
        tracks.append(tr)
        live[i] = tr
    for t, assoc in enumerate(associations):
        nxt: dict[int, Track] = {}
        fresh = list(assoc.entries)
        for i, j in assoc.pairs:
            if i not in live:
                fresh.append(j)
                continue
            tr = live[i]
            tr.frames.append(t + 1)
            tr.members.append(j)
            tr.heads.append(head_of(frames[t][i], frames[t + 1][j], t + 1, tr.heads[-1]))
            nxt[j] = tr
        for j in sorted(fresh):
            if not _bits(frames[t + 1][j]).any():
                continue
            tr = Track(len(tracks))
            tr.frames.append(t + 1)
            tr.members.append(j)
            tr.heads.append(head_of(None, frames[t + 1][j], t + 1))
            tracks.append(tr)
            nxt[j] = tr
        live = nxt
    return TrajectorySet(tracks, list(associations))


def velocity(track: Track, frame_rate: float, pixel_size: float | None = None) -> tuple[list[float], list[float]]:
    """Per-step speed (px/s, or length units/s with pixel_size) and heading in radians."""
    if len(track) < 2:
        return [], []
    scale = frame_rate * (pixel_size if pixel_size else 1.0)
    speeds, headings = [], []
    for a, b in zip(track.heads[:-1], track.heads[1:]):
        dx, dy = b.x - a.x, b.y - a.y
        speeds.append(math.hypot(dx, dy) * scale)
        headings.append(math.atan2(dy, dx))
    return speeds, headings


def track_velocity(track: Track, frame_rate: float, pixel_size: float | None = None):
    """Like :func:`velocity` but refuses tracks shorter than two frames."""
    if len(track) < 2:
        raise ValueError(f"track {track.track_id} has fewer than two frames")
    return velocity(track, frame_rate, pixel_size)
