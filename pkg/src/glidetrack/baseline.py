"""Reference method: global threshold, connected components, nearest-centroid linking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageSequence
from .tracking import Track, TrajectorySet, head_of


def otsu_level(gray: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising the between-class variance of the gray histogram."""
    hist, edges = np.histogram(gray, bins=bins)
    p = hist.astype(np.float64) / max(1, hist.sum())
    mids = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * mids)
    total = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total * w0 - mu) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    return float(mids[int(np.argmax(between))])


@dataclass(frozen=True)
class BaselineConfig:
    min_area: int = 6
    max_link_dist: float = 8.0


def segment_threshold(gray: np.ndarray, cfg: BaselineConfig = BaselineConfig()) -> list[np.ndarray]:
    """Connected foreground components of one frame, largest first."""
    fg = gray > otsu_level(gray)
    lab, n = ndimage.label(fg, structure=np.ones((3, 3)))
    comps = [lab == i for i in range(1, n + 1)]
    comps = [c for c in comps if c.sum() >= cfg.min_area]
    comps.sort(key=lambda c: (-int(c.sum()), tuple(np.argwhere(c)[0])))
    return comps


def _centroid(m: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(m)
    return np.array([xs.mean(), ys.mean()])


def link_nearest(frames: list[list[np.ndarray]], cfg: BaselineConfig = BaselineConfig()) -> TrajectorySet:
    """Greedy nearest-centroid linking of consecutive frames (closest pairs first)."""
    tracks: list[Track] = []
    live: dict[int, Track] = {}

    def open_track(t, j, m):
        tr = Track(len(tracks), [t], [j], [head_of(None, m, t)])
        tracks.append(tr)
        return tr

    for j, m in enumerate(frames[0] if frames else []):
        live[j] = open_track(0, j, m)
    for t in range(len(frames) - 1):
        a, b = frames[t], frames[t + 1]
        ca = [_centroid(m) for m in a]
        cb = [_centroid(m) for m in b]
        cand = sorted((float(np.hypot(*(ca[i] - cb[j]))), i, j) for i in range(len(a)) for j in range(len(b)))
        used_a, used_b = set(), set()
        nxt: dict[int, Track] = {}
        for d, i, j in cand:
            if d > cfg.max_link_dist or i in used_a or j in used_b:
                continue
            used_a.add(i)
            used_b.add(j)
            tr = live[i]
            tr.frames.append(t + 1)
            tr.members.append(j)
            tr.heads.append(head_of(a[i], b[j], t + 1, tr.heads[-1]))
            nxt[j] = tr
        for j, m in enumerate(b):
            if j not in used_b:
                nxt[j] = open_track(t + 1, j, m)
        live = nxt
    return TrajectorySet(tracks, [])


def run_baseline(seq: ImageSequence, cfg: BaselineConfig = BaselineConfig()):
    """Per-frame component masks and the linked trajectories."""
    frames = [segment_threshold(f.gray, cfg) for f in seq]
    return frames, link_nearest(frames, cfg)
