"""Domain types, mask algebra and on-disk formats.

Frames are kept as 8-bit RGB internally so that the PNG round trip is exact.
Masks are packed bitmaps; the files carry them as run-length strings.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# frames and sequences

@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB frame. ``data`` is an (H, W, 3) uint8 array."""

    data: np.ndarray
    index: int
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise DataError(f"frame must be HxWx3, got {d.shape}")
        if d.shape[0] < 16 or d.shape[1] < 16:
            raise DataError(f"frame must be at least 16x16, got {d.shape[:2]}")
        if d.dtype != np.uint8:
            raise DataError("frame data must be uint8")
        if self.index < 0:
            raise DataError("frame index must be non-negative")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @classmethod
    def from_float(cls, pixels: np.ndarray, index: int, timestamp: float = 0.0) -> "Frame":
        p = np.asarray(pixels, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise DataError("non-finite pixel values")
        q = np.rint(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cls(q, index, timestamp)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def pixels(self) -> np.ndarray:
        """Float view in [0, 1], shape (H, W, 3)."""
        return self.data.astype(np.float64) / 255.0

    @property
    def gray(self) -> np.ndarray:
        return self.pixels.mean(axis=2)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.index == other.index and self.timestamp == other.timestamp
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ImageSequence:
    frames: tuple[Frame, ...]
    frame_rate: float
    pixel_size: float | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.frame_rate <= 0:
            raise DataError("frame_rate must be positive")
        for i, f in enumerate(frames):
            if f.index != i:
                raise DataError(f"frame indices must be consecutive from 0 (got {f.index} at {i})")
            if f.shape != frames[0].shape:
                raise DataError("all frames must share one size")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, t):
        return self.frames[t]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape if self.frames else (0, 0)

    def __eq__(self, other):
        if not isinstance(other, ImageSequence):
            return NotImplemented
        return (self.frame_rate == other.frame_rate and self.pixel_size == other.pixel_size
                and self.frames == other.frames)


# ---------------------------------------------------------------------------
# masks

@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Binary instance mask stored as a packed bitmap."""

    packed: np.ndarray
    shape: tuple[int, int]
    instance_id: int = 0
    frame_index: int = 0

    @classmethod
    def from_array(cls, bits, instance_id: int = 0, frame_index: int = 0) -> "InstanceMask":
        b = np.asarray(bits).astype(bool)
        if b.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {b.shape}")
        return cls(np.packbits(b.ravel()), (int(b.shape[0]), int(b.shape[1])),
                   int(instance_id), int(frame_index))

    @cached_property
    def array(self) -> np.ndarray:
        h, w = self.shape
        a = np.unpackbits(self.packed, count=h * w).astype(bool).reshape(h, w)
        a.setflags(write=False)
        return a

    @property
    def area(self) -> int:
        return int(self.array.sum())

    def centroid(self) -> tuple[float, float] | None:
        ys, xs = np.nonzero(self.array)
        if len(xs) == 0:
            return None
        return float(xs.mean()), float(ys.mean())

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return (self.shape == other.shape and self.instance_id == other.instance_id
                and self.frame_index == other.frame_index
                and np.array_equal(self.packed, other.packed))


@dataclass(frozen=True)
class LabelStack:
    """Possibly overlapping instance masks of one frame (the 3-D label tensor)."""

    masks: tuple[InstanceMask, ...] = ()
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        masks = tuple(self.masks)
        object.__setattr__(self, "masks", masks)
        if masks:
            s = masks[0].shape
            if any(m.shape != s for m in masks):
                raise DataError("masks in a stack must share one size")
            if self.shape is None:
                object.__setattr__(self, "shape", s)
            elif tuple(self.shape) != s:
                raise DataError("stack shape does not match its masks")

    @property
    def count(self) -> int:
        return len(self.masks)

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def tensor(self) -> np.ndarray:
        """Stack along a third axis: (H, W, n)."""
        if not self.masks:
            h, w = self.shape or (0, 0)
            return np.zeros((h, w, 0), dtype=bool)
        return np.stack([m.array for m in self.masks], axis=2)


@dataclass(frozen=True)
class HeadPoint:
    x: float
    y: float
    frame_index: int
    flag: str = "difference"


@dataclass(frozen=True)
class Displacement:
    """A head displacement between frames t and t+1, stored as [x_t, y_t, x_t1, y_t1]."""

    coords: tuple[float, float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.coords)
        if len(c) != 4 or not all(math.isfinite(v) for v in c):
            raise DataError(f"displacement needs 4 finite coordinates, got {self.coords}")
        object.__setattr__(self, "coords", c)

    @classmethod
    def between(cls, a: tuple[float, float], b: tuple[float, float]) -> "Displacement":
        return cls((a[0], a[1], b[0], b[1]))

    def vector(self, mode: str = "literal4") -> np.ndarray:
        """``literal4`` gives the raw 4-vector, ``diff2`` the endpoint difference."""
        c = np.asarray(self.coords)
        if mode == "literal4":
            return c
        if mode == "diff2":
            return c[2:] - c[:2]
        raise ValueError(f"unknown displacement mode {mode!r}")

    @property
    def center(self) -> np.ndarray:
        c = self.coords
        return np.array([(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0])


# ---------------------------------------------------------------------------
# mask algebra

def _check_same(a: InstanceMask, b: InstanceMask):
    if a.shape != b.shape:
        raise DataError(f"mask size mismatch: {a.shape} vs {b.shape}")


def mask_overlap_stats(a: InstanceMask, b: InstanceMask) -> tuple[int, int]:
    """(intersection, union) pixel counts."""
    _check_same(a, b)
    # popcount on the packed bytes
    inter = int(np.unpackbits(a.packed & b.packed).sum())
    union = int(np.unpackbits(a.packed | b.packed).sum())
    return inter, union


def weighted_average(masks: Sequence[InstanceMask], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Mean of the previously segmented masks; all zeros when there are none."""
    if not masks:
        if shape is None:
            raise ValueError("shape is required for an empty mask list")
        return np.zeros(shape)
    s = masks[0].shape
    acc = np.zeros(s)
    for m in masks:
        if m.shape != s:
            raise DataError("mask size mismatch in weighted_average")
        acc += m.array
    return acc / len(masks)


# ---------------------------------------------------------------------------
# run-length strings: "HxW:r0 r1 ..." with runs alternating 0/1, starting at 0

def rle_encode(mask: InstanceMask | np.ndarray) -> str:
    bits = mask.array if isinstance(mask, InstanceMask) else np.asarray(mask).astype(bool)
    h, w = bits.shape
    flat = bits.ravel().astype(np.int8)
    if flat.size == 0:
        return f"{h}x{w}:"
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return f"{h}x{w}:" + " ".join(str(r) for r in runs)


def rle_decode(text: str, instance_id: int = 0, frame_index: int = 0) -> InstanceMask:
    try:
        head, _, body = text.partition(":")
        h, w = (int(v) for v in head.split("x"))
        runs = [int(r) for r in body.split()]
    except ValueError as exc:
        raise DataError(f"bad run-length string {text[:40]!r}") from exc
    if sum(runs) != h * w or any(r < 0 for r in runs):
        raise DataError("run lengths do not cover the mask")
    vals = np.arange(len(runs)) % 2
    flat = np.repeat(vals.astype(bool), runs)
    return InstanceMask.from_array(flat.reshape(h, w), instance_id, frame_index)


# ---------------------------------------------------------------------------
# files

def save_sequence(seq: ImageSequence, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = seq.shape
    meta = {"frame_rate": seq.frame_rate, "height": h, "width": w,
            "num_frames": len(seq), "timestamps": [f.timestamp for f in seq.frames]}
    if seq.pixel_size is not None:
        meta["pixel_size"] = seq.pixel_size
    for f in seq.frames:
        # fixed PNG settings keep the files byte-identical across runs
        Image.fromarray(f.data, mode="RGB").save(d / f"frame_{f.index:05d}.png", optimize=False)
    (d / "sequence.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_sequence(directory: str | Path) -> ImageSequence:
    d = Path(directory)
    meta_path = d / "sequence.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    files = sorted(d.glob("frame_*.png"))
    if not files:
        raise DataError(f"no frames in {d}")
    stamps = meta.get("timestamps")
    frames = []
    for i, p in enumerate(files):
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
        ts = stamps[i] if stamps else i / meta["frame_rate"]
        frames.append(Frame(arr, i, float(ts)))
    seq = ImageSequence(tuple(frames), float(meta["frame_rate"]), meta.get("pixel_size"))
    if seq.shape != (meta["height"], meta["width"]):
        raise DataError("frame size disagrees with sequence.json")
    return seq


@dataclass(frozen=True)
class InstanceRecord:
    """One (frame, instance) row of an annotation or result file."""

    frame: int
    id: int
    mask: InstanceMask
    head: tuple[float, float] | None = None
    score: float | None = None


def records_to_jsonl(records: Iterable[InstanceRecord]) -> str:
    out = io.StringIO()
    for r in records:
        row = {"frame": r.frame, "id": r.id, "rle": rle_encode(r.mask),
               "head": None if r.head is None else [float(r.head[0]), float(r.head[1])]}
        if r.score is not None:
            row["score"] = float(r.score)
        out.write(json.dumps(row) + "\n")
    return out.getvalue()


def write_jsonl(records: Iterable[InstanceRecord], path: str | Path) -> None:
    Path(path).write_text(records_to_jsonl(records))


def read_jsonl(path: str | Path) -> list[InstanceRecord]:
    recs = []
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p} not found")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            mask = rle_decode(row["rle"], row["id"], row["frame"])
            head = tuple(row["head"]) if row.get("head") is not None else None
            recs.append(InstanceRecord(int(row["frame"]), int(row["id"]), mask, head, row.get("score")))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{p}:{n}: bad record ({exc})") from exc
    return recs


def group_by_frame(records: Iterable[InstanceRecord], num_frames: int | None = None) -> list[list[InstanceRecord]]:
    recs = list(records)
    n = num_frames if num_frames is not None else (max((r.frame for r in recs), default=-1) + 1)
    out: list[list[InstanceRecord]] = [[] for _ in range(n)]
    for r in recs:
        out[r.frame].append(r)
    return out


TRACK_COLUMNS = ("track_id", "t", "x_t", "y_t", "x_t1", "y_t1", "speed_px_per_s")


@dataclass(frozen=True)
class TrajectoryRow:
    track_id: int
    t: int
    x_t: float
    y_t: float
    x_t1: float
    y_t1: float
    speed_px_per_s: float

    @property
    def displacement(self) -> Displacement:
        return Displacement((self.x_t, self.y_t, self.x_t1, self.y_t1))


def trajectories_to_csv(rows: Iterable[TrajectoryRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACK_COLUMNS)
    for r in rows:
        # repr() gives the shortest string that round-trips the float exactly
        w.writerow([r.track_id, r.t, repr(r.x_t), repr(r.y_t), repr(r.x_t1), repr(r.y_t1),
                    repr(r.speed_px_per_s)])
    return out.getvalue()


def csv_to_trajectories(text: str) -> list[TrajectoryRow]:
    rd = csv.DictReader(io.StringIO(text))
    if rd.fieldnames is None or tuple(rd.fieldnames) != TRACK_COLUMNS:
        raise DataError(f"trajectory CSV must have columns {TRACK_COLUMNS}")
    return [TrajectoryRow(int(r["track_id"]), int(r["t"]), float(r["x_t"]), float(r["y_t"]),
                          float(r["x_t1"]), float(r["y_t1"]), float(r["speed_px_per_s"])) for r in rd]


def write_trajectories(rows: Sequence[TrajectoryRow], csv_path: str | Path) -> None:
    """CSV plus a JSON mirror next to it (same stem, .json)."""
    p = Path(csv_path)
    p.write_text(trajectories_to_csv(rows))
    mirror = [dict(zip(TRACK_COLUMNS, (r.track_id, r.t, r.x_t, r.y_t, r.x_t1, r.y_t1, r.speed_px_per_s)))
              for r in rows]
    p.with_suffix(".json").write_text(json.dumps(mirror, indent=1) + "\n")


def read_trajectories(csv_path: str | Path) -> list[TrajectoryRow]:
    p = Path(csv_path)
    if not p.exists():
        raise DataError(f"{p} not found")
    return csv_to_trajectories(p.read_text())


def trajectories_from_json(text: str) -> list[TrajectoryRow]:
    return [TrajectoryRow(**{k: row[k] for k in TRACK_COLUMNS}) for row in json.loads(text)]
