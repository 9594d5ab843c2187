"""Figures for report trees: metric-vs-axis plots, table images, velocity overlays."""
from __future__ import annotations

import csv
import warnings
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .core import ImageSequence, TrajectoryRow
from .metrics import EvalReport

PLOT_METRICS = ("J_mean", "BVs_mean", "FDR", "FNR", "seg_FNR", "FPR", "DiC_trans", "DiC_ext", "DiC_ent")
TABLE_METRICS = ("J_mean", "BVs_mean", "FDR", "FNR", "seg_FNR", "FPR", "DiC_trans", "DiC_ext", "DiC_ent",
                 "TP", "FP", "FN")
FORMATS = ("png", "svg")

# fixed ids and no timestamps keep SVG output identical across runs
_RC = {"svg.hashsalt": "glidetrack"}
_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}


def _save(fig, stem: Path, formats: Sequence[str]) -> list[Path]:
    out = []
    with matplotlib.rc_context(_RC):
        for fmt in formats:
            p = stem.with_suffix(f".{fmt}")
            fig.savefig(p, format=fmt, dpi=100, metadata=_META.get(fmt))
            out.append(p)
    return out


def _reports(entry: dict) -> list[tuple[str, EvalReport]]:
    fields = EvalReport.__dataclass_fields__
    return [(k, EvalReport(**{f: v for f, v in d.items() if f in fields})) for k, d in entry.get("reports", {}).items()]


def _numeric(keys: Sequence[str]) -> np.ndarray | None:
    try:
        return np.array([float(k) for k in keys])
    except ValueError:
        return None


def metric_plot(axis: str, items: Sequence[tuple[str, EvalReport]], metric: str, stem: Path,
                formats: Sequence[str] = FORMATS) -> list[Path]:
    keys = [k for k, _ in items]
    vals = [getattr(r, metric) for _, r in items]
    fig = Figure(figsize=(4.5, 3.2))
    ax = fig.subplots()
    xs = _numeric(keys)
    if xs is not None:
        ax.plot(xs, vals, "o-", color="tab:blue")
        ax.set_xticks(xs)
    else:
        ax.bar(range(len(keys)), vals, color="tab:blue")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=45, ha="right", fontsize=7)
    ax.set_xlabel(axis)
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, stem, formats)


def table_image(items: Sequence[tuple[str, EvalReport]], stem: Path, formats: Sequence[str] = ("png",)) -> list[Path]:
    """Render reports as a table, one row per report."""
    cells = [[k] + [f"{getattr(r, m):.3f}" if isinstance(getattr(r, m), float) else str(getattr(r, m))
                    for m in TABLE_METRICS] for k, r in items]
    fig = Figure(figsize=(1.0 + 0.75 * len(TABLE_METRICS), 0.6 + 0.3 * len(cells)))
    ax = fig.subplots()
    ax.axis("off")
    tab = ax.table(cellText=cells, colLabels=("",) + TABLE_METRICS, loc="center")
    tab.auto_set_font_size(False)
    tab.set_fontsize(7)
    fig.tight_layout()
    return _save(fig, stem, formats)


def emit_plots(tree: dict, out_dir: str | Path, formats: Sequence[str] = FORMATS) -> list[Path]:
    """Write one plot per metric and axis; a lone report becomes a single table image."""
    out = Path(out_dir)
    entries = [(name, e.get("axis", name), _reports(e)) for name, e in tree.items() if isinstance(e, dict)]
    entries = [e for e in entries if e[2]]
    total = sum(len(items) for _, _, items in entries)
    if total == 0:
        warnings.warn("report tree is empty; no plots written", stacklevel=2)
        return []
    out.mkdir(parents=True, exist_ok=True)
    if total == 1:
        return table_image(entries[0][2], out / "table")
    files = []
    for name, axis, items in entries:
        if len(items) == 1:
            files += table_image(items, out / f"{name}_table")
            continue
        for metric in PLOT_METRICS:
            files += metric_plot(axis, items, metric, out / f"{name}_{metric}", formats)
    return files


def arrows_at(rows: Sequence[TrajectoryRow], t: int) -> np.ndarray:
    """(n, 4) array of x, y, dx, dy for the displacements starting at frame t."""
    sel = [r for r in rows if r.t == t]
    return np.array([[r.x_t, r.y_t, r.x_t1 - r.x_t, r.y_t1 - r.y_t] for r in sel]).reshape(-1, 4)


def velocity_overlay(seq: ImageSequence, t: int, rows: Sequence[TrajectoryRow], stem: Path,
                     gt_rows: Sequence[TrajectoryRow] | None = None, scale: float = 3.0,
                     formats: Sequence[str] = ("png",)) -> list[Path]:
    """Frame t with estimated displacement arrows (red), and ground truth (cyan) when given.

    Arrows are lengthened by ``scale`` so one-pixel steps stay visible.
    """
    h, w = seq.shape
    zoom = max(1.0, 384 / max(h, w))
    fig = Figure(figsize=(w * zoom / 100, h * zoom / 100))
    ax = fig.subplots()
    ax.imshow(seq[t].data, interpolation="nearest")
    for arr, color in ((arrows_at(gt_rows, t) if gt_rows is not None else None, "cyan"),
                       (arrows_at(rows, t), "red")):
        if arr is None or not len(arr):
            continue
        ax.quiver(arr[:, 0], arr[:, 1], arr[:, 2] * scale, arr[:, 3] * scale, color=color, angles="xy",
                  scale_units="xy", scale=1.0, width=0.006)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_axis_off()
    fig.subplots_adjust(0, 0, 1, 1)
    return _save(fig, stem, formats)


def overlay_frames(seq: ImageSequence, rows: Sequence[TrajectoryRow], out_dir: str | Path,
                   frames: Sequence[int] | None = None, gt_rows: Sequence[TrajectoryRow] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = range(len(seq) - 1) if frames is None else frames
    files = []
    for t in ts:
        if not 0 <= t < len(seq):
            raise IndexError(f"frame {t} outside the sequence")
        files += velocity_overlay(seq, t, rows, out / f"overlay_{t:05d}", gt_rows)
    return files


def loss_curve(losses_csv: str | Path, stem: Path, formats: Sequence[str] = FORMATS) -> list[Path]:
    with open(losses_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        warnings.warn("loss file is empty; no plot written", stacklevel=2)
        return []
    steps = [int(r["step"]) for r in rows]
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    for name in ("L_att", "L_seg", "L_count", "L_total"):
        ax.plot(steps, [float(r[name]) for r in rows], label=name, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, stem, formats)
