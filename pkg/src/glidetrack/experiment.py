"""Ablation grid and robustness sweeps on simulated, annotated sequences."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import run_baseline
from .config import ConfigError, dataclass_from_dict, packaged
from .core import DataError, write_trajectories
from .dataset import AnnotatedSequence, load_collection, subsample
from .evaluation import GroundTruth, evaluate, pool_reports
from .flow import FlowCache
from .metrics import EvalReport
from .segmentation import InstanceSegmenter, ModelConfig, segment_sequence
from .simulator import SimConfig, generate_many
from .tracking import TrajectorySet, build_tracks
from .training import TrainConfig, build_samples, load_model, save_model, train

ATTENTION_VARIANTS = {"cnn_only": False, "cnn_lstm": True}
REPORT_COLUMNS = ("J_mean", "J_best", "BVs_mean", "BVs_best", "FDR", "FNR", "FPR", "seg_FNR",
                  "DiC_trans", "DiC_ext", "DiC_ent", "TP", "FP", "FN")
DELTA_MODES = ("literal4", "diff2")


@dataclass(frozen=True)
class Cell:
    mode: str
    L: int
    attention: str

    @property
    def name(self) -> str:
        return f"{self.mode}_L{self.L}_{self.attention}"

    def model_config(self, base: dict) -> ModelConfig:
        d = {**base, "mode": self.mode, "L": self.L, "use_lstm": ATTENTION_VARIANTS[self.attention]}
        return dataclass_from_dict(ModelConfig, d, "model")


@dataclass(frozen=True)
class ExperimentSpec:
    out_dir: Path
    modes: tuple[str, ...] = ("raw", "flow")
    Ls: tuple[int, ...] = (1, 3, 5)
    attentions: tuple[str, ...] = ("cnn_only", "cnn_lstm")
    sim: SimConfig = field(default_factory=SimConfig.toy)
    model: dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    seed: int = 0
    train_sequences: int = 8
    eval_sequences: int = 4
    train_data: Path | None = None
    eval_data: Path | None = None
    delta_mode: str = "literal4"
    max_instances: int | None = None
    densities: tuple[int, ...] = (10, 20, 30, 40)
    frame_rates: tuple[float, ...] = (16.0, 8.0, 4.0)
    checkpoint: Path | None = None
    method: str = "model"

    def __post_init__(self):
        if not (self.modes and self.Ls and self.attentions):
            raise ConfigError("experiment grid is empty")
        bad = [m for m in self.modes if m not in ("raw", "flow")]
        bad += [a for a in self.attentions if a not in ATTENTION_VARIANTS]
        if bad:
            raise ConfigError(f"unknown grid values: {bad}")
        if any(int(L) < 1 for L in self.Ls):
            raise ConfigError("L values must be >= 1")
        names = [c.name for c in self.cells()]
        if len(set(names)) != len(names):
            raise ConfigError("grid has duplicate cells")
        if self.delta_mode not in DELTA_MODES:
            raise ConfigError(f"delta_mode must be one of {DELTA_MODES}")
        if self.method not in ("model", "baseline"):
            raise ConfigError("method must be 'model' or 'baseline'")
        if self.train_sequences < 1 or self.eval_sequences < 1:
            raise ConfigError("sequence counts must be >= 1")

    def cells(self) -> list[Cell]:
        return [Cell(m, int(L), a) for m in self.modes for L in self.Ls for a in self.attentions]

    def seeds(self) -> dict[str, int]:
        """Train-data, eval-data and model seeds, all derived from the one experiment seed."""
        s = np.random.SeedSequence(self.seed).generate_state(3)
        return {"train": int(s[0]), "eval": int(s[1]), "model": int(s[2])}

    @classmethod
    def from_dict(cls, d: dict, out_dir: str | Path, seed: int | None = None) -> "ExperimentSpec":
        exp = dict(d.get("experiment", {}))
        kw: dict = {"out_dir": Path(out_dir)}
        renames = {"mode": "modes", "L": "Ls", "attention": "attentions"}
        for key, value in exp.items():
            name = renames.get(key, key)
            if name not in cls.__dataclass_fields__ or name in ("sim", "model", "train", "out_dir"):
                raise ConfigError(f"unknown experiment key {key!r}")
            if name in ("train_data", "eval_data", "checkpoint"):
                value = Path(value)
            elif isinstance(value, list):
                value = tuple(value)
            elif name in ("modes", "Ls", "attentions", "densities", "frame_rates"):
                value = (value,)
            kw[name] = value
        if seed is not None:
            kw["seed"] = seed
        kw["sim"] = sim_from_section(d.get("sim", {}))
        kw["model"] = dict(d.get("model", {}))
        dataclass_from_dict(ModelConfig, kw["model"], "model")
        kw["train"] = dataclass_from_dict(TrainConfig, dict(d.get("train", {})), "train")
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def sim_from_section(d: dict) -> SimConfig:
    """``preset`` ("toy" or "default") plus field overrides."""
    d = dict(d)
    preset = d.pop("preset", "toy")
    if preset not in ("toy", "default"):
        raise ConfigError(f"unknown simulator preset {preset!r}")
    return SimConfig.from_dict(packaged(f"sim_{preset}.toml"), **d)


# ---------------------------------------------------------------------------
# running a method over annotated data

Method = InstanceSegmenter | str


@dataclass
class MethodOutput:
    frames: list[list[np.ndarray]]
    tracks: TrajectorySet


def run_method(method: Method, ann: AnnotatedSequence, max_instances: int | None = None,
               cache: FlowCache | None = None) -> MethodOutput:
    """Per-frame masks and trajectories of the model, or of the threshold baseline for ``"baseline"``."""
    if isinstance(method, str):
        if method != "baseline":
            raise ValueError(f"unknown method {method!r}")
        frames, tracks = run_baseline(ann.sequence)
        return MethodOutput(frames, tracks)
    res = segment_sequence(method, ann.sequence, cache, max_instances)
    frames = [[r.mask for r in f] for f in res]
    return MethodOutput(frames, build_tracks(frames))


def score(outputs: Sequence[MethodOutput], data: Sequence[AnnotatedSequence], mode: str = "literal4") -> EvalReport:
    reports = [evaluate(o.frames, GroundTruth(a.labels, a.heads), tracks=o.tracks, mode=mode)
               for o, a in zip(outputs, data)]
    return pool_reports(reports)


def evaluate_method(method: Method, data: Sequence[AnnotatedSequence], mode: str = "literal4",
                    max_instances: int | None = None, cache: FlowCache | None = None) -> EvalReport:
    return score([run_method(method, a, max_instances, cache) for a in data], data, mode)


# ---------------------------------------------------------------------------
# report files

def reports_csv(axis: str, items: Sequence[tuple[object, EvalReport]]) -> str:
    """One row per report; floats via repr so reruns are byte-identical."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow((axis,) + REPORT_COLUMNS)
    for key, rep in items:
        d = rep.to_dict()
        wr.writerow([key] + [repr(d[c]) if isinstance(d[c], float) else d[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(rep: EvalReport, directory: Path, title: str = "") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    (directory / "report.txt").write_text(rep.table(title) + "\n")


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(**{k: v for k, v in d.items() if k in EvalReport.__dataclass_fields__})


# ---------------------------------------------------------------------------
# grid

def _simulated(spec: ExperimentSpec, which: str, sim: SimConfig | None = None) -> list[AnnotatedSequence]:
    path = spec.train_data if which == "train" else spec.eval_data
    if path is not None and sim is None:
        if not path.exists():
            raise DataError(f"dataset {path} not found")
        return load_collection(path)
    n = spec.train_sequences if which == "train" else spec.eval_sequences
    results = generate_many(sim or spec.sim, n, seed=spec.seeds()[which])
    return [AnnotatedSequence.from_result(r) for r in results]


def train_cell(cell: Cell, spec: ExperimentSpec, train_set: Sequence[AnnotatedSequence],
               out_dir: Path) -> InstanceSegmenter:
    h, w = train_set[0].sequence.shape
    cfg = cell.model_config({"height": h, "width": w, **spec.model})
    samples = build_samples([(a.sequence, a.labels) for a in train_set], cfg, FlowCache.from_env())
    res = train(samples, cfg, replace(spec.train, seed=spec.seeds()["model"]))
    save_model(res, out_dir, {"cell": cell.name})
    return res.model


def run_cell(cell: Cell, spec: ExperimentSpec, train_set: Sequence[AnnotatedSequence],
             eval_set: Sequence[AnnotatedSequence]) -> EvalReport:
    """Train one grid cell, evaluate it, and write its subdirectory."""
    d = spec.out_dir / cell.name
    model = train_cell(cell, spec, train_set, d)
    outputs = [run_method(model, a, spec.max_instances, FlowCache.from_env()) for a in eval_set]
    rep = score(outputs, eval_set, spec.delta_mode)
    write_report(rep, d, cell.name)
    for i, (o, a) in enumerate(zip(outputs, eval_set)):
        write_trajectories(o.tracks.rows(a.sequence.frame_rate, a.sequence.pixel_size), d / f"tracks_{i:03d}.csv")
    return rep


def _run_cell_job(args):
    return run_cell(*args)


def _map(fn, jobs_args: list, jobs: int) -> list:
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(min(jobs, len(jobs_args))) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class Sweep:
    axis: str
    reports: list[tuple[object, EvalReport]]
    monotone: bool | None = None

    def to_dict(self) -> dict:
        out = {"axis": self.axis, "reports": {str(k): r.to_dict() for k, r in self.reports}}
        if self.monotone is not None:
            out["monotone"] = self.monotone
        return out


def non_decreasing(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


def _density_job(args):
    method, sim, n, seed, mode, max_instances = args
    data = [AnnotatedSequence.from_result(r) for r in generate_many(sim, n, seed=seed)]
    return evaluate_method(method, data, mode, max_instances, FlowCache.from_env())


def density_sweep(method: Method, sim: SimConfig, densities: Sequence[int], n: int, seed: int,
                  mode: str = "literal4", max_instances: int | None = None, jobs: int = 1) -> Sweep:
    """Evaluate at fixed filament counts; the trend check asks segmentation FNR never to drop."""
    args = [(method, replace(sim, initial_count=int(d), max_count=int(d)), n, seed, mode, max_instances)
            for d in densities]
    reps = _map(_density_job, args, jobs)
    return Sweep("density", list(zip(densities, reps)), non_decreasing([r.seg_FNR for r in reps]))


def _rate_job(args):
    method, data, step, mode, max_instances = args
    sub = [subsample(a, step) for a in data]
    return evaluate_method(method, sub, mode, max_instances, FlowCache.from_env())


def frame_rate_sweep(method: Method, data: Sequence[AnnotatedSequence], rates: Sequence[float],
                     mode: str = "literal4", max_instances: int | None = None, jobs: int = 1) -> Sweep:
    """Evaluate on the same recordings thinned to lower frame rates."""
    base = data[0].sequence.frame_rate
    steps = []
    for r in rates:
        step = base / float(r)
        if r <= 0 or abs(step - round(step)) > 1e-9 or round(step) < 1:
            raise ConfigError(f"frame rate {r} does not divide the recorded {base} fps")
        steps.append(int(round(step)))
    reps = _map(_rate_job, [(method, data, s, mode, max_instances) for s in steps], jobs)
    return Sweep("frame_rate", list(zip(rates, reps)))


# ---------------------------------------------------------------------------
# orchestration

def _sweep_method(spec: ExperimentSpec, grid_models: dict[str, Path]) -> Method:
    if spec.method == "baseline":
        return "baseline"
    path = spec.checkpoint or next(iter(grid_models.values()), None)
    if path is None or not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    return load_model(path)


def run_experiment(spec: ExperimentSpec, grid: bool = True, density: bool = False, frame_rate: bool = False,
                   jobs: int = 1) -> dict:
    """Run the requested parts and write the report tree; returns it as a dict."""
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    tree: dict = {}
    models: dict[str, Path] = {}
    eval_set: list[AnnotatedSequence] | None = None
    if grid:
        train_set, eval_set = _simulated(spec, "train"), _simulated(spec, "eval")
        cells = spec.cells()
        reps = _map(_run_cell_job, [(c, spec, train_set, eval_set) for c in cells], jobs)
        items = [(c.name, r) for c, r in zip(cells, reps)]
        (out / "grid.csv").write_text(reports_csv("cell", items))
        tree["grid"] = Sweep("cell", items).to_dict()
        models = {c.name: out / c.name / "model.ckpt" for c in cells}
    if density or frame_rate:
        method = _sweep_method(spec, models)
        if density:
            sw = density_sweep(method, spec.sim, spec.densities, spec.eval_sequences, spec.seeds()["eval"],
                               spec.delta_mode, spec.max_instances, jobs)
            (out / "density.csv").write_text(reports_csv("density", sw.reports))
            tree["density"] = sw.to_dict()
        if frame_rate:
            data = eval_set if eval_set is not None else _simulated(spec, "eval")
            sw = frame_rate_sweep(method, data, spec.frame_rates, spec.delta_mode, spec.max_instances, jobs)
            (out / "frame_rate.csv").write_text(reports_csv("frame_rate", sw.reports))
            tree["frame_rate"] = sw.to_dict()
    (out / "report.json").write_text(json.dumps(tree, indent=1) + "\n")
    return tree


def load_report_tree(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    if not p.exists():
        raise DataError(f"{p} not found")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: {exc}") from exc
    # a bare EvalReport file becomes a one-report tree
    if "FNR" in d:
        return {"single": {"axis": "report", "reports": {p.parent.name or "report": d}}}
    return d

