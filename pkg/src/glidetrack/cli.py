"""``glidetrack`` command line: simulate, flow, train, segment, track, eval, experiment, plot."""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, apply_overrides, dataclass_from_dict, load_toml
from .core import DataError, InstanceMask, InstanceRecord, group_by_frame, load_sequence, read_jsonl, \
    read_trajectories, write_jsonl, write_trajectories
from .dataset import AnnotatedSequence, labels_from_records, load_collection, save_collection
from .evaluation import GroundTruth, evaluate_rows
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _config(path: str | None, overrides: list[str] | None) -> dict:
    return apply_overrides(load_toml(path) if path else {}, overrides)


def _section(cfg: dict, *names: str) -> dict:
    for n in names:
        if n in cfg:
            return dict(cfg[n])
    return {}


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    from .experiment import sim_from_section
    from .simulator import generate_many

    cfg = _config(args.config, args.set)
    sim = sim_from_section({"preset": args.preset, **(_section(cfg, "sim", "simulator") or cfg)})
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    results = generate_many(sim, args.count, seed=args.seed, jobs=args.jobs)
    dirs = save_collection([AnnotatedSequence.from_result(r) for r in results], args.out)
    print(f"wrote {len(dirs)} sequence(s) of {sim.num_frames} frames to {args.out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    from .flow import FlowCache, sequence_flows

    seq = load_sequence(args.seq)
    flows = sequence_flows(seq, args.alpha, args.iters, FlowCache.from_env())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(flows):
        np.save(out / f"flow_{t:05d}.npy", f.stacked())
    print(f"wrote {len(flows)} flow fields to {out}")
    return EXIT_OK


def _cv_report(data, model_cfg, train_cfg, folds: int, out: Path):
    """Smoke-scale K-fold check: train on K-1 folds, score on the held-out one."""
    from .experiment import evaluate_method, reports_csv
    from .flow import FlowCache
    from .training import build_samples, train

    if not 2 <= folds <= len(data):
        raise ConfigError(f"--cv needs 2..{len(data)} folds for {len(data)} sequences")
    items = []
    for k in range(folds):
        held = [a for i, a in enumerate(data) if i % folds == k]
        rest = [a for i, a in enumerate(data) if i % folds != k]
        samples = build_samples([(a.sequence, a.labels) for a in rest], model_cfg, FlowCache.from_env())
        res = train(samples, model_cfg, train_cfg)
        items.append((k, evaluate_method(res.model, held)))
    (out / "cv.csv").write_text(reports_csv("fold", items))


def cmd_train(args) -> int:
    from .flow import FlowCache
    from .segmentation import ModelConfig
    from .training import TrainConfig, build_samples, save_model, train

    cfg = _config(args.config, args.set)
    data = load_collection(args.data)
    h, w = data[0].sequence.shape
    mdict = {"height": h, "width": w, **_section(cfg, "model")}
    model_cfg = dataclass_from_dict(ModelConfig, mdict, "model")
    tdict = _section(cfg, "train")
    if args.seed is not None:
        tdict["seed"] = args.seed
    train_cfg = dataclass_from_dict(TrainConfig, tdict, "train")
    if any(a.sequence.shape != (model_cfg.height, model_cfg.width) for a in data):
        raise DataError("training sequences must match the model's frame size")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cv:
        _cv_report(data, model_cfg, train_cfg, args.cv, out)
    samples = build_samples([(a.sequence, a.labels) for a in data], model_cfg, FlowCache.from_env())

    def progress(r):
        if args.verbose:
            print(f"step {r.step} {r.stage} L_total={r.L_total:.4f}", file=sys.stderr)

    res = train(samples, model_cfg, train_cfg, progress=progress, time_budget=args.time_budget)
    path = save_model(res, out, {"train": tdict})
    first, last = res.history[0].L_total, res.history[-1].L_total
    print(f"trained {len(res.history)} steps in {res.seconds:.1f}s, L_total {first:.4f} -> {last:.4f}; "
          f"checkpoint {path}")
    return EXIT_OK


def results_to_records(results) -> list[InstanceRecord]:
    """Flatten per-frame InstanceResult lists into JSON-lines records (id = order found)."""
    recs = []
    for t, frame in enumerate(results):
        for k, r in enumerate(frame):
            recs.append(InstanceRecord(t, k, InstanceMask.from_array(r.mask, k, t), None, float(r.score)))
    return recs


def cmd_segment(args) -> int:
    from .flow import FlowCache
    from .segmentation import segment_sequence
    from .training import load_model

    model = load_model(args.model)
    cfg = model.cfg
    if args.mode is not None and args.mode != cfg.mode:
        raise ConfigError(f"checkpoint was trained with mode={cfg.mode}, not {args.mode}")
    if args.L is not None and args.L != cfg.L:
        raise ConfigError(f"checkpoint was trained with L={cfg.L}, not {args.L}")
    if args.theta is not None:
        if not 0.0 < args.theta < 1.0:
            raise ConfigError("--theta must lie in (0, 1)")
        model.cfg = replace(cfg, threshold=args.theta)
    seq = load_sequence(args.seq)
    if seq.shape != (cfg.height, cfg.width):
        raise DataError(f"sequence is {seq.shape}, model expects {(cfg.height, cfg.width)}")
    results = segment_sequence(model, seq, FlowCache.from_env(), args.max_instances)
    recs = results_to_records(results)
    write_jsonl(recs, args.out)
    print(f"wrote {len(recs)} instances over {len(seq)} frames to {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .tracking import build_tracks

    recs = read_jsonl(args.segments)
    if args.seq:
        seq = load_sequence(args.seq)
        n, rate, px = len(seq), seq.frame_rate, seq.pixel_size
    else:
        n = max((r.frame for r in recs), default=-1) + 1
        rate, px = args.frame_rate, args.pixel_size
    if any(r.frame >= n for r in recs):
        raise DataError("segments refer to frames beyond the sequence")
    frames = [[r.mask for r in f] for f in group_by_frame(recs, n)]
    rows = build_tracks(frames, args.iou_floor).rows(rate, px)
    write_trajectories(rows, args.out)
    print(f"wrote {len(rows)} displacements to {args.out}")
    return EXIT_OK


def _gt_from_file(path: str) -> GroundTruth:
    recs = read_jsonl(path)
    if not recs:
        raise DataError(f"{path} has no annotations")
    n = max(r.frame for r in recs) + 1
    labels, heads = labels_from_records(recs, n, recs[0].mask.shape)
    return GroundTruth(labels, heads)


def cmd_eval(args) -> int:
    gt = _gt_from_file(args.gt)
    rows = read_trajectories(args.pred)
    frames = None
    if args.segments:
        frames = [[r.mask for r in f] for f in group_by_frame(read_jsonl(args.segments), len(gt.labels))]
    modes = ("literal4", "diff2") if args.delta_mode == "both" else (args.delta_mode,)
    reports = {m: evaluate_rows(rows, gt, frames, m) for m in modes}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    body = reports[modes[0]].to_dict() if len(modes) == 1 else {m: r.to_dict() for m, r in reports.items()}
    out.write_text(json.dumps(body, indent=1) + "\n")
    from .experiment import reports_csv
    out.with_suffix(".csv").write_text(reports_csv("delta_mode", list(reports.items())))
    for m, r in reports.items():
        print(r.table(f"delta mode {m}"))
        for f in r.flags:
            print(f"note: {f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import ExperimentSpec, run_experiment

    cfg = _config(args.config, args.set)
    spec = ExperimentSpec.from_dict(cfg, args.out, args.seed)
    tree = run_experiment(spec, grid=not args.no_grid, density=args.density_sweep,
                          frame_rate=args.frame_rate_sweep, jobs=args.jobs)
    for name, entry in tree.items():
        keys = ", ".join(entry["reports"])
        extra = f"; monotone={entry['monotone']}" if "monotone" in entry else ""
        print(f"{name}: {len(entry['reports'])} report(s) [{keys}]{extra}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .experiment import load_report_tree
    from .plotting import emit_plots, loss_curve, overlay_frames

    files = []
    if args.report:
        files += emit_plots(load_report_tree(args.report), args.out)
    if args.losses:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        files += loss_curve(args.losses, Path(args.out) / "losses")
    if args.seq:
        if not args.tracks:
            raise ConfigError("--seq needs --tracks for velocity overlays")
        seq = load_sequence(args.seq)
        rows = read_trajectories(args.tracks)
        gt_rows = read_trajectories(args.gt_tracks) if args.gt_tracks else None
        frames = [int(x) for x in args.frames.split(",")] if args.frames else None
        try:
            files += overlay_frames(seq, rows, Path(args.out) / "overlays", frames, gt_rows)
        except IndexError as exc:
            raise DataError(str(exc)) from exc
    if not (args.report or args.losses or args.seq):
        raise ConfigError("nothing to plot: give --report, --losses or --seq/--tracks")
    print(f"wrote {len(files)} file(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glidetrack", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def common(sp, seed=True, jobs=False, config=True):
        if config:
            sp.add_argument("--config", help="TOML config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="the one seed for all randomness")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    s = add("simulate", cmd_simulate, "simulate annotated gliding-assay sequences")
    common(s, jobs=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--preset", choices=("toy", "default"), default="default")

    s = add("flow", cmd_flow, "dense optical flow between consecutive frames")
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--iters", type=int, default=200)

    s = add("train", cmd_train, "two-stage training of the instance segmenter")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cv", type=int, default=0, metavar="K", help="smoke-scale K-fold check before the final fit")
    s.add_argument("--time-budget", type=float, default=None, help="stop after this many seconds")
    s.add_argument("--verbose", action="store_true")

    s = add("segment", cmd_segment, "segment every frame of a sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("raw", "flow"))
    s.add_argument("--L", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--max-instances", type=int)

    s = add("track", cmd_track, "link segments into trajectories")
    s.add_argument("--segments", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seq", help="sequence directory (frame count and rate)")
    s.add_argument("--frame-rate", type=float, default=16.0)
    s.add_argument("--pixel-size", type=float)
    s.add_argument("--iou-floor", type=float, default=0.05)

    s = add("eval", cmd_eval, "score trajectories against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--segments", help="result masks, enables segmentation metrics")
    s.add_argument("--delta-mode", choices=("literal4", "diff2", "both"), default="literal4")

    s = add("experiment", cmd_experiment, "ablation grid and robustness sweeps")
    common(s, jobs=True)
    s.add_argument("--out", required=True)
    s.add_argument("--density-sweep", action="store_true")
    s.add_argument("--frame-rate-sweep", action="store_true")
    s.add_argument("--no-grid", action="store_true")

    s = add("plot", cmd_plot, "figures from reports, loss curves and trajectories")
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="report.json or an experiment directory")
    s.add_argument("--losses", help="losses.csv from training")
    s.add_argument("--seq")
    s.add_argument("--tracks")
    s.add_argument("--gt-tracks")
    s.add_argument("--frames", help="comma-separated frame indices")
    return p


def _one_line(msg: object) -> str:
    return " ".join(str(msg).split())


def _warning_line(message, category, filename, lineno, line=None) -> str:
    return f"warning: {_one_line(message)}\n"


def main(argv: list[str] | None = None) -> int:
    warnings.formatwarning = _warning_line
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "fn", None):
            raise ConfigError("missing subcommand")
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: data: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: divergence: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, IndexError, OSError) as exc:
        print(f"error: data: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
