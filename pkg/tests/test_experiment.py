from pathlib import Path

import pytest

from glidetrack.config import ConfigError
from glidetrack.dataset import AnnotatedSequence
from glidetrack.experiment import (Cell, ExperimentSpec, density_sweep, evaluate_method, frame_rate_sweep,
                                   load_report_tree, non_decreasing, reports_csv, sim_from_section)
from glidetrack.metrics import EvalReport
from glidetrack.simulator import SimConfig, generate_many


def test_full_grid_has_distinct_cells(tmp_path):
    spec = ExperimentSpec(tmp_path)
    names = [c.name for c in spec.cells()]
    assert len(names) == 12 == len(set(names))
    assert "flow_L5_cnn_lstm" in names and "raw_L1_cnn_only" in names


@pytest.mark.parametrize("kw", [dict(modes=()), dict(Ls=()), dict(attentions=("gru",)), dict(modes=("depth",)),
                                dict(Ls=(1, 1)), dict(Ls=(0,)), dict(delta_mode="l2"), dict(method="oracle"),
                                dict(eval_sequences=0)])
def test_invalid_specs(tmp_path, kw):
    with pytest.raises(ConfigError):
        ExperimentSpec(tmp_path, **kw)


def test_cell_model_config():
    cfg = Cell("raw", 3, "cnn_only").model_config({"max_instances": 7})
    assert (cfg.mode, cfg.L, cfg.use_lstm, cfg.max_instances) == ("raw", 3, False, 7)
    with pytest.raises(ConfigError):
        Cell("raw", 1, "cnn_lstm").model_config({"bogus": 1})


def test_from_dict_renames_and_scalars(tmp_path):
    d = {"experiment": {"mode": "flow", "L": [1, 3], "attention": "cnn_lstm", "eval_data": "x"},
         "sim": {"num_frames": 12}, "train": {"stage1_steps": 5}}
    spec = ExperimentSpec.from_dict(d, tmp_path, seed=7)
    assert spec.modes == ("flow",) and spec.Ls == (1, 3) and spec.attentions == ("cnn_lstm",)
    assert spec.eval_data == Path("x") and spec.seed == 7
    assert spec.sim.num_frames == 12 and spec.sim.crop == (64, 64)
    assert spec.train.stage1_steps == 5


@pytest.mark.parametrize("d", [{"experiment": {"colour": 1}}, {"train": {"steps": 1}}, {"model": {"depth": 2}},
                               {"sim": {"preset": "huge"}}, {"sim": {"frames": 3}}])
def test_from_dict_rejects_unknown_keys(tmp_path, d):
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict(d, tmp_path)


def test_seeds_derive_from_one_seed(tmp_path):
    a, b = ExperimentSpec(tmp_path, seed=1).seeds(), ExperimentSpec(tmp_path, seed=2).seeds()
    assert a == ExperimentSpec(tmp_path, seed=1).seeds()
    assert len(set(a.values())) == 3 and a != b


def test_sim_presets():
    assert sim_from_section({}).crop == (64, 64)
    assert sim_from_section({"preset": "default"}).num_frames == 379


def test_reports_csv_format():
    text = reports_csv("density", [(10, EvalReport(FNR=0.1, TP=3)), (20, EvalReport(FNR=1 / 3))])
    lines = text.splitlines()
    assert lines[0].split(",")[:2] == ["density", "J_mean"]
    assert lines[1].split(",")[6] == "0.1" and lines[2].split(",")[6] == repr(1 / 3)
    assert lines[1].split(",")[12] == "3"


@pytest.mark.parametrize("vals,want", [([0.1, 0.2, 0.2, 0.5], True), ([0.1, 0.05], False), ([], True), ([1.0], True)])
def test_non_decreasing(vals, want):
    assert non_decreasing(vals) is want


def tiny_sim(**kw):
    base = dict(crop=(32, 32), canvas=(44, 44), num_frames=6, warmup_frames=2, initial_count=2, max_count=3)
    base.update(kw)
    return SimConfig.toy(**base)


def test_density_sweep_with_baseline():
    sw = density_sweep("baseline", tiny_sim(), [1, 2, 4], n=1, seed=3)
    assert [k for k, _ in sw.reports] == [1, 2, 4]
    assert sw.monotone == non_decreasing([r.seg_FNR for _, r in sw.reports])
    assert set(sw.to_dict()) == {"axis", "reports", "monotone"}


def test_frame_rate_sweep_reports_per_rate():
    data = [AnnotatedSequence.from_result(r) for r in generate_many(tiny_sim(num_frames=9), 1, seed=5)]
    sw = frame_rate_sweep("baseline", data, [16, 8, 4])
    assert [k for k, _ in sw.reports] == [16, 8, 4] and sw.monotone is None
    full = evaluate_method("baseline", data)
    assert sw.reports[0][1] == full
    with pytest.raises(ConfigError):
        frame_rate_sweep("baseline", data, [5])


def test_unknown_method_name():
    data = [AnnotatedSequence.from_result(r) for r in generate_many(tiny_sim(), 1, seed=1)]
    with pytest.raises(ValueError):
        evaluate_method("oracle", data)


def test_load_report_tree_accepts_bare_report(tmp_path):
    (tmp_path / "report.json").write_text('{"FNR": 0.2, "mode": "literal4"}')
    tree = load_report_tree(tmp_path)
    (entry,) = tree.values()
    assert len(entry["reports"]) == 1
