import numpy as np
import pytest

from glidetrack.core import DataError
from glidetrack.dataset import (AnnotatedSequence, gt_rows, load_annotated, load_collection, save_annotated,
                                save_collection, sequence_dirs, subsample)
from glidetrack.evaluation import GroundTruth
from glidetrack.simulator import SimConfig, generate


@pytest.fixture(scope="module")
def ann():
    cfg = SimConfig.toy(crop=(32, 32), canvas=(44, 44), num_frames=9, warmup_frames=2, initial_count=3,
                        max_count=4, rng_seed=21)
    return AnnotatedSequence.from_result(generate(cfg))


def test_roundtrip(ann, tmp_path):
    back = load_annotated(save_annotated(ann, tmp_path / "s"))
    assert back.sequence == ann.sequence
    for a, b in zip(ann.labels, back.labels):
        assert [m.instance_id for m in a] == [m.instance_id for m in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.array, y.array)
    for ha, hb in zip(ann.heads, back.heads):
        assert set(ha) == set(hb)
        for u in ha:
            assert (ha[u].x, ha[u].y) == (hb[u].x, hb[u].y)


def test_gt_rows_match_ground_truth(ann):
    rows = gt_rows(ann)
    want = GroundTruth(ann.labels, ann.heads).displacements()
    got = [[r.displacement for r in rows if r.t == t] for t in range(len(want))]
    assert got == want
    r = rows[0]
    assert r.speed_px_per_s == pytest.approx(np.hypot(r.x_t1 - r.x_t, r.y_t1 - r.y_t) * 16.0)


def test_collection_layout(ann, tmp_path):
    save_collection([ann, ann], tmp_path / "c")
    assert [p.name for p in sequence_dirs(tmp_path / "c")] == ["seq_000", "seq_001"]
    assert len(load_collection(tmp_path / "c")) == 2
    save_collection([ann], tmp_path / "one")
    assert sequence_dirs(tmp_path / "one") == [tmp_path / "one"]


def test_missing_inputs(ann, tmp_path):
    with pytest.raises(DataError):
        sequence_dirs(tmp_path / "nothing")
    d = save_annotated(ann, tmp_path / "s")
    (d / "gt.jsonl").unlink()
    with pytest.raises(DataError):
        load_annotated(d)


@pytest.mark.parametrize("step", [1, 2, 4])
def test_subsample(ann, step):
    sub = subsample(ann, step)
    keep = list(range(0, len(ann.sequence), step))
    assert len(sub.sequence) == len(keep) == len(sub.labels) == len(sub.heads)
    assert sub.sequence.frame_rate == ann.sequence.frame_rate / step
    for i, t in enumerate(keep):
        np.testing.assert_array_equal(sub.sequence[i].data, ann.sequence[t].data)
        assert sub.sequence[i].index == i
        assert {u: (h.x, h.y) for u, h in sub.heads[i].items()} == {u: (h.x, h.y) for u, h in ann.heads[t].items()}


def test_subsample_rejects_zero(ann):
    with pytest.raises(ValueError):
        subsample(ann, 0)
