import math

import numpy as np
import pytest

from glidetrack.segmentation import InstanceSegmenter, ModelConfig
from glidetrack.simulator import SimConfig, generate
from glidetrack.training import (LossReport, TrainConfig, batch_loss, box_iou_np, build_samples,
                                 label_boxes, load_model, loss_att, loss_count, loss_seg, match_for_loss,
                                 save_model, train)


def tiny_cfg(**kw):
    base = dict(mode="raw", L=1, height=16, width=16, att_depths=(4, 4), att_pools=(2, 2), lstm_hidden=6,
                max_iters=3, out_h=8, out_w=8, enc_depths=(4, 4), enc_pools=(2, 2), code_dim=6,
                max_instances=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_samples():
    sim = SimConfig.toy(num_frames=5, warmup_frames=2, crop=(16, 16), canvas=(28, 28), rng_seed=7,
                        initial_count=3, max_count=3)
    r = generate(sim)
    return build_samples([(r.sequence, r.labels)], tiny_cfg())


# ---------------------------------------------------------------------------
# boxes and losses

def test_label_boxes_dilated_extent():
    m = np.zeros((1, 10, 10), bool)
    m[0, 2:4, 3:7] = True
    np.testing.assert_allclose(label_boxes(m), [[-0.5, 5.5, 0.5, 8.5]])
    np.testing.assert_allclose(label_boxes(m, pad=0.0), [[1.5, 3.5, 2.5, 6.5]])


def test_loss_att_examples():
    lab = np.array([[0.0, 4, 0, 4], [10, 14, 10, 14]])
    assert float(loss_att(lab, lab, [(0, 0), (1, 1)], 2).data) == pytest.approx(-1.0)
    far = lab + 20
    assert float(loss_att(far, lab, [(0, 0), (1, 1)], 2).data) == 0.0
    # each box shifted by half its width: intersection 8, union 24
    half = lab + np.array([0, 0, 2, 2])
    assert box_iou_np(half[:1], lab[:1])[0, 0] == pytest.approx(1 / 3)
    assert float(loss_att(half, lab, [(0, 0), (1, 1)], 2).data) == pytest.approx(-1 / 3)


def test_loss_att_no_matches():
    assert float(loss_att(np.zeros((0, 4)), np.zeros((0, 4)), [], 0).data) == 0.0


def test_loss_seg_examples():
    rng = np.random.default_rng(0)
    labs = rng.random((3, 8, 8)) > 0.5
    pairs = [(0, 0), (1, 1), (2, 2)]
    assert float(loss_seg(labs.astype(float), labs, pairs, 3).data) == pytest.approx(-1.0)
    assert float(loss_seg((~labs).astype(float), labs, pairs, 3).data) == 0.0


def test_loss_seg_formula_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        soft = rng.random((4, 6, 6))
        labs = rng.random((3, 6, 6)) > 0.6
        pairs = [(0, 2), (3, 0)]
        want = 0.0
        for i, j in pairs:
            y = labs[j].astype(float)
            want += np.minimum(soft[i], y).sum() / np.maximum(soft[i], y).sum()
        want *= -1 / 4
        assert float(loss_seg(soft, labs, pairs, 4).data) == pytest.approx(want, abs=1e-12)


def test_loss_count_perfect_is_near_zero():
    assert float(loss_count([1.0, 1.0, 0.0], [1, 1, 0]).data) < 1e-5


def test_loss_count_formula_oracle():
    got = float(loss_count([0.9, 0.8, 0.1], [1, 1, 0]).data)
    want = -(math.log(0.9) + math.log(min(0.9, 0.8)) + math.log(1 - 0.1)) / 3
    assert got == pytest.approx(want, abs=1e-12)


def test_loss_count_running_extremes():
    # a late high score is charged to every earlier off slot, an early low score to later on slots
    s, y = [0.7, 0.2, 0.9, 0.3], [1, 1, 0, 0]
    want = -(math.log(0.7) + math.log(0.2) + math.log(1 - 0.9) + math.log(1 - 0.3)) / 4
    assert float(loss_count(s, y).data) == pytest.approx(want, abs=1e-12)


def test_loss_count_monotone_in_on_scores():
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = int(rng.integers(1, 7))
        n = int(rng.integers(0, m + 1))
        y = np.r_[np.ones(n), np.zeros(m - n)]
        s = rng.uniform(0.01, 0.99, m)
        base = float(loss_count(s, y).data)
        assert base >= 0
        for i in range(n):
            t = s.copy()
            t[i] *= rng.uniform(0.1, 0.99)
            assert float(loss_count(t, y).data) >= base - 1e-12


def test_loss_count_batch_is_row_mean():
    s = np.array([[0.9, 0.8, 0.1], [0.6, 0.4, 0.5]])
    y = np.array([[1, 1, 0], [1, 0, 0]])
    rows = [float(loss_count(s[i], y[i]).data) for i in range(2)]
    assert float(loss_count(s, y).data) == pytest.approx(np.mean(rows), abs=1e-12)


def test_match_for_loss_follows_permutation():
    rng = np.random.default_rng(3)
    labs = [rng.random((10, 10)) > 0.7 for _ in range(4)]
    perm = [2, 0, 3, 1]
    res = [labs[p] for p in perm]
    assert sorted(match_for_loss(res, labs)) == [(i, p) for i, p in enumerate(perm)]


# ---------------------------------------------------------------------------
# schedule

def test_kappa_schedule():
    cfg = TrainConfig(stage1_steps=10, stage2_steps=20)
    ks = [cfg.kappa_at(s) for s in range(30)]
    assert ks[:11] == [1.0] * 11
    assert ks[20] == 0.0 and ks[-1] == 0.0 and ks[15] == pytest.approx(0.5)
    assert all(a >= b for a, b in zip(ks, ks[1:]))
    assert cfg.stage_at(9) == "attention_only" and cfg.stage_at(10) == "joint"
    assert TrainConfig(kappa=0.3).kappa_at(500) == 0.3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(kappa=1.5)


def test_loss_total_is_sum():
    r = LossReport(0, "joint", 1.0, -0.5, -0.25, 0.125)
    assert r.L_total == -0.625


def test_kappa_one_canvas_is_ground_truth_mean(tiny_samples):
    model = InstanceSegmenter(tiny_cfg(), seed=0)
    canvases = []
    orig = model.forward

    def spy(att, seg, canvas, att_base=None):
        canvases.append(canvas.copy())
        return orig(att, seg, canvas, att_base)

    model.forward = spy
    batch = tiny_samples[:2]
    m = max(len(b.labels) for b in batch) + 1
    batch_loss(model, batch, m, kappa=1.0, stage="joint")
    for i, b in enumerate(batch):
        chosen: list[int] = []
        for k in range(1, m):
            c = canvases[k][i]
            if len(chosen) < len(b.labels):
                # exactly one new label joins the mean at each step
                prev = np.sum([b.labels[j] for j in chosen], axis=0) if chosen else 0
                new = c * (len(chosen) + 1) - prev
                hits = [j for j in range(len(b.labels)) if j not in chosen and np.allclose(new, b.labels[j])]
                assert len(hits) >= 1
                chosen.append(hits[0])
            want = np.mean([b.labels[j] for j in chosen], axis=0)
            np.testing.assert_allclose(c, want, atol=1e-15)


# ---------------------------------------------------------------------------
# gradients through the full pipeline

def param_gradcheck(model, f, names, rng, per_param=4, eps=1e-5):
    model.params.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for name in names:
        t = model.params[name]
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1).copy()
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f().data)
            flat[i] = old - eps
            fm = float(f().data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            scale = max(abs(num), abs(grad[i]), 1e-6)
            worst = max(worst, abs(num - grad[i]) / scale)
    return worst


@pytest.mark.parametrize("stage", ["attention_only", "joint"])
def test_end_to_end_gradients(tiny_samples, stage):
    model = InstanceSegmenter(tiny_cfg(), seed=1)
    batch = tiny_samples[1:3]
    f = lambda: batch_loss(model, batch, 3, kappa=1.0, stage=stage)[0]
    names = list(model.params.keys())
    assert param_gradcheck(model, f, names, np.random.default_rng(0)) < 1e-3


# ---------------------------------------------------------------------------
# driver

def test_training_is_deterministic(tiny_samples):
    cfg = TrainConfig(stage1_steps=3, stage2_steps=3, batch=2, seed=4)
    a = train(tiny_samples, tiny_cfg(), cfg)
    b = train(tiny_samples, tiny_cfg(), cfg)
    assert a.losses_csv() == b.losses_csv()
    assert len(a.history) == 6 and a.history[-1].stage == "joint"


def test_checkpoint_roundtrip(tiny_samples, tmp_path):
    res = train(tiny_samples, tiny_cfg(), TrainConfig(stage1_steps=1, stage2_steps=1, batch=1))
    path = save_model(res, tmp_path / "m")
    model = load_model(path)
    assert model.cfg == res.model.cfg
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].data, res.model.params[k].data)
    lines = (tmp_path / "m" / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("step,stage,kappa") and len(lines) == 3


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train([], tiny_cfg(), TrainConfig())


def test_overfit_single_frame(tiny_samples):
    sample = max(tiny_samples, key=lambda s: len(s.labels))
    cfg = TrainConfig(stage1_steps=0, stage2_steps=2000, batch=1, lr=3e-3, seed=0)
    res = train([sample], tiny_cfg(), cfg)
    first = np.mean([r.L_total for r in res.history[:20]])
    last = np.mean([r.L_total for r in res.history[-20:]])
    assert last < 0.5 * first
