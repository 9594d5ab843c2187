import numpy as np
import pytest

from glidetrack.autodiff import Tensor
from glidetrack.core import InstanceMask, weighted_average
from glidetrack.segmentation import (InstanceSegmenter, ModelConfig, SegmentationNet, frame_window,
                                     peak_normalised, segment_frame, segment_sequence, sequence_inputs,
                                     static_inputs)
from glidetrack.simulator import SimConfig, generate


def tiny_cfg(**kw):
    base = dict(mode="raw", L=1, height=16, width=16, att_depths=(4, 4), att_pools=(2, 2), lstm_hidden=6,
                max_iters=3, out_h=8, out_w=8, enc_depths=(4, 4), enc_pools=(2, 2), code_dim=6,
                max_instances=5, flow_iters=20)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def toy_seq():
    cfg = SimConfig.toy(num_frames=8, warmup_frames=2, crop=(16, 16), canvas=(28, 28), rng_seed=2,
                        initial_count=3, max_count=4)
    return generate(cfg).sequence


def test_channel_counts():
    assert ModelConfig(mode="flow", L=2).att_channels == 4 * 2 + 3 + 1
    assert ModelConfig(mode="raw", L=2).att_channels == 3 * 5 + 1
    assert ModelConfig(mode="flow", L=3).seg_channels == 3 * 7 + 1


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(mode="depth")
    with pytest.raises(ValueError):
        ModelConfig(threshold=1.0)
    with pytest.raises(ValueError):
        ModelConfig(L=0)


def test_config_dict_roundtrip():
    cfg = tiny_cfg(use_lstm=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_frame_window_repeats_boundary(toy_seq):
    w = frame_window(toy_seq, 0, 1)
    assert w.shape == (9, 16, 16)
    np.testing.assert_array_equal(w[0:3], w[3:6])


@pytest.mark.parametrize("mode", ["raw", "flow"])
def test_static_input_shapes(toy_seq, mode):
    cfg = tiny_cfg(mode=mode)
    att, seg = sequence_inputs(cfg, toy_seq)
    assert att.shape == (8, cfg.att_channels - 1, 16, 16)
    assert seg.shape == (8, cfg.seg_channels - 1, 16, 16)
    if mode == "flow":
        with pytest.raises(ValueError):
            static_inputs(cfg, toy_seq, 0, None)


def zeroed(model):
    for t in model.params.values():
        t.data[:] = 0
    return model


def test_zero_weights_give_half_everywhere():
    cfg = tiny_cfg()
    model = zeroed(InstanceSegmenter(cfg))
    rng = np.random.default_rng(0)
    out = model.forward(Tensor(rng.random((2, cfg.att_channels - 1, 16, 16))),
                        rng.random((2, cfg.seg_channels - 1, 16, 16)), np.zeros((2, 16, 16)))
    np.testing.assert_allclose(out.patch_mask.data, 0.5)
    np.testing.assert_allclose(out.score.data, 0.5)
    assert out.patch.shape == (2, cfg.seg_channels, 8, 8)
    assert out.mask.shape == (2, 16, 16)


def test_encoder_decoder_shapes():
    from glidetrack.autodiff import Params
    cfg = tiny_cfg()
    net = SegmentationNet(cfg, Params(), np.random.default_rng(0))
    p = Tensor(np.random.default_rng(1).random((3, cfg.seg_channels, 8, 8)))
    v = net.encode(p)
    m = net.decode(v, p)
    assert v.shape == (3, cfg.code_dim) and m.shape == (3, 8, 8)
    assert np.all((m.data > 0) & (m.data < 1))


def test_split_first_convolution_matches_full_input():
    cfg = tiny_cfg()
    model = InstanceSegmenter(cfg, seed=3)
    rng = np.random.default_rng(4)
    att = rng.random((2, cfg.att_channels - 1, 16, 16))
    seg = rng.random((2, cfg.seg_channels - 1, 16, 16))
    canvas = rng.random((2, 16, 16))
    full = model.forward(Tensor(att), seg, canvas)
    split = model.forward(None, seg, canvas, att_base=model.static_conv(att))
    np.testing.assert_allclose(split.mask.data, full.mask.data, atol=1e-12)
    np.testing.assert_allclose(split.score.data, full.score.data, atol=1e-12)


def test_feedback_changes_only_the_canvas(toy_seq):
    cfg = tiny_cfg()
    model = InstanceSegmenter(cfg, seed=1)
    groups = []
    orig = model.forward

    def spy(att, seg, canvas, att_base=None):
        groups.append(np.concatenate([seg, canvas[:, None]], axis=1).copy())
        return orig(att, seg, canvas, att_base)

    model.forward = spy
    res = segment_frame(model, toy_seq, 2, max_instances=4)
    model.forward = orig
    c = cfg.seg_channels - 1
    for a, b in zip(groups[:-1], groups[1:]):
        np.testing.assert_array_equal(a[:, :c], b[:, :c])
    # the canvas is the running mean of the kept masks
    for k, r in enumerate(res[:-1]):
        want = weighted_average([InstanceMask.from_array(x.mask) for x in res[:k + 1]])
        np.testing.assert_array_equal(groups[k + 1][0, c], want)


def force_score(model, value):
    w = model.counter.w.data
    w[:] = 0
    model.counter.b.data[:] = np.log(value / (1 - value))


def test_cap_and_stopping(toy_seq):
    cfg = tiny_cfg()
    model = InstanceSegmenter(cfg, seed=0)
    force_score(model, 0.9)
    assert len(segment_frame(model, toy_seq, 1, max_instances=1)) == 1
    assert len(segment_frame(model, toy_seq, 1)) == cfg.max_instances
    res = segment_frame(model, toy_seq, 1, max_instances=3)
    assert all(r.score >= cfg.threshold for r in res)
    force_score(model, 0.1)
    assert segment_frame(model, toy_seq, 1) == []


def test_segment_sequence_batches_agree(toy_seq):
    cfg = tiny_cfg()
    model = InstanceSegmenter(cfg, seed=5)
    force_score(model, 0.6)
    a = segment_sequence(model, toy_seq, max_instances=2, batch=4)
    b = segment_sequence(model, toy_seq, max_instances=2, batch=1)
    assert len(a) == len(toy_seq)
    for fa, fb in zip(a, b):
        assert len(fa) == len(fb)
        for ra, rb in zip(fa, fb):
            np.testing.assert_allclose(ra.mask_soft, rb.mask_soft, atol=1e-12)


def test_state_roundtrip():
    cfg = tiny_cfg()
    a, b = InstanceSegmenter(cfg, seed=0), InstanceSegmenter(cfg, seed=1)
    b.load_state(a.state())
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_peak_normalised_canvas():
    a = np.zeros((2, 4, 4))
    a[0, :2] = 0.25
    a[0, 0, 0] = 0.5
    out = peak_normalised(a)
    assert out[0].max() == 1.0 and out[0, 1, 0] == 0.5
    np.testing.assert_array_equal(out[1], 0.0)
    # a mean of disjoint masks reads as their union
    m = [np.eye(4, dtype=bool), np.fliplr(np.eye(4, dtype=bool)) & ~np.eye(4, dtype=bool)]
    c = np.mean(m, axis=0)[None]
    np.testing.assert_array_equal(peak_normalised(c)[0], m[0] | m[1])
