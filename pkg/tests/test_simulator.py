import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from glidetrack.config import ConfigError
from glidetrack.simulator import (GROW, PAUSE, SHRINK, GaussianMixture, SimConfig, World, generate, generate_many,
                                  render, sample, step)


def test_degenerate_mode_is_constant():
    rng = np.random.default_rng(0)
    mix = GaussianMixture(((1.0, 40.0, 0.0),))
    assert {sample(mix, rng) for _ in range(100)} == {40.0}


def test_single_mode_mean():
    rng = np.random.default_rng(1)
    mix = GaussianMixture(((1.0, 40.0, 5.0),))
    xs = [sample(mix, rng) for _ in range(10_000)]
    assert abs(np.mean(xs) - 40.0) < 0.2


def test_mode_proportions():
    rng = np.random.default_rng(2)
    mix = SimConfig.toy().instability_dist
    ks = np.array([mix.sample_mode(rng)[0] for _ in range(100_000)])
    props = np.bincount(ks, minlength=3) / len(ks)
    np.testing.assert_allclose(props, mix.weights, atol=0.02)


def test_samples_clamped():
    rng = np.random.default_rng(3)
    mix = GaussianMixture(((1.0, 0.0, 10.0),), -1.0, 1.0)
    xs = np.array([sample(mix, rng) for _ in range(1000)])
    assert xs.min() >= -1.0 and xs.max() <= 1.0


@pytest.mark.parametrize("modes", [((0.5, 1, 1), (0.4, 2, 1)), ((1.0, 1, -1),), ()])
def test_invalid_mixtures(modes):
    with pytest.raises(ConfigError):
        GaussianMixture(modes)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(crop=(400, 400))
    with pytest.raises(ConfigError):
        SimConfig(num_frames=5, warmup_frames=5)
    with pytest.raises(ConfigError):
        SimConfig(mt_width=0.5)


def static_cfg():
    still = GaussianMixture(((1.0, 0.0, 0.0),))
    return SimConfig.toy(speed_dist=still, turn_rate_dist=still, appear_rate=0.0, disappear_rate=0.0,
                         phase_switch_prob=0.0, collision_prob=0.0,
                         instability_dist=GaussianMixture(((0.2, 0.0, 0.0), (0.3, 0.0, 0.0), (0.5, 0.0, 0.0))))


def test_static_world_unchanged():
    cfg = static_cfg()
    rng = np.random.default_rng(4)
    w = World(cfg, rng)
    for _ in range(5):
        w.spawn()
    for m in w.mts:
        m.phase = PAUSE
    before = [m.backbone.copy() for m in w.mts]
    step(w, cfg, rng)
    for a, m in zip(before, w.mts):
        np.testing.assert_array_equal(a, m.backbone)


def test_translation_along_heading():
    cfg = replace(static_cfg(), segment_spacing=1.0)
    rng = np.random.default_rng(5)
    w = World(cfg, rng)
    mt = w.spawn(head=(30.0, 30.0), heading=0.0)
    mt.speed, mt.phase, mt.rate = 2.0, PAUSE, 0.0
    before = mt.backbone.copy()
    step(w, cfg, rng)
    np.testing.assert_allclose(mt.backbone[:, 0], before[:, 0] + 2.0, atol=1e-9)
    np.testing.assert_allclose(mt.backbone[:, 1], before[:, 1], atol=1e-9)


def test_joint_spacing_is_fixed():
    sim = SimConfig.toy()
    rng = np.random.default_rng(6)
    w = World(sim, rng)
    for _ in range(6):
        w.spawn()
    for _ in range(20):
        step(w, sim, rng)
    for m in w.mts:
        d = np.hypot(*np.diff(m.backbone, axis=0).T)
        assert np.all(d[:-1] == pytest.approx(sim.segment_spacing, abs=1e-9))
        assert d[-1] <= sim.segment_spacing + 1e-9


def test_empty_world_renders_background():
    cfg = SimConfig.toy(noise_std=0.0)
    frame, labels, heads, clean = render([], cfg, None, 0)
    assert len(labels) == 0 and heads == {}
    np.testing.assert_allclose(clean, cfg.background)


def test_overlap_is_brighter():
    cfg = SimConfig.toy(noise_std=0.0)
    rng = np.random.default_rng(7)
    w = World(cfg, rng)
    w.spawn(head=(50.0, 38.0), heading=0.0)
    w.spawn(head=(38.0, 50.0), heading=math.pi / 2)
    _, labels, _, clean = render(w, cfg, None, 0)
    ma, mb = (m.array for m in labels)
    both = ma & mb
    assert both.any()
    assert clean[both].min() > max(clean[ma & ~mb].max(), clean[mb & ~ma].max())


def test_default_geometry():
    cfg = SimConfig.default()
    assert cfg.num_frames == 379 and tuple(cfg.crop) == (256, 256)


def test_determinism_and_alignment():
    cfg = SimConfig.toy(rng_seed=11)
    a, b = generate(cfg), generate(cfg)
    assert a.sequence == b.sequence
    assert len(a.sequence) == len(a.labels) == len(a.heads) == cfg.num_frames
    for la, lb in zip(a.labels, b.labels):
        assert [m.instance_id for m in la] == [m.instance_id for m in lb]
        for x, y in zip(la, lb):
            np.testing.assert_array_equal(x.array, y.array)


def test_empty_configuration():
    r = generate(SimConfig.toy(initial_count=0, appear_rate=0.0))
    assert all(len(s) == 0 for s in r.labels)


def test_masks_and_heads_consistent():
    cfg = SimConfig.toy(rng_seed=12)
    r = generate(cfg)
    for stack, hd in zip(r.labels, r.heads):
        assert set(hd) == {m.instance_id for m in stack}
        for m in stack:
            a = m.array
            assert a.sum() >= cfg.mt_width ** 2
            h = hd[m.instance_id]
            ys, xs = np.nonzero(a)
            # the head sits on the filament, within half a width of a mask pixel
            assert np.hypot(xs - h.x, ys - h.y).min() <= cfg.mt_width / 2 + 0.75


def test_generate_many_seeds_differ():
    a, b = generate_many(SimConfig.toy(num_frames=8, warmup_frames=2), 2, seed=3)
    assert a.sequence != b.sequence


def test_length_distribution_ks():
    cfg = SimConfig.toy()
    rng = np.random.default_rng(13)
    w = World(cfg, rng)
    for _ in range(3000):
        w.spawn()
    res = stats.kstest(w.spawn_lengths, cfg.length_dist.cdf)
    assert res.pvalue > 0.01


def test_phase_occupancy_matches_weights():
    cfg = SimConfig.toy(rng_seed=14, num_frames=400, appear_rate=0.5, disappear_rate=0.1)
    r = generate(cfg)
    occ = r.phase_counts / r.phase_counts.sum()
    np.testing.assert_allclose(occ[[SHRINK, GROW, PAUSE]], cfg.instability_dist.weights, atol=0.05)
