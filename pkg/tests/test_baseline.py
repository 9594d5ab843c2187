import numpy as np
import pytest

from glidetrack.baseline import BaselineConfig, link_nearest, otsu_level, run_baseline, segment_threshold
from glidetrack.simulator import SimConfig, generate


def test_otsu_separates_two_levels():
    rng = np.random.default_rng(0)
    g = np.r_[rng.normal(0.1, 0.01, 500), rng.normal(0.7, 0.01, 100)]
    level = otsu_level(g)
    # any level in the empty gap between the modes is optimal
    assert g[:500].max() < level < g[500:].min()


def split_variance(hist, mids, k):
    """Between-class variance (in counts) of putting bins [:k] below the threshold."""
    w0, w1 = hist[:k].sum(), hist[k:].sum()
    if not w0 or not w1:
        return -1.0
    m0 = (hist[:k] * mids[:k]).sum() / w0
    m1 = (hist[k:] * mids[k:]).sum() / w1
    return w0 * w1 * (m0 - m1) ** 2


@pytest.mark.parametrize("seed", range(5))
def test_otsu_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    g = np.r_[rng.normal(0.2, 0.05, 300), rng.normal(0.6, 0.08, 200)]
    hist, edges = np.histogram(g, bins=64)
    mids = 0.5 * (edges[:-1] + edges[1:])
    best = max(split_variance(hist, mids, k) for k in range(1, 64))
    k = int(np.argmin(np.abs(mids - otsu_level(g, bins=64)))) + 1
    assert split_variance(hist, mids, k) == pytest.approx(best, rel=1e-9)


def two_blobs(offset=0):
    g = np.full((32, 32), 0.05)
    g[4:8, 4 + offset:12 + offset] = 0.8
    g[20:23, 18:30] = 0.8
    return g


def test_threshold_components_largest_first():
    comps = segment_threshold(two_blobs())
    assert [int(c.sum()) for c in comps] == [36, 32]


def test_min_area_filter():
    g = two_blobs()
    g[28, 2] = 0.8
    assert len(segment_threshold(g, BaselineConfig(min_area=2))) == 2


def test_link_nearest_follows_motion():
    frames = [segment_threshold(two_blobs(o)) for o in (0, 2, 4)]
    ts = link_nearest(frames)
    assert len(ts.tracks) == 2 and all(len(t) == 3 for t in ts.tracks)


def test_link_distance_gate():
    frames = [segment_threshold(two_blobs(o)) for o in (0, 12)]
    ts = link_nearest(frames, BaselineConfig(max_link_dist=5.0))
    # the jumping blob starts a new track, the still one continues
    assert sorted(len(t) for t in ts.tracks) == [1, 1, 2]


def test_run_baseline_on_simulation():
    r = generate(SimConfig.toy(num_frames=8, warmup_frames=2, rng_seed=4))
    frames, tracks = run_baseline(r.sequence)
    assert len(frames) == 8 and all(len(f) >= 1 for f in frames)
    rows = tracks.rows(r.sequence.frame_rate)
    assert rows and all(0 <= row.t < 7 for row in rows)
