import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glidetrack.assignment import (associate_frames, hungarian_max, matching_total, similarity_f,
                                   similarity_matrix)
from glidetrack.core import InstanceMask


def brute_max(c):
    c = np.asarray(c)
    m, n = c.shape
    if m <= n:
        return max(sum(c[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))
    return max(sum(c[p[j], j] for j in range(n)) for p in itertools.permutations(range(m), n))


def box(h, w, r0, r1, c0, c1):
    a = np.zeros((h, w), bool)
    a[r0:r1, c0:c1] = True
    return a


def test_similarity_examples():
    a = box(6, 6, 0, 2, 0, 2)
    assert similarity_f(a, a) == 1.0
    assert similarity_f(a, box(6, 6, 3, 5, 3, 5)) == 0.0
    # intersection 2, union 6
    b = np.zeros((6, 6), bool)
    b[0, 0] = b[0, 1] = True
    b[5, 0] = b[5, 1] = True
    assert similarity_f(a, b) == pytest.approx(2 / 6)
    assert similarity_f(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 0.0


def test_similarity_accepts_instance_masks():
    a, b = box(8, 8, 0, 4, 0, 4), box(8, 8, 2, 6, 2, 6)
    assert similarity_f(InstanceMask.from_array(a), InstanceMask.from_array(b)) == similarity_f(a, b)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        similarity_f(np.zeros((2, 2), bool), np.zeros((3, 3), bool))


def test_similarity_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    a = [rng.random((9, 9)) > 0.6 for _ in range(4)]
    b = [rng.random((9, 9)) > 0.6 for _ in range(3)]
    s = similarity_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert s[i, j] == pytest.approx(similarity_f(a[i], b[j]), abs=1e-15)


def test_hungarian_examples():
    assert hungarian_max([[0.9, 0.1], [0.2, 0.8]]) == [(0, 0), (1, 1)]
    assert matching_total([[0.9, 0.1], [0.2, 0.8]], [(0, 0), (1, 1)]) == pytest.approx(1.7)
    assert hungarian_max([[0.5]]) == [(0, 0)]
    assert hungarian_max(np.zeros((0, 3))) == []


def test_hungarian_rectangular_size():
    rng = np.random.default_rng(1)
    assert len(hungarian_max(rng.random((3, 6)))) == 3
    assert len(hungarian_max(rng.random((6, 2)))) == 2


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian_max([[np.inf, 0.0]])


@pytest.mark.parametrize("seed", range(5))
def test_hungarian_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        c = rng.random((rng.integers(1, 7), rng.integers(1, 7)))
        pairs = hungarian_max(c)
        assert abs(matching_total(c, pairs) - brute_max(c)) <= 1e-12
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == min(c.shape)


def test_lexicographic_tie_break():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(1, 6))
        c = rng.integers(0, 3, (n, n)).astype(float)
        perms = list(itertools.permutations(range(n)))
        tot = [sum(c[i, p[i]] for i in range(n)) for p in perms]
        best = max(tot)
        want = min(p for p, t in zip(perms, tot) if t == best)
        assert tuple(j for _, j in hungarian_max(c)) == want
    assert hungarian_max(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0, 1, allow_nan=False)), st.floats(-2, 2))
def test_hungarian_shift_and_transpose(c, k):
    base = matching_total(c, hungarian_max(c))
    shifted = hungarian_max(c + k)
    assert matching_total(c + k, shifted) == pytest.approx(base + min(c.shape) * k, abs=1e-9)
    t = hungarian_max(c.T)
    assert matching_total(c.T, t) == pytest.approx(base, abs=1e-9)


def test_transpose_matching_distinct_entries():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = rng.random((4, 6))
        a = sorted(hungarian_max(c))
        b = sorted((j, i) for i, j in hungarian_max(c.T))
        assert a == b


def test_associate_identical_lists():
    ms = [box(20, 20, 2 * i, 2 * i + 2, 0, 10) for i in range(4)]
    r = associate_frames(ms, ms)
    assert r.pairs == [(i, i) for i in range(4)] and not r.exits and not r.entries


def test_associate_empty_first_frame():
    ms = [box(10, 10, 0, 2, 0, 2), box(10, 10, 5, 7, 5, 7)]
    r = associate_frames([], ms)
    assert r.pairs == [] and r.entries == [0, 1]


def test_associate_counts_example():
    h = w = 40
    t = [box(h, w, 0, 4, 0, 8), box(h, w, 8, 12, 0, 8), box(h, w, 16, 20, 0, 8),
         box(h, w, 24, 28, 0, 8), box(h, w, 32, 36, 0, 8)]
    t1 = [box(h, w, 0, 4, 1, 9), box(h, w, 8, 12, 1, 9), box(h, w, 16, 20, 1, 9), box(h, w, 30, 34, 30, 38)]
    r = associate_frames(t, t1)
    c = r.counts(5, 4)
    assert c == {"m_t": 5, "m_t1": 4, "transfers": 3, "exits": 2, "entries": 1}


def test_iou_floor_blocks_weak_links():
    a = [box(20, 20, 0, 10, 0, 10)]
    b = [box(20, 20, 9, 19, 9, 19)]  # IoU 1/199
    assert associate_frames(a, b, 0.05).pairs == []
    assert associate_frames(a, b, 0.0).pairs == [(0, 0)]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 10 ** 6))
def test_association_invariants(m, n, seed):
    rng = np.random.default_rng(seed)
    a = [rng.random((12, 12)) > 0.7 for _ in range(m)]
    b = [rng.random((12, 12)) > 0.7 for _ in range(n)]
    r = associate_frames(a, b)
    assert r.transfers <= min(m, n)
    assert r.transfers + len(r.exits) == m
    assert r.transfers + len(r.entries) == n
