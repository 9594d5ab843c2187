"""Hungarian assignment and frame-to-frame association of instance masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import InstanceMask, mask_overlap_stats


def similarity_f(a: InstanceMask | np.ndarray, b: InstanceMask | np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if isinstance(a, InstanceMask) and isinstance(b, InstanceMask):
        inter, union = mask_overlap_stats(a, b)
    else:
        a = np.asarray(getattr(a, "array", a), dtype=bool)
        b = np.asarray(getattr(b, "array", b), dtype=bool)
        if a.shape != b.shape:
            raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
        inter = int(np.count_nonzero(a & b))
        union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def similarity_matrix(a: Sequence, b: Sequence) -> np.ndarray:
    """Pairwise IoU of two mask lists, vectorised over flattened bit arrays."""
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    fa = np.stack([np.asarray(getattr(m, "array", m), dtype=bool).ravel() for m in a]).astype(np.float64)
    fb = np.stack([np.asarray(getattr(m, "array", m), dtype=bool).ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _solve_min(cost: np.ndarray):
    """Shortest augmenting path Hungarian for a square matrix.

    Returns the row -> column assignment and the dual potentials (u, v) with
    cost[i, j] - u[i] - v[j] >= 0, equality on the assignment.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j; 0 means free
    way = np.zeros(n + 1, dtype=int)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0, 1:] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    # potentials in the convention reduced = cost - u_row - v_col
    return row_to_col, u[1:], v[1:]


def _tight(cost, u, v):
    red = cost - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(cost).max()) if cost.size else 1.0)
    return red <= 1e-9 * scale


def _unique(tight: np.ndarray, assign: np.ndarray) -> bool:
    """True when the assignment is the only perfect matching inside the tight graph.

    Alternating cycles are exactly the cycles of the graph row -> tight column
    -> that column's owner, so uniqueness is acyclicity.
    """
    n = len(assign)
    owner = np.empty(n, dtype=int)
    owner[assign] = np.arange(n)
    succ = [[owner[j] for j in np.flatnonzero(tight[i]) if j != assign[i]] for i in range(n)]
    state = np.zeros(n, dtype=int)  # 0 new, 1 on stack, 2 finished
    for s in range(n):
        if state[s]:
            continue
        stack = [(s, iter(succ[s]))]
        state[s] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                return False
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
    return True


def _lexicographic(tight: np.ndarray, assign: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching of the tight graph."""
    n = len(assign)
    assign = assign.copy()
    owner = np.empty(n, dtype=int)
    owner[assign] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if j == assign[i]:
                break
            if owner[j] < i:
                continue
            # free column assign[i]; look for an alternating path from owner[j] to it over rows > i
            target = assign[i]
            start = owner[j]
            prev = {start: None}
            queue = [start]
            found = None
            while queue and found is None:
                r = queue.pop(0)
                for col in np.flatnonzero(tight[r]):
                    if col == assign[r]:
                        continue
                    if col == target:
                        found = (r, col)
                        break
                    o = owner[col]
                    if o > i and o not in prev:
                        prev[o] = (r, col)
                        queue.append(o)
            if found is None:
                continue
            r, col = found
            while True:
                old = assign[r]
                assign[r] = col
                owner[col] = r
                link = prev[r]
                if link is None:
                    break
                r, col = link[0], old
            assign[i] = j
            owner[j] = i
            break
    return assign


def hungarian_max(c) -> list[tuple[int, int]]:
    """Maximum-total one-to-one matching of size min(m, n), sorted by row.

    Ties are broken towards the lexicographically smallest matching in
    row order.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = c.shape
    if m == 0 or n == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    k = max(m, n)
    sq = np.zeros((k, k))
    sq[:m, :n] = c
    cost = -sq
    assign, u, v = _solve_min(cost)
    tight = _tight(cost, u, v)
    if not _unique(tight, assign):
        assign = _lexicographic(tight, assign)
    return [(i, int(assign[i])) for i in range(k) if i < m and assign[i] < n]


def matching_total(c, pairs) -> float:
    c = np.asarray(c, dtype=np.float64)
    return float(sum(c[i, j] for i, j in pairs))


@dataclass
class AssociationResult:
    pairs: list[tuple[int, int]]
    exits: list[int]
    entries: list[int]
    similarity: np.ndarray = field(repr=False)

    @property
    def transfers(self) -> int:
        return len(self.pairs)

    def counts(self, m_t: int, m_t1: int) -> dict:
        return {"m_t": m_t, "m_t1": m_t1, "transfers": self.transfers,
                "exits": m_t - self.transfers, "entries": m_t1 - self.transfers}


def associate_frames(res_t: Sequence, res_t1: Sequence, iou_floor: float = 0.05) -> AssociationResult:
    """Match instances of frame t to frame t+1; pairs below the floor are not links."""
    sim = similarity_matrix(res_t, res_t1)
    pairs = [(i, j) for i, j in hungarian_max(sim) if sim[i, j] >= iou_floor] if sim.size else []
    left = {i for i, _ in pairs}
    right = {j for _, j in pairs}
    return AssociationResult(pairs, [i for i in range(len(res_t)) if i not in left],
                             [j for j in range(len(res_t1)) if j not in right], sim)
