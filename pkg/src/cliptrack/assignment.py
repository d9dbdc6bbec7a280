"""Rectangular linear assignment: Hungarian solver and exhaustive oracle.

Both solvers return ``cols`` where ``cols[r]`` is the column given to row
``r``. Among optimal injections (costs within a small relative tolerance of
the optimum) the lexicographically smallest column sequence wins, so both
are deterministic and agree on ties.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import InfeasibleError, NumericError, SizeError

BRUTE_FORCE_MAX_COLS = 8


def tie_tolerance(cost: np.ndarray) -> float:
    scale = float(np.abs(cost).max()) if cost.size else 0.0
    return 1e-9 * max(1.0, scale)


def _as_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise NumericError("cost matrix has non-finite entries")
    k, n = c.shape
    if k > n:
        raise InfeasibleError(f"{k} rows cannot be injected into {n} columns")
    return c


def _solve_min(c: list[list[float]], k: int, n: int):
    """Shortest augmenting path with potentials, rows <= cols.

    Returns ``(cost, cols, u, v)`` with 1-based dual vectors. Columns that end
    up unassigned keep ``v == 0`` and all ``v <= 0``.
    """
    if k == 0:
        return 0.0, [], [0.0], [0.0] * (n + 1)
    inf = math.inf
    u = [0.0] * (k + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row (1-based) owning column j
    way = [0] * (n + 1)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = [-1] * k
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return sum(c[r][cols[r]] for r in range(k)), cols, u, v


def _min_cost(c: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not rows:
        return 0.0
    sub = c[np.ix_(rows, cols)].tolist()
    return _solve_min(sub, len(rows), len(cols))[0]


_INJECTIONS: dict[tuple[int, int], np.ndarray] = {}


def _injections(k: int, n: int) -> np.ndarray:
    key = (k, n)
    if key not in _INJECTIONS:
        _INJECTIONS[key] = np.array(list(itertools.permutations(range(n), k)), dtype=np.intp)
    return _INJECTIONS[key]


def hungarian_solve(cost) -> tuple[list[int], float]:
    """Optimal injection rows -> columns for a ``K x N`` cost with ``K <= N``.

    Returns ``(cols, total_cost)``.
    """
    c = _as_cost(cost)
    k, n = c.shape
    if k == 0:
        return [], 0.0
    best, cols, u, v = _solve_min(c.tolist(), k, n)
    tol = tie_tolerance(c)
    # Fix rows one at a time to the smallest column that still admits an
    # optimal completion. Any injection through (r, j) costs at least
    # best + reduced(r, j), which prunes nearly every candidate.
    chosen: list[int] = []
    prefix = 0.0
    free = list(range(n))
    for r in range(k):
        rest = list(range(r + 1, k))
        for col in free:
            if col == cols[r] and chosen == cols[:r]:
                ok = True
            elif c[r, col] - u[r + 1] - v[col + 1] > tol:
                ok = False
            else:
                rem = [j for j in free if j != col]
                ok = prefix + c[r, col] + _min_cost(c, rest, rem) <= best + tol
            if ok:
                chosen.append(col)
                prefix += c[r, col]
                free.remove(col)
                break
        else:  # pragma: no cover - guarded by the optimality of ``best``
            raise NumericError("tie-breaking failed to reproduce the optimum")
    return chosen, float(sum(c[r, chosen[r]] for r in range(k)))


def brute_force_assignment(cost) -> tuple[list[int], float]:
    """Exhaustive search over all injections; the test oracle for the solver."""
    c = _as_cost(cost)
    k, n = c.shape
    if n > BRUTE_FORCE_MAX_COLS:
        raise SizeError(f"brute force limited to {BRUTE_FORCE_MAX_COLS} columns, got {n}")
    if k == 0:
        return [], 0.0
    # permutations() yields injections in lexicographic order
    perms = _injections(k, n)
    totals = c[np.arange(k), perms].sum(axis=1)
    first = int(np.argmax(totals <= totals.min() + tie_tolerance(c)))
    cols = perms[first].tolist()
    return cols, float(sum(c[r, cols[r]] for r in range(k)))


def solve_any(cost) -> tuple[list[tuple[int, int]], float]:
    """Assignment for any rectangular shape; returns ``(row, col)`` pairs."""
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return [], 0.0
    if c.shape[0] <= c.shape[1]:
        cols, total = hungarian_solve(c)
        return list(enumerate(cols)), total
    rows, total = hungarian_solve(c.T)
    return sorted((r, j) for j, r in enumerate(rows)), total
