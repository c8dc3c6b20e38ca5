"""Wasserstein distances between persistence diagrams."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .persistence import PersistenceDiagram


class InvalidMatching(ValueError):
    pass


@dataclass(frozen=True)
class PartialMatching:
    matched: tuple[tuple[int, int], ...] = ()
    unmatched1: tuple[int, ...] = ()
    unmatched2: tuple[int, ...] = ()

    def validate(self, n1: int, n2: int) -> None:
        left = [i for i, _ in self.matched] + list(self.unmatched1)
        right = [j for _, j in self.matched] + list(self.unmatched2)
        if sorted(left) != list(range(n1)) or sorted(right) != list(range(n2)):
            raise InvalidMatching("matching must cover every point of both diagrams exactly once")


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    entries: np.ndarray
    p: float = 2.0
    n: int = field(init=False)

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("distance matrix must be square")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "n", a.shape[0])


def _pnorm(v: np.ndarray, p: float) -> np.ndarray:
    """Planar p-norm along the last axis."""
    v = np.abs(v)
    if np.isinf(p):
        return v.max(axis=-1)
    return np.sum(v**p, axis=-1) ** (1.0 / p)


def diagonal_projection(points: np.ndarray) -> np.ndarray:
    mid = points.sum(axis=1) / 2.0
    return np.column_stack([mid, mid])


def diagonal_cost(points: np.ndarray, p: float) -> np.ndarray:
    """p-th power of each point's distance to its diagonal projection."""
    return _pnorm(points - diagonal_projection(points), p) ** p


def matching_cost(m: PartialMatching, d1: PersistenceDiagram, d2: PersistenceDiagram, p: float = 2.0) -> float:
    if p < 1:
        raise ValueError("p must be >= 1")
    a, b = d1.as_array(), d2.as_array()
    m.validate(len(a), len(b))
    total = 0.0
    for i, j in m.matched:
        total += float(_pnorm(a[i] - b[j], p)) ** p
    if m.unmatched1:
        total += float(diagonal_cost(a[list(m.unmatched1)], p).sum())
    if m.unmatched2:
        total += float(diagonal_cost(b[list(m.unmatched2)], p).sum())
    return total ** (1.0 / p)


def _cost_matrix(a: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    """Balanced (n1+n2) square cost matrix.

    Rows: points of ``a`` then diagonal slots for ``b``.  Columns: points
    of ``b`` then diagonal slots for ``a``.  Each point may only go to its
    own diagonal slot; diagonal-to-diagonal is free.
    """
    n1, n2 = len(a), len(b)
    c = np.zeros((n1 + n2, n1 + n2))
    if n1 and n2:
        c[:n1, :n2] = _pnorm(a[:, None, :] - b[None, :, :], p) ** p
    if n1:
        upper = np.full((n1, n1), np.inf)
        np.fill_diagonal(upper, diagonal_cost(a, p))
        c[:n1, n2:] = upper
    if n2:
        lower = np.full((n2, n2), np.inf)
        np.fill_diagonal(lower, diagonal_cost(b, p))
        c[n1:, :n2] = lower
    return c


def optimal_matching(d1: PersistenceDiagram, d2: PersistenceDiagram, p: float = 2.0) -> PartialMatching:
    a, b = d1.as_array(), d2.as_array()
    n1, n2 = len(a), len(b)
    if n1 + n2 == 0:
        return PartialMatching()
    rows, cols = linear_sum_assignment(_cost_matrix(a, b, p))
    matched, un1, un2 = [], [], []
    for r, c in zip(rows.tolist(), cols.tolist()):
        if r < n1 and c < n2:
            matched.append((r, c))
        elif r < n1:
            un1.append(r)
        elif c < n2:
            un2.append(c)
    return PartialMatching(tuple(matched), tuple(sorted(un1)), tuple(sorted(un2)))


def wasserstein(d1: PersistenceDiagram, d2: PersistenceDiagram, p: float = 2.0) -> float:
    """Exact p-Wasserstein distance via a balanced assignment problem."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a, b = d1.as_array(), d2.as_array()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("diagrams must have finite coordinates")
    if len(a) + len(b) == 0:
        return 0.0
    # canonical argument order makes the result exactly symmetric
    if (len(a), d1.pairs) > (len(b), d2.pairs):
        a, b = b, a
    c = _cost_matrix(a, b, p)
    rows, cols = linear_sum_assignment(c)
    return float(math.fsum(c[rows, cols].tolist()) ** (1.0 / p))


def distance_matrix(diagrams, p: float = 2.0) -> DistanceMatrix:
    diagrams = list(diagrams)
    if not diagrams:
        raise ValueError("need at least one diagram")
    n = len(diagrams)
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a[i, j] = a[j, i] = wasserstein(diagrams[i], diagrams[j], p)
    return DistanceMatrix(a, p)


def row_sum_scores(a: DistanceMatrix) -> np.ndarray:
    return a.entries.sum(axis=1)


def write_matrix_csv(a: DistanceMatrix, path) -> None:
    np.savetxt(path, a.entries, delimiter=",", fmt="%.17g")


def read_matrix_csv(path, p: float = 2.0) -> DistanceMatrix:
    return DistanceMatrix(np.atleast_2d(np.loadtxt(path, delimiter=",")), p)
