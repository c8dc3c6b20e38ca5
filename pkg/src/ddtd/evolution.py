"""Multi-objective selection: non-dominated sorting, crowding distance,
Wasserstein-distance sorting of persistence diagrams, and 2-D hypervolume.

Every ordering breaks ties by the candidate's position in the input
sequence, so selection is deterministic.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import DensityField
from .pd_metric import distance_matrix, row_sum_scores
from .persistence import PersistenceDiagram, diagram_of

INFEASIBLE_RANK = math.inf

EXPLORATION = "exploration"
EXPLOITATION = "exploitation"


class DiagramFailure(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"persistence diagram failed for candidate {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(eq=False)
class Candidate:
    field: DensityField
    objectives: tuple[float, ...]
    feasible: bool = True
    rank: Optional[float] = None
    diagram: Optional[PersistenceDiagram] = None
    id: int = -1
    origin: str = ""

    def __post_init__(self):
        self.objectives = tuple(float(v) for v in self.objectives)


@dataclass
class Population:
    members: list[Candidate]
    generation: int = 0
    selection_mode: str = EXPLOITATION
    source_index: list[int] = field(default_factory=list)


def dominates(a: Candidate, b: Candidate) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and better somewhere."""
    fa, fb = a.objectives, b.objectives
    if len(fa) != len(fb):
        raise ValueError("objective counts differ")
    return all(x <= y for x, y in zip(fa, fb)) and any(x < y for x, y in zip(fa, fb))


def non_dominated_sort(cands: Sequence[Candidate]) -> list[list[int]]:
    """Fast non-dominated sort; writes ``rank`` back onto the candidates.

    Infeasible candidates are collected into a trailing front of rank
    ``inf``.
    """
    if not cands:
        raise ValueError("need at least one candidate")
    feasible = [i for i, c in enumerate(cands) if c.feasible]
    infeasible = [i for i, c in enumerate(cands) if not c.feasible]
    fronts: list[list[int]] = []
    if feasible:
        f = np.array([cands[i].objectives for i in feasible], dtype=float)
        le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
        lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
        dom = le & lt  # dom[i, j]: i dominates j
        count = dom.sum(axis=0)
        current = [k for k in range(len(feasible)) if count[k] == 0]
        while current:
            fronts.append([feasible[k] for k in current])
            nxt = []
            for k in current:
                for j in np.flatnonzero(dom[k]):
                    count[j] -= 1
                    if count[j] == 0:
                        nxt.append(int(j))
            current = sorted(nxt)
    for r, front in enumerate(fronts, start=1):
        for i in front:
            cands[i].rank = r
    if infeasible:
        for i in infeasible:
            cands[i].rank = INFEASIBLE_RANK
        fronts.append(infeasible)
    return fronts


def crowding_distance(front: Sequence[int], cands: Sequence[Candidate]) -> np.ndarray:
    """Crowding distance of each member of ``front`` (same order).

    Objectives are normalised by their range within the front; a
    degenerate range contributes nothing to interior points.
    """
    front = list(front)
    if not front:
        raise ValueError("empty front")
    n = len(front)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    f = np.array([cands[i].objectives for i in front], dtype=float)
    for k in range(f.shape[1]):
        order = np.lexsort((np.arange(n), f[:, k]))
        col = f[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if not np.isfinite(span) or span <= 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def _descending(scores: np.ndarray, members: Sequence[int]) -> list[int]:
    members = list(members)
    # stable: larger score first, then smaller input index
    order = sorted(range(len(members)), key=lambda k: (-scores[k], members[k]))
    return [members[k] for k in order]


def _fill(fronts, n_pop, order_cut_front):
    chosen: list[int] = []
    for front in fronts:
        room = n_pop - len(chosen)
        if room <= 0:
            break
        if len(front) <= room:
            chosen.extend(front)
        else:
            chosen.extend(order_cut_front(front)[:room])
    return chosen


def conventional_order(cands: Sequence[Candidate], n_pop: int, fronts=None) -> list[int]:
    """Indices of the NSGA-II survivors, in selection order."""
    if len(cands) < n_pop:
        raise ValueError(f"cannot select {n_pop} from {len(cands)} candidates")
    if fronts is None:
        fronts = non_dominated_sort(cands)

    def by_crowding(front):
        if not cands[front[0]].feasible:
            return sorted(front)
        return _descending(crowding_distance(front, cands), front)

    return _fill(fronts, n_pop, by_crowding)


def _ensure_diagrams(cands: Sequence[Candidate], threshold: float) -> list[PersistenceDiagram]:
    out = []
    for i, c in enumerate(cands):
        if c.diagram is None:
            try:
                c.diagram = diagram_of(c.field, threshold)
            except Exception as exc:  # noqa: BLE001 - re-raised with the index
                raise DiagramFailure(i, exc) from exc
        out.append(c.diagram)
    return out


def ph_order(cands: Sequence[Candidate], n_pop: int, p: float = 2.0, threshold: float = 0.5, fronts=None):
    """Survivor indices under Wasserstein sorting, plus the mode used."""
    if len(cands) < n_pop:
        raise ValueError(f"cannot select {n_pop} from {len(cands)} candidates")
    if fronts is None:
        fronts = non_dominated_sort(cands)
    if len(fronts) == 1 and cands[fronts[0][0]].feasible:
        return conventional_order(cands, n_pop, fronts), EXPLOITATION

    scores = None

    def by_wasserstein(front):
        nonlocal scores
        if scores is None:
            diagrams = _ensure_diagrams(cands, threshold)
            scores = row_sum_scores(distance_matrix(diagrams, p))
        if not cands[front[0]].feasible:
            return sorted(front)
        return _descending(scores[list(front)], front)

    return _fill(fronts, n_pop, by_wasserstein), EXPLORATION


def select_conventional(cands: Sequence[Candidate], n_pop: int, generation: int = 0) -> Population:
    idx = conventional_order(cands, n_pop)
    return Population([cands[i] for i in idx], generation, EXPLOITATION, idx)


def select_ph(cands: Sequence[Candidate], n_pop: int, p: float = 2.0, threshold: float = 0.5, generation: int = 0) -> Population:
    """NSGA-II selection with the cut front ordered by descending row sums
    of the Wasserstein distance matrix over *all* candidates.

    Falls back to crowding distance once every candidate is rank 1.
    """
    idx, mode = ph_order(cands, n_pop, p, threshold)
    return Population([cands[i] for i in idx], generation, mode, idx)


def field_digest(f: DensityField) -> str:
    return hashlib.sha1(f.values.tobytes()).hexdigest()


def deduplicate(cands: Sequence[Candidate]) -> list[Candidate]:
    """Drop later candidates whose density field is bit-identical to an
    earlier one."""
    seen, out = set(), []
    for c in cands:
        key = field_digest(c.field)
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def hypervolume_2d(front, ref) -> float:
    """Area dominated by ``front`` and bounded by ``ref`` (minimisation)."""
    ref = np.asarray(ref, dtype=float)
    pts = np.asarray(front, dtype=float).reshape(-1, 2)
    pts = pts[np.all(np.isfinite(pts), axis=1) & np.all(pts < ref, axis=1)]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area = 0.0
    best_f2 = ref[1]
    for f1, f2 in pts:
        if f2 < best_f2:
            area += (ref[0] - f1) * (best_f2 - f2)
            best_f2 = f2
    return float(area)


def nondominated_mask(points) -> np.ndarray:
    """Boolean mask of the Pareto-optimal rows of an (n, m) array."""
    f = np.asarray(points, dtype=float)
    if len(f) == 0:
        return np.zeros(0, dtype=bool)
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    return ~np.any(le & lt, axis=0)


def pareto_points(cands: Sequence[Candidate]) -> np.ndarray:
    """Objective vectors of the feasible rank-1 candidates (ranks untouched)."""
    f = np.array([c.objectives for c in cands if c.feasible], dtype=float).reshape(-1, 2)
    return f[nondominated_mask(f)]


def write_front_csv(cands: Sequence[Candidate], path) -> None:
    """``F1,F2,rank,candidate_id`` rows sorted by rank then F1."""
    rows = sorted(cands, key=lambda c: (c.rank if c.rank is not None else math.inf, c.objectives, c.id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["F1", "F2", "rank", "candidate_id"])
        for c in rows:
            rank = "inf" if c.rank is None or math.isinf(c.rank) else int(c.rank)
            w.writerow([repr(c.objectives[0]), repr(c.objectives[1]), rank, c.id])


def read_front_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([(float(r["F1"]), float(r["F2"])) for r in rows], dtype=float).reshape(-1, 2)
