"""0th persistent homology of void regions in binary images.

The filtration is the sublevel-set filtration of the signed Manhattan
distance to the black/white boundary: void (white) pixels are negative,
material (black) pixels positive.  Void components are born deep inside
holes and die when they merge through the surrounding material.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import BinaryImage, DensityField, binarize


class MonochromeImage(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LevelSetField:
    width: int
    height: int
    phi: np.ndarray  # (height, width) int

    def __post_init__(self):
        phi = np.asarray(self.phi)
        if phi.shape != (self.height, self.width):
            raise ValueError("phi shape does not match width/height")
        phi = np.array(phi, dtype=np.int64)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True)
class PersistenceDiagram:
    """Finite birth-death pairs; the essential class is not stored."""

    pairs: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        pairs = tuple(sorted((float(b), float(d)) for b, d in self.pairs))
        for b, d in pairs:
            if not (np.isfinite(b) and np.isfinite(d)):
                raise ValueError("diagram pairs must be finite")
            if not b < d:
                raise ValueError(f"pair ({b}, {d}) has non-positive lifetime")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def as_array(self) -> np.ndarray:
        return np.array(self.pairs, dtype=float).reshape(-1, 2)

    def lifetimes(self) -> np.ndarray:
        a = self.as_array()
        return a[:, 1] - a[:, 0]

    def alive_at(self, t: float) -> int:
        return sum(1 for b, d in self.pairs if b <= t < d)


def signed_distance(img: BinaryImage) -> LevelSetField:
    """Signed Manhattan distance to the nearest pixel of the other colour.

    White pixels get ``-d``, black pixels ``+d``; adjacent pixels across the
    boundary therefore carry -1 and +1.
    """
    white = img.pixels
    if white.all() or not white.any():
        raise MonochromeImage("image has no black/white boundary")
    # taxicab chamfer transform is exact for the L1 metric
    d_white = ndimage.distance_transform_cdt(white, metric="taxicab")
    d_black = ndimage.distance_transform_cdt(~white, metric="taxicab")
    phi = np.where(white, -d_white, d_black)
    return LevelSetField(img.width, img.height, phi)


def sublevel_components(levelset: LevelSetField, t: float) -> int:
    """Number of 4-connected components of ``{phi <= t}``."""
    _, n = ndimage.label(levelset.phi <= t)
    return int(n)


def persistence_diagram_0d(levelset: LevelSetField) -> PersistenceDiagram:
    """Union-find over 4-adjacency in increasing (phi, linear index) order.

    On a merge the younger component dies; age is compared by
    (birth value, linear index of the birth pixel).  The component born
    first never dies and is left out.
    """
    phi = levelset.phi.ravel()
    w, h = levelset.width, levelset.height
    order = np.lexsort((np.arange(phi.size), phi))
    rank = np.empty(phi.size, dtype=np.int64)
    rank[order] = np.arange(phi.size)

    parent = [-1] * phi.size  # -1 = not yet added
    pairs = []

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    phi_list = phi.tolist()
    rank_list = rank.tolist()
    for idx in order.tolist():
        parent[idx] = idx
        v = phi_list[idx]
        y, x = divmod(idx, w)
        neighbours = []
        if x > 0:
            neighbours.append(idx - 1)
        if x < w - 1:
            neighbours.append(idx + 1)
        if y > 0:
            neighbours.append(idx - w)
        if y < h - 1:
            neighbours.append(idx + w)
        for q in neighbours:
            if parent[q] < 0:
                continue
            ra, rb = find(idx), find(q)
            if ra == rb:
                continue
            # roots are birth pixels, so filtration rank orders them by age
            if rank_list[ra] > rank_list[rb]:
                ra, rb = rb, ra
            birth = phi_list[rb]
            if birth != v:
                pairs.append((birth, v))
            parent[rb] = ra
    return PersistenceDiagram(tuple(pairs))


def diagram_of(field: DensityField, threshold: float = 0.5) -> PersistenceDiagram:
    """Binarize, compute the signed distance and its 0th diagram.

    Monochrome images have a single void component at most and give an
    empty diagram.
    """
    img = binarize(field, threshold)
    if img.pixels.all() or not img.pixels.any():
        return PersistenceDiagram()
    return persistence_diagram_0d(signed_distance(img))


def write_diagram_csv(diagram: PersistenceDiagram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["birth", "death"])
        for b, d in diagram.pairs:
            w.writerow([repr(b), repr(d)])


def read_diagram_csv(path) -> PersistenceDiagram:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return PersistenceDiagram(tuple((float(r["birth"]), float(r["death"])) for r in rows))
