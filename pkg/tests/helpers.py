"""Fixtures and brute-force oracles shared by the test modules."""
from collections import deque
from itertools import permutations

import numpy as np

from ddtd.grid import BinaryImage, DensityField, lbracket_mask, rect_mask
from ddtd.persistence import PersistenceDiagram


def brute_signed_distance(white):
    white = np.asarray(white, bool)
    h, w = white.shape
    ys, xs = np.mgrid[0:h, 0:w]
    phi = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            other = white != white[y, x]
            d = (np.abs(ys - y) + np.abs(xs - x))[other].min()
            phi[y, x] = -d if white[y, x] else d
    return phi


def flood_components(inside):
    """4-connected component count by breadth-first flood fill."""
    inside = np.asarray(inside, bool)
    h, w = inside.shape
    seen = np.zeros_like(inside)
    count = 0
    for y0 in range(h):
        for x0 in range(w):
            if not inside[y0, x0] or seen[y0, x0]:
                continue
            count += 1
            seen[y0, x0] = True
            q = deque([(y0, x0)])
            while q:
                y, x = q.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and inside[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        q.append((yy, xx))
    return count


def random_image(rng, max_side=16, p=None):
    """Random non-monochrome white mask of random size."""
    while True:
        h, w = rng.integers(1, max_side + 1, size=2)
        if h * w < 2:
            continue
        white = rng.random((h, w)) < (rng.uniform(0.2, 0.8) if p is None else p)
        if white.any() and not white.all():
            return white


def fig6_image():
    """Three voids in black material: a deep void 0 on the left, a 5x5
    void 1 behind a 2-pixel wall and a 3x3 void 2 behind a 5-pixel wall.
    Expected pairs: void 1 (-3, 1) and void 2 (-2, 3)."""
    white = np.zeros((12, 30), bool)
    white[:, 0:10] = True
    white[3:8, 12:17] = True
    white[4:7, 22:25] = True
    return white


def lbracket_with_holes(k, n=50):
    """Full-material L-bracket with ``k`` enclosed square holes of sizes
    2, 3, 4 (cycling), every wall at least 4 elements thick."""
    mask = lbracket_mask(n)
    grid = np.ones((n, n))
    slots = [(3, 3), (3, 11), (3, 19), (3, 27), (3, 35), (11, 3), (19, 3)]
    for j in range(k):
        y, x = slots[j]
        s = 2 + j % 3
        grid[y : y + s, x : x + s] = 0.0
    return DensityField.from_grid(mask, grid)


def topology_fixtures(families=4, max_holes=5, side=24, seed=7):
    """Material plates (black everywhere, including the border) with
    1..max_holes small holes.  Fixture ``(f, k)`` holds the first ``k``
    holes of family ``f``, so consecutive members differ by one hole.

    Returns a list of (white-mask, hole-count); 20 fixtures by default.
    """
    rng = np.random.default_rng(seed)
    cells = [(y, x) for y in range(3) for x in range(3)]
    out = []
    for _ in range(families):
        slots = rng.permutation(len(cells))[:max_holes]
        holes = []
        for s in slots:
            cy, cx = cells[int(s)]
            size = int(rng.integers(1, 4))
            y = 3 + cy * 7 + int(rng.integers(0, 5 - size))
            x = 3 + cx * 7 + int(rng.integers(0, 5 - size))
            holes.append((y, x, size))
        for k in range(1, max_holes + 1):
            white = np.zeros((side, side), bool)
            for y, x, size in holes[:k]:
                white[y : y + size, x : x + size] = True
            out.append((white, k))
    return out


def shift(white, dy=0, dx=1, fill=False):
    """Translate a white mask, filling the vacated border with ``fill``."""
    out = np.full_like(white, fill)
    h, w = white.shape
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = white[
        max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)
    ]
    return out


def white_to_field(white):
    h, w = white.shape
    return DensityField(rect_mask(w, h), (~white).astype(float).ravel())


def brute_wasserstein(a, b, p=2.0):
    """Minimum over every partial matching by explicit enumeration."""
    a = np.asarray(a, float).reshape(-1, 2)
    b = np.asarray(b, float).reshape(-1, 2)

    def norm(v):
        return float(np.sum(np.abs(v) ** p)) ** (1.0 / p)

    def diag(q):
        m = (q[0] + q[1]) / 2
        return norm(q - np.array([m, m])) ** p

    best = np.inf
    n1, n2 = len(a), len(b)
    # choose which points of a get matched (subset), and to which of b (injective)
    for mask in range(1 << n1):
        left = [i for i in range(n1) if mask >> i & 1]
        for right in permutations(range(n2), len(left)):
            cost = sum(norm(a[i] - b[j]) ** p for i, j in zip(left, right))
            cost += sum(diag(a[i]) for i in range(n1) if i not in left)
            cost += sum(diag(b[j]) for j in range(n2) if j not in right)
            best = min(best, cost)
    return best ** (1.0 / p)


def random_diagram(rng, max_points=4, scale=5):
    k = int(rng.integers(0, max_points + 1))
    pairs = []
    for _ in range(k):
        b = int(rng.integers(-scale, scale))
        d = b + int(rng.integers(1, scale + 1))
        pairs.append((float(b), float(d)))
    return PersistenceDiagram(tuple(pairs))


def random_real_diagram(rng, max_points=4):
    k = int(rng.integers(0, max_points + 1))
    b = rng.uniform(-5, 5, k)
    d = b + rng.uniform(0.01, 5, k)
    return PersistenceDiagram(tuple(zip(b.tolist(), d.tolist())))


def reference_fronts(points):
    """Repeated peeling: O(n^2) per front."""
    pts = [tuple(p) for p in points]
    remaining = list(range(len(pts)))
    fronts = []
    while remaining:
        front = [i for i in remaining
                 if not any(all(x <= y for x, y in zip(pts[j], pts[i])) and pts[j] != pts[i]
                            for j in remaining)]
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in front]
    return fronts


def reference_crowding(points):
    pts = np.asarray(points, float)
    n, m = pts.shape
    dist = [0.0] * n
    if n <= 2:
        return [np.inf] * n
    for k in range(m):
        order = sorted(range(n), key=lambda i: (pts[i, k], i))
        lo, hi = pts[order[0], k], pts[order[-1], k]
        dist[order[0]] = dist[order[-1]] = np.inf
        for pos in range(1, n - 1):
            i = order[pos]
            if hi > lo:
                dist[i] += (pts[order[pos + 1], k] - pts[order[pos - 1], k]) / (hi - lo)
    return dist


def reference_nsga2(points, n_pop):
    """Survivor indices: whole fronts, then the cut front by descending
    crowding distance with index tie-break."""
    chosen = []
    for front in reference_fronts(points):
        if len(chosen) + len(front) <= n_pop:
            chosen += front
            continue
        cd = reference_crowding([points[i] for i in front])
        order = sorted(range(len(front)), key=lambda k: (-cd[k], front[k]))
        chosen += [front[k] for k in order[: n_pop - len(chosen)]]
        break
    return chosen
