"""Low-fidelity SIMP compliance minimisation with a density filter and an
optimality-criteria update, used to seed the initial data and to create
mutants under an overlap constraint.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import (
    E_MIN, BoundaryConditions, element_dofs, element_stiffness, solve_moduli,
    young_modulus,
)
from .grid import DensityField, DomainMask


@dataclass(frozen=True)
class SeedingParams:
    r: float
    v_max: float

    def __post_init__(self):
        if self.r < 1.0:
            raise ValueError("filter radius must be >= 1")
        if not 0.0 < self.v_max <= 1.0:
            raise ValueError("v_max must lie in (0, 1]")


@dataclass(frozen=True)
class LowFidConfig:
    penal: float = 3.0
    max_iters: int = 200
    move_limit: float = 0.2
    convergence_tol: float = 0.01
    e_min: float = E_MIN
    volume_tol: float = 1e-4

    def __post_init__(self):
        if self.penal < 1:
            raise ValueError("penal must be >= 1")
        if not 0 < self.move_limit <= 1:
            raise ValueError("move limit must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class LowFidResult:
    field: DensityField  # filtered physical densities
    compliance: float
    converged: bool
    iterations: int
    volume: float
    overlap: Optional[float] = None


def seeding_grid(n: int, r_range=(1.5, 6.0), v_range=(0.15, 0.60)) -> list[SeedingParams]:
    """``n`` seeding points on a radius x volume grid.

    The grid has ``a x b = n`` points with ``a`` the largest divisor of
    ``n`` not above ``sqrt(n)``; for ``n = 100`` this is radii
    1.5, 2.0, ..., 6.0 times volume bounds 0.15, 0.20, ..., 0.60.
    """
    if n < 1:
        raise ValueError("need at least one seeding point")
    a = max(d for d in range(1, int(np.sqrt(n)) + 1) if n % d == 0)
    b = n // a
    radii = np.linspace(*r_range, b) if b > 1 else np.array([r_range[0]])
    vols = np.linspace(*v_range, a) if a > 1 else np.array([v_range[0]])
    return [SeedingParams(float(round(r, 10)), float(round(v, 10))) for r in radii for v in vols]


@lru_cache(maxsize=32)
def filter_matrix(mask: DomainMask, r: float) -> sp.csr_matrix:
    """Row-normalised conic filter weights ``max(0, r - dist)`` over active
    cells."""
    centers = mask.cell_centers()
    reach = int(np.ceil(r)) - 1
    grid_id = np.full(mask.nx * mask.ny, -1, dtype=np.int64)
    grid_id[mask.active_index] = np.arange(mask.n_active)
    grid_id = grid_id.reshape(mask.ny, mask.nx)
    iy, ix = np.divmod(mask.active_index, mask.nx)
    rows, cols, vals = [], [], []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            w = r - np.hypot(dx, dy)
            if w <= 0:
                continue
            jy, jx = iy + dy, ix + dx
            ok = (jy >= 0) & (jy < mask.ny) & (jx >= 0) & (jx < mask.nx)
            j = np.full(len(iy), -1)
            j[ok] = grid_id[jy[ok], jx[ok]]
            ok &= j >= 0
            rows.append(np.flatnonzero(ok))
            cols.append(j[ok])
            vals.append(np.full(ok.sum(), w))
    h = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(centers), len(centers)),
    )
    h = sp.diags(1.0 / np.asarray(h.sum(axis=1)).ravel()) @ h
    return h.tocsr()


def density_filter(x: DensityField, r: float) -> DensityField:
    if r < 1:
        raise ValueError("filter radius must be >= 1")
    w = filter_matrix(x.mask, float(r))
    return DensityField(x.mask, np.clip(w @ x.values, 0.0, 1.0))


def compliance_and_gradient(x: np.ndarray, mask: DomainMask, bc: BoundaryConditions, r: float,
                            penal: float = 3.0, e_min: float = E_MIN):
    """Compliance of the filtered SIMP design and its gradient with respect
    to the unfiltered design variables ``x``.

    Returns ``(compliance, dc_dx, rho_filtered, u)``.
    """
    w = filter_matrix(mask, float(r))
    rho = w @ x
    u = solve_moduli(mask, bc, young_modulus(rho, penal, e_min))
    ue = u[element_dofs(mask)]
    energy = np.einsum("ei,ij,ej->e", ue, element_stiffness(), ue)
    c = float(bc.force_vector() @ u)
    dc_drho = -penal * rho ** (penal - 1) * (1.0 - e_min) * energy
    return c, w.T @ dc_drho, rho, u


def _bisect(fn, target, lo=0.0, hi=1e12, tol=1e-4, max_iter=200):
    """Multiplier for a constraint ``fn(lam) <= target`` with ``fn``
    non-increasing in ``lam``.

    Returns ``(lam, fn(lam))``.  ``lo`` is returned when the constraint is
    already inactive there; otherwise the result is the feasible end of a
    geometric bisection, stopped once within ``tol`` of the target.
    """
    v = fn(lo)
    if v <= target:
        return lo, v
    lo = max(lo, 1e-30)
    best = (hi, fn(hi))
    if best[1] > target:
        return best
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi)
        v = fn(mid)
        if v > target:
            lo = mid
        else:
            hi, best = mid, (mid, v)
            if target - v <= tol:
                break
        if hi <= lo * (1 + 1e-12):
            break
    return best


def _oc_candidate(x, dc, dv, lam, move):
    with np.errstate(over="ignore"):
        ratio = -dc / np.maximum(lam * dv, 1e-300)
    xnew = x * np.sqrt(np.maximum(ratio, 0.0))
    return np.clip(xnew, np.maximum(0.0, x - move), np.minimum(1.0, x + move))


def oc_update(x: DensityField, sensitivities, volume_target: float, move_limit: float = 0.2,
              filter_r: Optional[float] = None, tol: float = 1e-4, return_multiplier: bool = False):
    """Optimality-criteria step with a bisected volume multiplier.

    With ``filter_r`` the volume is measured on the filtered design and the
    volume sensitivities are chained through the filter.
    """
    xv = x.values
    dc = np.minimum(np.asarray(sensitivities, dtype=float), 0.0)
    n = xv.size
    if filter_r is None:
        def vol(z):
            return z.mean()
        dv = np.full(n, 1.0 / n)
    else:
        w = filter_matrix(x.mask, float(filter_r))

        def vol(z):
            return (w @ z).mean()
        dv = w.T @ np.full(n, 1.0 / n)

    lam, _ = _bisect(lambda lam: vol(_oc_candidate(xv, dc, dv, lam, move_limit)), volume_target, 0.0, 1e12, tol)
    out = DensityField(x.mask, _oc_candidate(xv, dc, dv, lam, move_limit))
    return (out, lam) if return_multiplier else out


def _run(s: SeedingParams, mask, bc, cfg, x0, rho_ref=None, g_max=None) -> LowFidResult:
    w = filter_matrix(mask, float(s.r))
    n = mask.n_active
    x = np.full(n, s.v_max) if x0 is None else np.array(x0.values, dtype=float)
    dv = w.T @ np.full(n, 1.0 / n)
    dg = None
    if rho_ref is not None:
        dg = w.T @ (rho_ref / n)

    # both constraints are linear in x through the filter
    def constraints(z):
        return float(dv @ z), (None if dg is None else float(dg @ z))

    converged = False
    it = 0
    c = np.inf
    for it in range(1, cfg.max_iters + 1):
        c, dc, _, _ = compliance_and_gradient(x, mask, bc, s.r, cfg.penal, cfg.e_min)
        dc = np.minimum(dc, 0.0)
        if dg is None:
            lam, _ = _bisect(
                lambda lam: constraints(_oc_candidate(x, dc, dv, lam, cfg.move_limit))[0],
                s.v_max, 0.0, 1e12, cfg.volume_tol,
            )
            xnew = _oc_candidate(x, dc, dv, lam, cfg.move_limit)
        else:
            xnew = _two_multiplier_step(x, dc, dv, dg, s.v_max, g_max, cfg, constraints)
        change = float(np.max(np.abs(xnew - x)))
        x = xnew
        if change < cfg.convergence_tol:
            converged = True
            break
    rho = np.clip(w @ x, 0.0, 1.0)
    c, _, _, _ = compliance_and_gradient(x, mask, bc, s.r, cfg.penal, cfg.e_min)
    vol, g = constraints(x)
    return LowFidResult(DensityField(mask, rho), c, converged, it, vol, g)


def _two_multiplier_step(x, dc, dv, dg, v_max, g_max, cfg, constraints):
    """OC step for volume <= v_max and overlap <= g_max.

    Outer bisection on the overlap multiplier, inner bisection on the
    volume multiplier; each inner solve respects complementary slackness.
    """
    move = cfg.move_limit

    def step(lam_v, lam_g):
        with np.errstate(over="ignore"):
            ratio = -dc / np.maximum(lam_v * dv + lam_g * dg, 1e-300)
        xn = x * np.sqrt(np.maximum(ratio, 0.0))
        return np.clip(xn, np.maximum(0.0, x - move), np.minimum(1.0, x + move))

    def inner(lam_g):
        lam_v, _ = _bisect(lambda lv: constraints(step(lv, lam_g))[0], v_max, 0.0, 1e12, cfg.volume_tol)
        return lam_v

    def overlap(lam_g):
        return constraints(step(inner(lam_g), lam_g))[1]

    lam_g, _ = _bisect(overlap, g_max, 0.0, 1e12, 1e-2 * g_max)
    return step(inner(lam_g), lam_g)


def solve_low_fidelity(s: SeedingParams, mask: DomainMask, bc: BoundaryConditions,
                       cfg: LowFidConfig = LowFidConfig(), x0: Optional[DensityField] = None) -> LowFidResult:
    """Minimise compliance subject to filtered volume <= ``s.v_max``."""
    return _run(s, mask, bc, cfg, x0)


def reference_density(fields) -> DensityField:
    """Elementwise mean of the population's density fields."""
    fields = [getattr(f, "field", f) for f in getattr(fields, "members", fields)]
    if not fields:
        raise ValueError("empty population")
    return DensityField(fields[0].mask, np.mean([f.values for f in fields], axis=0))


def initial_guess(s: SeedingParams, mask: DomainMask, rng=None, noise: float = 0.0) -> DensityField:
    x = np.full(mask.n_active, s.v_max)
    if rng is not None and noise > 0:
        x = x + rng.uniform(-noise, noise, size=x.size)
    return DensityField(mask, np.clip(x, 0.0, 1.0))


def solve_mutation(s: SeedingParams, rho_ref: DensityField, g_max: float, bc: BoundaryConditions,
                   cfg: LowFidConfig = LowFidConfig(), rng=None, noise: float = 0.1,
                   x0: Optional[DensityField] = None) -> LowFidResult:
    """Low-fidelity solve with the extra overlap constraint
    ``sum(rho * rho_ref) <= g_max * n_active``.

    Unless ``x0`` is given the start is uniform ``v_max`` plus uniform noise
    of amplitude ``noise`` drawn from ``rng``.
    """
    if not 0 < g_max <= 1:
        raise ValueError("g_max must lie in (0, 1]")
    mask = rho_ref.mask
    if x0 is None:
        x0 = initial_guess(s, mask, rng, noise)
    ref = rho_ref.values
    if g_max >= 1 or not ref.any():
        return _run(s, mask, bc, cfg, x0)
    return _run(s, mask, bc, cfg, x0, ref, g_max)
