"""Plane-stress Q4 finite elements on the structured grid.

Nodes are numbered ``iy * (nx + 1) + ix`` with two dofs each (x then y).
Element corners run counter-clockwise from the lower-left node.  All
elements are squares of edge ``element_size``; the element stiffness of a
square Q4 does not depend on its size, only the strain recovery does.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from .grid import DensityField, DomainMask, binarized_field, volume_fraction

NU = 0.3
E_MIN = 1e-9

_CORNERS = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)


class SingularSystem(RuntimeError):
    pass


class InfeasibleCandidate(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    """Supports and nodal loads for one grid.

    ``prescribed`` holds non-zero imposed displacements (patch tests);
    ``fixed_dofs`` are clamped to zero.
    """

    nx: int
    ny: int
    fixed_dofs: np.ndarray
    loads: dict = field(default_factory=dict)
    prescribed: dict = field(default_factory=dict)
    element_size: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        object.__setattr__(self, "fixed_dofs", fixed)
        object.__setattr__(self, "loads", {int(k): float(v) for k, v in self.loads.items()})
        object.__setattr__(self, "prescribed", {int(k): float(v) for k, v in self.prescribed.items()})
        n = self.n_dofs
        for d in list(fixed) + list(self.loads) + list(self.prescribed):
            if not 0 <= d < n:
                raise ValueError(f"dof {d} out of range for a {self.nx}x{self.ny} grid")
        if set(fixed.tolist()) & set(self.loads):
            raise ValueError("a dof cannot be both fixed and loaded")
        if len(fixed) + len(self.prescribed) < 3:
            raise ValueError("at least three constrained dofs are needed")

    @property
    def n_dofs(self) -> int:
        return 2 * (self.nx + 1) * (self.ny + 1)

    def constrained(self) -> np.ndarray:
        return np.union1d(self.fixed_dofs, np.array(sorted(self.prescribed), dtype=np.int64))

    def force_vector(self) -> np.ndarray:
        f = np.zeros(self.n_dofs)
        for d, v in self.loads.items():
            f[d] += v
        return f

    def scaled(self, factor: float) -> "BoundaryConditions":
        return BoundaryConditions(
            self.nx, self.ny, self.fixed_dofs,
            {d: v * factor for d, v in self.loads.items()},
            {d: v * factor for d, v in self.prescribed.items()},
            self.element_size, self.name,
        )


@dataclass(frozen=True, eq=False)
class FemSolution:
    displacements: np.ndarray
    compliance: float
    element_stresses: np.ndarray


def node_id(nx: int, ix: int, iy: int) -> int:
    return iy * (nx + 1) + ix


def elasticity_matrix(E: float = 1.0, nu: float = NU) -> np.ndarray:
    return E / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


def strain_displacement(xi: float = 0.0, eta: float = 0.0, h: float = 1.0) -> np.ndarray:
    """3x8 B matrix of a square element of edge ``h``."""
    dn_dxi = 0.25 * _CORNERS[:, 0] * (1 + eta * _CORNERS[:, 1])
    dn_deta = 0.25 * _CORNERS[:, 1] * (1 + xi * _CORNERS[:, 0])
    dx, dy = dn_dxi * 2 / h, dn_deta * 2 / h
    b = np.zeros((3, 8))
    b[0, 0::2] = dx
    b[1, 1::2] = dy
    b[2, 0::2] = dy
    b[2, 1::2] = dx
    return b


@lru_cache(maxsize=None)
def _element_stiffness(nu: float) -> np.ndarray:
    g = 1 / np.sqrt(3)
    d = elasticity_matrix(1.0, nu)
    ke = np.zeros((8, 8))
    for xi in (-g, g):
        for eta in (-g, g):
            b = strain_displacement(xi, eta, 1.0)
            ke += b.T @ d @ b * 0.25  # det J = (h/2)^2 with h = 1
    ke = 0.5 * (ke + ke.T)
    ke.setflags(write=False)
    return ke


def element_stiffness(nu: float = NU) -> np.ndarray:
    """Unit-modulus 8x8 stiffness of a square Q4 (2x2 Gauss)."""
    return _element_stiffness(float(nu))


@lru_cache(maxsize=64)
def element_dofs(mask: DomainMask) -> np.ndarray:
    """(n_active, 8) global dofs of each active element."""
    iy, ix = np.divmod(mask.active_index, mask.nx)
    n0 = iy * (mask.nx + 1) + ix
    nodes = np.column_stack([n0, n0 + 1, n0 + mask.nx + 2, n0 + mask.nx + 1])
    dofs = np.empty((len(n0), 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * nodes
    dofs[:, 1::2] = 2 * nodes + 1
    dofs.setflags(write=False)
    return dofs


@lru_cache(maxsize=64)
def _triplets(mask: DomainMask):
    edof = element_dofs(mask)
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    return rows, cols


def young_modulus(rho: np.ndarray, penal: float, e_min: float) -> np.ndarray:
    return e_min + rho**penal * (1.0 - e_min)


def assemble_from_moduli(mask: DomainMask, moduli: np.ndarray, nu: float = NU) -> sp.csc_matrix:
    rows, cols = _triplets(mask)
    vals = (moduli[:, None] * element_stiffness(nu).ravel()[None, :]).ravel()
    n = 2 * (mask.nx + 1) * (mask.ny + 1)
    return sp.csc_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_stiffness(field: DensityField, penal: float = 3.0, e_min: float = E_MIN, nu: float = NU) -> sp.csc_matrix:
    """Global stiffness with SIMP moduli ``e_min + rho^penal (1 - e_min)``."""
    if penal < 1:
        raise ValueError("penal must be >= 1")
    if not 0 < e_min < 1:
        raise ValueError("e_min must lie in (0, 1)")
    return assemble_from_moduli(field.mask, young_modulus(field.values, penal, e_min), nu)


def solve_displacement(k: sp.spmatrix, bc: BoundaryConditions) -> np.ndarray:
    """Solve ``K u = f`` on the free dofs.

    Dofs with no stiffness at all (nodes outside every active element) are
    left at zero.
    """
    k = sp.csc_matrix(k)
    n = k.shape[0]
    if n != bc.n_dofs:
        raise ValueError("stiffness size does not match boundary conditions")
    f = bc.force_vector()
    u = np.zeros(n)
    for d, v in bc.prescribed.items():
        u[d] = v
    has_stiffness = np.abs(k.diagonal()) > 0
    free = np.setdiff1d(np.flatnonzero(has_stiffness), bc.constrained())
    if np.any(f[~has_stiffness] != 0):
        raise SingularSystem("load applied to a dof outside the mesh")
    if free.size == 0:
        return u
    rhs = f[free] - k[free][:, bc.constrained()] @ u[bc.constrained()]
    kff = k[free][:, free].tocsc()
    try:
        lu = splu(kff)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    scale = max(np.linalg.norm(rhs), 1e-300)
    uf = np.zeros_like(rhs)
    r = rhs
    for _ in range(4):
        uf = uf + lu.solve(r)
        if not np.all(np.isfinite(uf)):
            raise SingularSystem("non-finite displacements")
        r = rhs - kff @ uf
        if np.linalg.norm(r) <= 1e-8 * scale:
            break
    else:
        raise SingularSystem("linear solve did not reach the residual tolerance")
    u[free] = uf
    return u


class _BandedSystem:
    """Reduced stiffness of one (mask, supports) pair stored as a banded
    upper triangle, so repeated solves skip sparse-matrix assembly."""

    def __init__(self, mask: DomainMask, bc: BoundaryConditions):
        edof = element_dofs(mask)
        n = bc.n_dofs
        touched = np.zeros(n, dtype=bool)
        touched[edof.ravel()] = True
        touched[bc.fixed_dofs] = False
        self.free = np.flatnonzero(touched)
        red = np.full(n, -1, dtype=np.int64)
        red[self.free] = np.arange(self.free.size)
        r = np.repeat(red[edof], 8, axis=1).ravel()
        c = np.tile(red[edof], (1, 8)).ravel()
        keep = (r >= 0) & (c >= 0) & (r <= c)
        self.bw = int(np.max(c[keep] - r[keep])) if keep.any() else 0
        nf = self.free.size
        self.keep = np.flatnonzero(keep)
        self.flat = (self.bw + r[keep] - c[keep]) * nf + c[keep]
        self.size = (self.bw + 1) * nf
        self.edof = edof

    def solve(self, moduli: np.ndarray, f: np.ndarray, nu: float = NU) -> np.ndarray:
        ke = element_stiffness(nu)
        vals = (moduli[:, None] * ke.ravel()[None, :]).ravel()[self.keep]
        ab = np.bincount(self.flat, weights=vals, minlength=self.size).reshape(self.bw + 1, -1)
        u = np.zeros(f.size)
        if self.free.size == 0:
            return u
        try:
            chol = sla.cholesky_banded(ab, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"stiffness is not positive definite: {exc}") from exc
        rhs = f[self.free]
        scale = max(np.linalg.norm(rhs), 1e-300)
        uf = np.zeros_like(rhs)
        r = rhs
        # iterative refinement keeps soft-kill (E = 1e-9) systems within tolerance
        for _ in range(4):
            uf = uf + sla.cho_solve_banded((chol, False), r, check_finite=False)
            if not np.all(np.isfinite(uf)):
                raise SingularSystem("non-finite displacements")
            r = rhs - self._apply(uf, moduli, ke, f.size)
            if np.linalg.norm(r) <= 1e-8 * scale:
                break
        else:
            raise SingularSystem("linear solve did not reach the residual tolerance")
        u[self.free] = uf
        return u

    def _apply(self, uf, moduli, ke, n):
        u = np.zeros(n)
        u[self.free] = uf
        fe = (u[self.edof] @ ke) * moduli[:, None]
        return np.bincount(self.edof.ravel(), weights=fe.ravel(), minlength=n)[self.free]


_SYSTEMS: dict = {}


def solve_moduli(mask: DomainMask, bc: BoundaryConditions, moduli: np.ndarray) -> np.ndarray:
    """Displacements for per-element moduli; fast path for zero supports."""
    if bc.prescribed:
        return solve_displacement(assemble_from_moduli(mask, moduli), bc)
    key = (mask.key(), bc.fixed_dofs.tobytes(), bc.nx, bc.ny)
    system = _SYSTEMS.get(key)
    if system is None:
        if len(_SYSTEMS) > 32:
            _SYSTEMS.clear()
        system = _SYSTEMS[key] = _BandedSystem(mask, bc)
    f = bc.force_vector()
    edof_touched = np.zeros(f.size, dtype=bool)
    edof_touched[system.edof.ravel()] = True
    if np.any(f[~edof_touched] != 0):
        raise SingularSystem("load applied to a dof outside the mesh")
    return system.solve(moduli, f)


def element_stresses(mask: DomainMask, u: np.ndarray, element_size: float = 1.0, nu: float = NU) -> np.ndarray:
    """(n_active, 3) centroid stresses (sx, sy, txy) for the solid modulus."""
    b = strain_displacement(0.0, 0.0, element_size)
    ue = u[element_dofs(mask)]
    return ue @ (elasticity_matrix(1.0, nu) @ b).T


def von_mises_from_stress(s: np.ndarray) -> np.ndarray:
    s = np.atleast_2d(s)
    sx, sy, txy = s[:, 0], s[:, 1], s[:, 2]
    return np.sqrt(np.maximum(sx**2 + sy**2 - sx * sy + 3 * txy**2, 0.0))


def von_mises(field: DensityField, u: np.ndarray, element_size: float = 1.0, nu: float = NU) -> np.ndarray:
    """Centroid von Mises stress of every active element, evaluated with the
    solid material law regardless of the element's density."""
    return von_mises_from_stress(element_stresses(field.mask, u, element_size, nu))


def analyze(field: DensityField, bc: BoundaryConditions, penal: float = 3.0, e_min: float = E_MIN) -> FemSolution:
    if penal < 1:
        raise ValueError("penal must be >= 1")
    u = solve_moduli(field.mask, bc, young_modulus(field.values, penal, e_min))
    compliance = float(bc.force_vector() @ u)
    return FemSolution(u, compliance, von_mises(field, u, bc.element_size))


def load_path_connected(solid: np.ndarray, bc: BoundaryConditions) -> bool:
    """Whether every loaded node is joined to a support through solid
    elements (elements sharing a node count as connected).

    ``solid`` is a ``(ny, nx)`` boolean grid.
    """
    nx, ny = bc.nx, bc.ny
    labels, n = ndimage.label(solid, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return False
    padded = np.zeros((ny + 2, nx + 2), dtype=labels.dtype)
    padded[1:-1, 1:-1] = labels

    def node_labels(node):
        iy, ix = divmod(node, nx + 1)
        around = padded[iy : iy + 2, ix : ix + 2]
        return set(around[around > 0].tolist())

    supported = set()
    for node in np.unique(bc.constrained() // 2).tolist():
        supported |= node_labels(node)
    if not supported:
        return False
    for node in sorted({d // 2 for d, v in bc.loads.items() if v != 0}):
        if not node_labels(node) & supported:
            return False
    return True


def evaluate_high_fidelity(field: DensityField, bc: BoundaryConditions, threshold: float = 0.5) -> tuple[float, float]:
    """(max von Mises stress over solid elements, volume fraction) of the
    binarized design.  Void elements are kept at ``E_MIN``."""
    binary = binarized_field(field, threshold)
    solid = binary.values > 0.5
    f2 = volume_fraction(binary)
    if not solid.any():
        raise InfeasibleCandidate("design has no solid elements")
    if not load_path_connected(binary.to_grid(0.0) > 0.5, bc):
        raise InfeasibleCandidate("no solid load path from loads to supports")
    try:
        sol = analyze(binary, bc, penal=1.0, e_min=E_MIN)
    except SingularSystem as exc:
        raise InfeasibleCandidate(str(exc)) from exc
    f1 = float(sol.element_stresses[solid].max())
    if not np.isfinite(f1):
        raise InfeasibleCandidate("non-finite stress")
    return f1, f2


# --- boundary condition presets ---------------------------------------------

def lbracket_bc(n: int, cut: float = 0.6, total_load: float = 1.0, n_load_nodes: int = 3, side: float = 1.0) -> BoundaryConditions:
    """L-bracket: top edge of the vertical arm clamped, downward load on the
    right end of the horizontal arm spread over ``n_load_nodes`` nodes
    hanging from its top corner.

    The square side has physical length ``side``, so elements have edge
    ``side / n``.
    """
    arm = n - int(round(cut * n))
    fixed = []
    for ix in range(arm + 1):
        nd = node_id(n, ix, n)
        fixed += [2 * nd, 2 * nd + 1]
    loads = {}
    for k in range(n_load_nodes):
        nd = node_id(n, n, arm - k)
        loads[2 * nd + 1] = -total_load / n_load_nodes
    return BoundaryConditions(n, n, fixed, loads, element_size=side / n, name="lbracket")


def cantilever_bc(nx: int, ny: int, load: float = 1.0, node: str = "mid") -> BoundaryConditions:
    """Left edge clamped; downward point load on the right edge."""
    fixed = []
    for iy in range(ny + 1):
        nd = node_id(nx, 0, iy)
        fixed += [2 * nd, 2 * nd + 1]
    iy = ny // 2 if node == "mid" else 0
    nd = node_id(nx, nx, iy)
    return BoundaryConditions(nx, ny, fixed, {2 * nd + 1: -load}, name="cantilever")
