"""Structured-grid design domains, density fields and binary images.

Cells are element-centered and stored row-major with the origin at the
lower-left corner: cell ``(ix, iy)`` has linear index ``iy * nx + ix`` and
``iy = 0`` is the bottom row.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InvalidResolution(ValueError):
    pass


class MaskMismatch(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DomainMask:
    """Boolean grid of cells inside the design domain.

    ``active`` has shape ``(ny, nx)`` and is indexed ``[iy, ix]``.
    """

    nx: int
    ny: int
    active: np.ndarray
    kind: str = "rect"

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have at least one cell per axis")
        if active.shape != (self.ny, self.nx):
            raise ValueError(f"active has shape {active.shape}, expected {(self.ny, self.nx)}")
        if not active.any():
            raise ValueError("mask has no active cells")
        object.__setattr__(self, "active", _frozen(active))
        flat = np.flatnonzero(active.ravel())
        object.__setattr__(self, "_active_index", _frozen(flat))

    @property
    def n_active(self) -> int:
        return int(self._active_index.size)

    @property
    def active_index(self) -> np.ndarray:
        """Linear (row-major) grid indices of the active cells, ascending."""
        return self._active_index

    def key(self) -> tuple:
        return (self.nx, self.ny, self.active.tobytes())

    def __eq__(self, other):
        if not isinstance(other, DomainMask):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def cell_centers(self) -> np.ndarray:
        """(n_active, 2) array of element centroids in element units."""
        iy, ix = np.divmod(self._active_index, self.nx)
        return np.column_stack([ix + 0.5, iy + 0.5])


def rect_mask(nx: int, ny: int) -> DomainMask:
    return DomainMask(nx, ny, np.ones((ny, nx), dtype=bool), kind="rect")


def lbracket_mask(n: int, cut: float = 0.6) -> DomainMask:
    """n x n square with the upper-right ``cut*n`` square removed.

    The default cut of 3/5 leaves arms of width ``2n/5``.
    """
    if n < 5 or n % 5 != 0:
        raise InvalidResolution(f"L-bracket resolution must be a positive multiple of 5, got {n}")
    c = cut * n
    if not (0 < cut < 1) or abs(c - round(c)) > 1e-9:
        raise InvalidResolution(f"cut ratio {cut} does not give an integer cut at n={n}")
    arm = n - int(round(c))
    active = np.ones((n, n), dtype=bool)
    active[arm:, arm:] = False
    return DomainMask(n, n, active, kind="lbracket")


@dataclass(frozen=True, eq=False)
class DensityField:
    """Material densities in [0, 1], one value per active cell."""

    mask: DomainMask
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.mask.n_active:
            raise ValueError(f"{v.size} values for a mask with {self.mask.n_active} active cells")
        if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.all(np.isfinite(v))):
            raise ValueError("density values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def full(cls, mask: DomainMask, value: float) -> "DensityField":
        return cls(mask, np.full(mask.n_active, float(value)))

    @classmethod
    def from_grid(cls, mask: DomainMask, grid: np.ndarray) -> "DensityField":
        """Take the active cells of a ``(ny, nx)`` array."""
        grid = np.asarray(grid, dtype=float)
        return cls(mask, grid.ravel()[mask.active_index])

    def to_grid(self, fill: float = 0.0) -> np.ndarray:
        g = np.full(self.mask.nx * self.mask.ny, fill, dtype=float)
        g[self.mask.active_index] = self.values
        return g.reshape(self.mask.ny, self.mask.nx)

    def __eq__(self, other):
        if not isinstance(other, DensityField):
            return NotImplemented
        return self.mask == other.mask and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.mask, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Black/white image; ``pixels`` is True for white (void).

    ``pixels`` has shape ``(height, width)`` and uses the grid convention
    (row 0 at the bottom).
    """

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=bool)
        if p.shape != (self.height, self.width):
            raise ValueError(f"pixels have shape {p.shape}, expected {(self.height, self.width)}")
        object.__setattr__(self, "pixels", _frozen(p))

    @classmethod
    def from_array(cls, white: np.ndarray) -> "BinaryImage":
        white = np.asarray(white, dtype=bool)
        return cls(white.shape[1], white.shape[0], white)

    def __eq__(self, other):
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.width, self.height, self.pixels.tobytes()))


def binarize(field: DensityField, threshold: float = 0.5) -> BinaryImage:
    """Material where density >= threshold; everything else, including
    inactive cells, is void (white)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    solid = field.to_grid(fill=0.0) >= threshold
    solid &= field.mask.active
    return BinaryImage(field.mask.nx, field.mask.ny, ~solid)


def image_as_field(img: BinaryImage, mask: DomainMask) -> DensityField:
    """Read a binary image back as a 0/1 density field on ``mask``."""
    if (img.width, img.height) != (mask.nx, mask.ny):
        raise MaskMismatch("image size does not match mask")
    return DensityField.from_grid(mask, (~img.pixels).astype(float))


def binarized_field(field: DensityField, threshold: float = 0.5) -> DensityField:
    return DensityField(field.mask, (field.values >= threshold).astype(float))


def lp_norm_diff(a: DensityField, b: DensityField, p: float = 2.0) -> float:
    if a.mask != b.mask:
        raise MaskMismatch("fields live on different masks")
    if p < 1:
        raise ValueError("p must be >= 1")
    d = np.abs(a.values - b.values)
    if np.isinf(p):
        return float(d.max(initial=0.0))
    return float(np.sum(d**p) ** (1.0 / p))


def volume_fraction(field: DensityField) -> float:
    return float(field.values.mean())


# --- graymap I/O -----------------------------------------------------------

def _header_path(path: Path) -> Path:
    return path.with_suffix(".txt")


def write_pgm(field: DensityField, path, cut: float | None = None) -> Path:
    """Write a binary P5 graymap (0 = void, 255 = material, inactive = 0)
    and a sidecar ``.txt`` header describing the mask."""
    path = Path(path)
    mask = field.mask
    grid = np.clip(np.rint(field.to_grid(0.0) * 255), 0, 255).astype(np.uint8)
    # graymaps are stored top row first
    data = grid[::-1].tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.nx} {mask.ny}\n255\n".encode("ascii"))
        fh.write(data)
    lines = [f"mask={mask.kind}", f"nx={mask.nx}", f"ny={mask.ny}"]
    if mask.kind == "lbracket":
        arm = int(np.argmin(mask.active[-1]))
        lines.append(f"cut={cut if cut is not None else 1 - arm / mask.nx:g}")
    _header_path(path).write_text("\n".join(lines) + "\n")
    return path


def _read_pgm_bytes(path: Path) -> tuple[int, int, np.ndarray]:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit graymaps are not supported")
    img = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if img.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return w, h, img.reshape(h, w)[::-1].astype(float) / maxval


def read_pgm(path) -> DensityField:
    """Read a graymap written by :func:`write_pgm`.

    Without a sidecar header the full rectangle is taken as the domain.
    """
    path = Path(path)
    w, h, grid = _read_pgm_bytes(path)
    meta = {}
    hdr = _header_path(path)
    if hdr.exists():
        for line in hdr.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    if meta.get("mask") == "lbracket":
        mask = lbracket_mask(w, float(meta.get("cut", 0.6)))
    else:
        mask = rect_mask(w, h)
    if (mask.nx, mask.ny) != (w, h):
        raise MaskMismatch(f"{path}: header does not match image size")
    return DensityField.from_grid(mask, grid)
