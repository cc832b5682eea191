"""Uniform Cartesian grids with ghost layers, boundary conditions, field storage."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from allmach.state import EquationOfState, conserved_from_primitive_arrays

__all__ = [
    "Grid",
    "GridField",
    "BoundaryCondition",
    "BC_KINDS",
    "fill_ghosts",
    "total_conserved",
]

#: periodic wraps around; reflecting mirrors with the normal velocity negated;
#: outflow copies the nearest interior cell (zero gradient); fixed keeps
#: whatever the case initializer wrote into the ghost cells.
BC_KINDS = ("periodic", "reflecting", "outflow", "fixed")


@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian grid: cell-centered collocation, ghost layers per side."""

    n_cells: tuple
    spacing: tuple
    origin: tuple
    n_ghost: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_cells", tuple(int(n) for n in self.n_cells))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if len(self.spacing) != self.dim or len(self.origin) != self.dim:
            raise ValueError("n_cells, spacing and origin must have equal length")
        if any(n < 2 for n in self.n_cells):
            raise ValueError("need at least 2 cells per active axis")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacings must be positive")
        if self.n_ghost < 1:
            raise ValueError("need at least one ghost layer")

    @property
    def dim(self) -> int:
        return len(self.n_cells)

    @property
    def ncomp(self) -> int:
        return self.dim + 2

    @property
    def shape_with_ghosts(self) -> tuple:
        return tuple(n + 2 * self.n_ghost for n in self.n_cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def interior(self) -> tuple:
        """Slice tuple selecting interior cells of a ghosted array."""
        g = self.n_ghost
        return tuple(slice(g, g + n) for n in self.n_cells)

    def cell_centers(self, axis: int, with_ghosts: bool = False) -> np.ndarray:
        g = self.n_ghost if with_ghosts else 0
        i = np.arange(-g, self.n_cells[axis] + g)
        return self.origin[axis] + (i + 0.5) * self.spacing[axis]

    def meshgrid(self, with_ghosts: bool = False) -> list:
        """Cell-center coordinate arrays (indexing='ij')."""
        axes = [self.cell_centers(a, with_ghosts) for a in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij"))


@dataclass
class GridField:
    """Conserved data on a grid, energy stored relative to the constant e_off.

    data has shape (*grid.shape_with_ghosts, dim + 2) holding
    (rho, momentum, E - e_off) per cell.  The matching pressure reference is
    p_ref = (gamma - 1) * e_off; a zero offset is the plain formulation.
    """

    grid: Grid
    data: np.ndarray
    e_off: float = 0.0

    def __post_init__(self) -> None:
        expect = self.grid.shape_with_ghosts + (self.grid.ncomp,)
        if self.data.shape != expect:
            raise ValueError(f"data shape {self.data.shape} != {expect}")

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def ncomp(self) -> int:
        return self.grid.ncomp

    def interior(self) -> np.ndarray:
        """View of the interior cells."""
        return self.data[self.grid.interior()]

    def copy(self) -> "GridField":
        return GridField(self.grid, self.data.copy(), self.e_off)

    def p_ref(self, eos: EquationOfState) -> float:
        return (eos.gamma - 1.0) * self.e_off

    @classmethod
    def from_primitive(cls, grid, rho, vel, pp, eos, e_off=0.0, include_ghosts=False):
        """Build a field from primitive arrays (pp = p - p_ref, exact in offsets).

        The arrays cover the interior unless include_ghosts is set; ghost
        cells are zero-initialized otherwise and must be filled via a
        boundary condition before use.
        """
        data = np.zeros(grid.shape_with_ghosts + (grid.ncomp,))
        vel = np.asarray(vel, dtype=float)
        if vel.shape[-1] != grid.dim:
            raise ValueError("velocity component count mismatch")
        block = conserved_from_primitive_arrays(rho, vel, pp, eos.gamma)
        if include_ghosts:
            data[...] = block
        else:
            data[grid.interior()] = block
        return cls(grid, data, float(e_off))


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary kinds per axis and side: sides[axis] = (low, high)."""

    sides: tuple

    def __post_init__(self) -> None:
        sides = tuple((str(lo), str(hi)) for lo, hi in self.sides)
        object.__setattr__(self, "sides", sides)
        for lo, hi in sides:
            for k in (lo, hi):
                if k not in BC_KINDS:
                    raise ValueError(f"unknown boundary kind {k!r}")
            if ("periodic" in (lo, hi)) and lo != hi:
                raise ValueError("periodic boundaries must match on opposing sides")

    @classmethod
    def uniform(cls, dim: int, kind: str) -> "BoundaryCondition":
        return cls(tuple((kind, kind) for _ in range(dim)))

    @classmethod
    def periodic(cls, dim: int) -> "BoundaryCondition":
        return cls.uniform(dim, "periodic")

    @classmethod
    def reflecting(cls, dim: int) -> "BoundaryCondition":
        return cls.uniform(dim, "reflecting")

    @classmethod
    def outflow(cls, dim: int) -> "BoundaryCondition":
        return cls.uniform(dim, "outflow")

    @classmethod
    def fixed(cls, dim: int) -> "BoundaryCondition":
        return cls.uniform(dim, "fixed")


def _axslice(ndim, axis, sl):
    out = [slice(None)] * (ndim + 1)  # trailing component axis
    out[axis] = sl
    return tuple(out)


def fill_ghosts_inplace(data: np.ndarray, grid: Grid, bc: BoundaryCondition) -> None:
    """Fill ghost layers of a ghosted (..., ncomp) array in place."""
    g = grid.n_ghost
    nd = grid.dim
    for axis in range(nd):
        n = grid.n_cells[axis]
        lo, hi = bc.sides[axis]
        if lo == "periodic":
            data[_axslice(nd, axis, slice(0, g))] = data[_axslice(nd, axis, slice(n, n + g))]
            data[_axslice(nd, axis, slice(n + g, n + 2 * g))] = data[
                _axslice(nd, axis, slice(g, 2 * g))
            ]
            continue
        for side, kind in ((0, lo), (1, hi)):
            if kind == "fixed":
                continue
            if kind == "outflow":
                src = g if side == 0 else n + g - 1
                dst = slice(0, g) if side == 0 else slice(n + g, n + 2 * g)
                data[_axslice(nd, axis, dst)] = data[_axslice(nd, axis, slice(src, src + 1))]
                continue
            if kind == "reflecting":
                for j in range(1, g + 1):
                    if side == 0:
                        dst, src = g - j, g + j - 1
                    else:
                        dst, src = n + g + j - 1, n + g - j
                    ghost = data[_axslice(nd, axis, slice(src, src + 1))].copy()
                    ghost[..., 1 + axis] *= -1.0
                    data[_axslice(nd, axis, slice(dst, dst + 1))] = ghost
                continue
            raise ValueError(f"unknown boundary kind {kind!r}")


def fill_ghosts(field: GridField, bc: BoundaryCondition) -> GridField:
    """Return a copy of the field with ghost layers filled."""
    out = field.copy()
    fill_ghosts_inplace(out.data, out.grid, bc)
    return out


def total_conserved(field: GridField) -> np.ndarray:
    """Interior totals of (mass, momentum, energy), fixed summation order.

    The energy component includes the e_off background.
    """
    interior = field.interior().reshape(-1, field.ncomp)
    tot = interior.sum(axis=0) * field.grid.cell_volume
    tot[-1] += field.e_off * interior.shape[0] * field.grid.cell_volume
    return tot
