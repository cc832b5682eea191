"""Benchmark problem setups: vortices, waves, shock tube, hydrostatic column.

Each initializer returns a CaseSetup bundling the field, boundary
conditions, equation of state and any source term.  Initial data are
written directly in offset form (pressure relative to the dominant
constant), so even extreme low-Mach setups are represented exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from allmach.grid import BoundaryCondition, Grid, GridField
from allmach.state import EquationOfState

__all__ = [
    "CaseSetup",
    "gresho_init",
    "sound_wave_init",
    "shock_tube_init",
    "taylor_green_init",
    "hydrostatic_init",
    "build_case",
    "CASES",
]

TGV_RHO0 = 1.178e-3
TGV_U0 = 1.0e4
TGV_P0 = 1.0e6
TGV_K = 1.0e-2


@dataclass
class CaseSetup:
    name: str
    field: GridField
    bc: BoundaryCondition
    eos: EquationOfState
    gravity: tuple | None = None
    meta: dict | None = None


def _grid(n_cells, lo, hi, n_ghost=2):
    n_cells = tuple(n_cells)
    spacing = tuple((h - l) / n for n, l, h in zip(n_cells, lo, hi))
    return Grid(n_cells=n_cells, spacing=spacing, origin=tuple(lo), n_ghost=n_ghost)


def gresho_init(grid: Grid, mach: float, eos: EquationOfState) -> GridField:
    """Stationary rotating vortex on [-0.5, 0.5]^2; ``mach`` sets p_c = 1/(gamma M^2) - 1/2.

    The constant p_c is carried as the pressure reference so the O(1)
    pressure profile stays fully resolved down to extreme Mach numbers.
    """
    if grid.dim != 2:
        raise ValueError("the vortex setup is two-dimensional")
    x, y = grid.meshgrid(with_ghosts=True)
    r = np.sqrt(x * x + y * y)
    vphi = np.where(r < 0.2, 5.0 * r, np.where(r < 0.4, 2.0 - 5.0 * r, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        ex, ey = -y / r, x / r
    ex = np.where(r > 0.0, ex, 0.0)
    ey = np.where(r > 0.0, ey, 0.0)
    vel = np.stack([vphi * ex, vphi * ey], axis=-1)
    inner = 12.5 * r * r
    with np.errstate(invalid="ignore", divide="ignore"):
        middle = 4.0 * np.log(5.0 * r) + 4.0 - 20.0 * r + 12.5 * r * r
    outer = 4.0 * math.log(2.0) - 2.0
    pp = np.where(r < 0.2, inner, np.where(r < 0.4, middle, outer))
    p_c = 1.0 / (eos.gamma * mach * mach) - 0.5
    rho = np.ones_like(r)
    e_off = p_c / (eos.gamma - 1.0)
    return GridField.from_primitive(grid, rho, vel, pp, eos, e_off=e_off, include_ghosts=True)


def sound_wave_init(grid: Grid, mach: float, p0: float = 1.0, rho0: float = 1.0,
                    eos: EquationOfState | None = None) -> GridField:
    """One-dimensional sound wave on [0, 1): amplitude ``mach`` in the velocity.

    The density line uses p0 as its base value, reproducing the reference
    setup verbatim; with p0 = rho0 the distinction is immaterial.
    """
    eos = eos or EquationOfState(1.4)
    if grid.dim != 1:
        raise ValueError("the sound wave setup is one-dimensional")
    x = grid.cell_centers(0, with_ghosts=True)
    c0 = math.sqrt(eos.gamma * p0 / rho0)
    k = 2.0 * math.pi
    cos = np.cos(k * x)
    rho = p0 * (1.0 + mach * cos)
    vel = (mach * c0 * cos)[..., None]
    pp = rho0 * c0 * c0 * mach * cos
    e_off = p0 / (eos.gamma - 1.0)
    return GridField.from_primitive(grid, rho, vel, pp, eos, e_off=e_off, include_ghosts=True)


def shock_tube_init(grid: Grid, eos: EquationOfState | None = None) -> GridField:
    """Transonic shock tube with isentropic initial data on [0, 1].

    Left state (3, 0.9, 3), right state (1, 0.9, 3^(1-gamma)); both sides
    share p / rho^gamma.
    """
    eos = eos or EquationOfState(1.4)
    if grid.dim != 1:
        raise ValueError("the shock tube setup is one-dimensional")
    x = grid.cell_centers(0, with_ghosts=True)
    left = x < 0.5
    rho = np.where(left, 3.0, 1.0)
    vel = np.full_like(x, 0.9)[..., None]
    p = np.where(left, 3.0, 3.0 ** (1.0 - eos.gamma))
    return GridField.from_primitive(grid, rho, vel, p, eos, e_off=0.0, include_ghosts=True)


def taylor_green_init(grid: Grid, mach_scale: float = 1.0,
                      eos: EquationOfState | None = None) -> GridField:
    """Three-dimensional decaying vortex on [0, 2 pi / k)^3 with k = 1e-2.

    mach_scale multiplies the reference velocity u0 = 1e4 to lower the
    Mach number; the pressure field scales along with u0^2.
    """
    eos = eos or EquationOfState(1.4)
    if grid.dim != 3:
        raise ValueError("the decaying-vortex setup is three-dimensional")
    x, y, z = grid.meshgrid(with_ghosts=True)
    k = TGV_K
    u0 = TGV_U0 * mach_scale
    rho = np.full_like(x, TGV_RHO0)
    u = u0 * np.sin(k * x) * np.cos(k * y) * np.cos(k * z)
    v = -u0 * np.cos(k * x) * np.sin(k * y) * np.cos(k * z)
    w = np.zeros_like(x)
    vel = np.stack([u, v, w], axis=-1)
    pp = (u0 * u0 * TGV_RHO0 / 16.0) * (2.0 + np.cos(2.0 * k * z)) * (
        np.cos(2.0 * k * x) + np.cos(2.0 * k * y)
    )
    e_off = TGV_P0 / (eos.gamma - 1.0)
    return GridField.from_primitive(grid, rho, vel, pp, eos, e_off=e_off, include_ghosts=True)


def hydrostatic_init(grid: Grid, g: float = 1.0, temperature: float = 1.0,
                     rho0: float = 1.0, eos: EquationOfState | None = None) -> GridField:
    """Isothermal hydrostatic column rho = rho0 exp(-g x / T), p = rho T, v = 0.

    Ghost cells carry the analytic profile (use the 'fixed' boundary kind)
    so interior dissipation can be studied without boundary artifacts.
    Gravity points toward -x.
    """
    eos = eos or EquationOfState(1.4)
    if grid.dim != 1:
        raise ValueError("the hydrostatic column is one-dimensional")
    x = grid.cell_centers(0, with_ghosts=True)
    rho = rho0 * np.exp(-g * x / temperature)
    p = rho * temperature
    vel = np.zeros_like(x)[..., None]
    return GridField.from_primitive(grid, rho, vel, p, eos, e_off=0.0, include_ghosts=True)


# ---------------------------------------------------------------------------
# registry for the CLI
# ---------------------------------------------------------------------------

def _build_gresho(params):
    gamma = params.pop("gamma", 5.0 / 3.0)
    mach = params.pop("M")
    nx = params.pop("nx", 40)
    ny = params.pop("ny", nx)
    eos = EquationOfState(gamma)
    grid = _grid((nx, ny), (-0.5, -0.5), (0.5, 0.5))
    field = gresho_init(grid, mach, eos)
    return CaseSetup("gresho", field, BoundaryCondition.periodic(2), eos,
                     meta={"M": mach})


def _build_sound_wave(params):
    gamma = params.pop("gamma", 1.4)
    mach = params.pop("M")
    nx = params.pop("nx", 64)
    p0 = params.pop("p0", 1.0)
    rho0 = params.pop("rho0", 1.0)
    eos = EquationOfState(gamma)
    grid = _grid((nx,), (0.0,), (1.0,))
    field = sound_wave_init(grid, mach, p0, rho0, eos)
    return CaseSetup("sound_wave", field, BoundaryCondition.periodic(1), eos,
                     meta={"M": mach, "p0": p0, "rho0": rho0})


def _build_shock_tube(params):
    gamma = params.pop("gamma", 1.4)
    nx = params.pop("nx", 400)
    eos = EquationOfState(gamma)
    grid = _grid((nx,), (0.0,), (1.0,))
    field = shock_tube_init(grid, eos)
    return CaseSetup("shock_tube", field, BoundaryCondition.outflow(1), eos)


def _build_taylor_green(params):
    gamma = params.pop("gamma", 1.4)
    scale = params.pop("mach_scale", 1.0)
    nx = params.pop("nx", 32)
    eos = EquationOfState(gamma)
    length = 2.0 * math.pi / TGV_K
    grid = _grid((nx, nx, nx), (0.0, 0.0, 0.0), (length, length, length))
    field = taylor_green_init(grid, scale, eos)
    return CaseSetup("taylor_green", field, BoundaryCondition.periodic(3), eos,
                     meta={"mach_scale": scale, "u0": TGV_U0 * scale, "k": TGV_K})


def _build_hydrostatic(params):
    gamma = params.pop("gamma", 1.4)
    g = params.pop("g", 1.0)
    temperature = params.pop("T", 1.0)
    rho0 = params.pop("rho0", 1.0)
    nx = params.pop("nx", 64)
    eos = EquationOfState(gamma)
    grid = _grid((nx,), (0.0,), (1.0,))
    field = hydrostatic_init(grid, g, temperature, rho0, eos)
    return CaseSetup("hydrostatic", field, BoundaryCondition.fixed(1), eos,
                     gravity=(-g,), meta={"g": g, "T": temperature})


CASES = {
    "gresho": _build_gresho,
    "sound_wave": _build_sound_wave,
    "shock_tube": _build_shock_tube,
    "taylor_green": _build_taylor_green,
    "hydrostatic": _build_hydrostatic,
}


def build_case(name: str, params: dict) -> CaseSetup:
    """Instantiate a registered case; unknown case parameters are errors."""
    if name not in CASES:
        raise ValueError(f"unknown case {name!r} (have {sorted(CASES)})")
    params = dict(params)
    setup = CASES[name](params)
    if params:
        raise ValueError(f"unknown parameters for case {name!r}: {sorted(params)}")
    return setup
