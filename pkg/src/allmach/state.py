"""State vectors and ideal-gas thermodynamics for compressible flow.

Conserved per-cell unknowns are (rho, rho*v, E); primitives are (rho, v, p).
Field-level helpers store energy and pressure relative to a constant
reference (``E_off``, ``p_ref = (gamma-1) * E_off``) so that the O(M^2)
pressure fluctuations of very low Mach number flows survive in double
precision.  A zero offset recovers the plain formulation bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EquationOfState",
    "ConservedState",
    "PrimitiveState",
    "MachContext",
    "NonPositivePressure",
    "prim_to_cons",
    "cons_to_prim",
    "sound_speed",
    "mach_number",
    "mach_context",
    "mu_delta",
]


class NonPositivePressure(ValueError):
    """A conserved state implies p <= 0 (invalid input or solver divergence)."""


@dataclass(frozen=True)
class EquationOfState:
    """Ideal-gas law E = p/(gamma-1) + rho|v|^2/2."""

    gamma: float = 1.4

    def __post_init__(self) -> None:
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")


def _as_vector(v) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1 or arr.size not in (1, 2, 3):
        raise ValueError("expected a 1-, 2- or 3-component vector")
    return arr


@dataclass(frozen=True)
class ConservedState:
    """Cell value of (mass, momentum, total energy) density."""

    rho: float
    mom: np.ndarray
    E: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mom", _as_vector(self.mom))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "E", float(self.E))

    @property
    def dim(self) -> int:
        return self.mom.size


@dataclass(frozen=True)
class PrimitiveState:
    """Cell value of (density, velocity, pressure)."""

    rho: float
    vel: np.ndarray
    p: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "vel", _as_vector(self.vel))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "p", float(self.p))
        if not (self.rho > 0.0 and self.p > 0.0):
            raise ValueError(f"primitive state needs rho, p > 0 (rho={self.rho}, p={self.p})")

    @property
    def dim(self) -> int:
        return self.vel.size


@dataclass(frozen=True)
class MachContext:
    """Local Mach number with lower cutoff.

    mu = min(1, max(m_loc, m_cut)) and delta = 1/mu - 1 parametrize the
    modified diffusion matrices; delta = 0 for m_loc >= 1 so the scheme
    reverts to the plain Roe flux at sonic and supersonic speeds.
    """

    m_loc: float
    m_cut: float
    mu: float
    delta: float


def prim_to_cons(q: PrimitiveState, eos: EquationOfState) -> ConservedState:
    """Convert primitive (rho, v, p) to conserved (rho, rho v, E)."""
    ke = 0.5 * q.rho * float(np.dot(q.vel, q.vel))
    return ConservedState(q.rho, q.rho * q.vel, q.p / (eos.gamma - 1.0) + ke)


def cons_to_prim(u: ConservedState, eos: EquationOfState) -> PrimitiveState:
    """Convert conserved to primitive variables.

    Raises NonPositivePressure when the implied pressure is <= 0.
    """
    if u.rho <= 0.0:
        raise NonPositivePressure(f"non-positive density {u.rho}")
    vel = u.mom / u.rho
    p = (eos.gamma - 1.0) * (u.E - 0.5 * float(np.dot(u.mom, u.mom)) / u.rho)
    if p <= 0.0:
        raise NonPositivePressure(f"computed pressure {p} <= 0")
    return PrimitiveState(u.rho, vel, p)


def sound_speed(q: PrimitiveState, eos: EquationOfState) -> float:
    """Local speed of sound c = sqrt(gamma p / rho)."""
    return float(np.sqrt(eos.gamma * q.p / q.rho))


def mach_number(q: PrimitiveState, eos: EquationOfState) -> float:
    """Local Mach number |v| / c."""
    return float(np.linalg.norm(q.vel)) / sound_speed(q, eos)


def mu_delta(m_loc, m_cut):
    """mu = min(1, max(m_loc, m_cut)) and delta = 1/mu - 1 (array friendly)."""
    mu = np.minimum(1.0, np.maximum(m_loc, m_cut))
    return mu, 1.0 / mu - 1.0


def mach_context(q: PrimitiveState, eos: EquationOfState, m_cut: float) -> MachContext:
    """Build the cutoff Mach context for a primitive state."""
    if not m_cut > 0.0:
        raise ValueError(f"m_cut must be > 0, got {m_cut}")
    m_loc = mach_number(q, eos)
    mu, delta = mu_delta(m_loc, m_cut)
    return MachContext(m_loc=m_loc, m_cut=m_cut, mu=float(mu), delta=float(delta))


# ---------------------------------------------------------------------------
# Array-level helpers used by the field pipeline.  The energy slot of a field
# array holds e = E - E_off and "pp" denotes the offset pressure p - p_ref
# with p_ref = (gamma - 1) * E_off; both identities are exact.
# ---------------------------------------------------------------------------

def conserved_from_primitive_arrays(rho, vel, pp, gamma):
    """Stack (..., d+2) conserved data from primitive arrays (offset pressure in, offset energy out)."""
    rho = np.asarray(rho, dtype=float)
    vel = np.asarray(vel, dtype=float)
    pp = np.asarray(pp, dtype=float)
    ke = 0.5 * rho * np.sum(vel * vel, axis=-1)
    e = pp / (gamma - 1.0) + ke
    return np.concatenate(
        [rho[..., None], rho[..., None] * vel, e[..., None]], axis=-1
    )


def primitive_from_conserved_arrays(data, dim, gamma):
    """Split (..., d+2) conserved data into (rho, vel, pp) primitive arrays."""
    rho = data[..., 0]
    vel = data[..., 1 : 1 + dim] / rho[..., None]
    ke = 0.5 * rho * np.sum(vel * vel, axis=-1)
    pp = (gamma - 1.0) * (data[..., 1 + dim] - ke)
    return rho, vel, pp


def kinetic_energy_arrays(data, dim):
    """Kinetic energy density |mom|^2 / (2 rho) per cell."""
    mom = data[..., 1 : 1 + dim]
    return 0.5 * np.sum(mom * mom, axis=-1) / data[..., 0]
