"""Finite-volume solver for the compressible Euler equations at all Mach numbers.

The package couples a Roe-type flux with low-Mach modifications of the
upwind diffusion matrix (Weiss-Smith and the rotation-type modification),
explicit and implicit time integration, and an analysis toolkit for
stability, conditioning and asymptotic diagnostics.
"""

from allmach.state import (
    ConservedState,
    EquationOfState,
    MachContext,
    NonPositivePressure,
    PrimitiveState,
    cons_to_prim,
    mach_context,
    prim_to_cons,
    sound_speed,
)
from allmach.flux import FluxScheme, interface_flux, physical_flux
from allmach.grid import BoundaryCondition, Grid, GridField, fill_ghosts, total_conserved

__version__ = "0.1.0"
