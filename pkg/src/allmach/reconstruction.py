"""Interface state reconstruction: piecewise constant and MUSCL-type linear."""

from __future__ import annotations

import numpy as np

from allmach.state import primitive_from_conserved_arrays

__all__ = ["RECON_MODES", "InvalidReconstructedState", "minmod", "reconstruct", "ghost_layers_needed"]

RECON_MODES = ("constant", "linear", "linear_minmod")


class InvalidReconstructedState(ValueError):
    """A reconstructed face state has rho <= 0 or p <= 0."""


def ghost_layers_needed(mode: str) -> int:
    if mode not in RECON_MODES:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    return 1 if mode == "constant" else 2


def minmod(a, b):
    """Minmod slope limiter: smaller-magnitude argument when signs agree, else 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.where((a > 0) & (b > 0), np.minimum(a, b), 0.0)
    out = np.where((a < 0) & (b < 0), np.maximum(a, b), out)
    return float(out) if out.ndim == 0 else out


def _axslice(ndim, axis, sl):
    out = [slice(None)] * ndim
    out[axis] = sl
    return tuple(out)


def reconstruct_values(values: np.ndarray, axis: int, mode: str, n_interior: int, n_ghost: int):
    """Left/right face values along one axis of a ghosted component array.

    values has ghosted extent along ``axis`` (plus arbitrary other axes,
    e.g. a trailing component axis); returns arrays whose ``axis`` extent is
    n_interior + 1, one entry per face including both domain-boundary faces.

    constant:       L_f = u[f-1],                R_f = u[f]
    linear:         central slope (u[i+1] - u[i-1]) / 2, face extrapolation
    linear_minmod:  slope = minmod(u[i] - u[i-1], u[i+1] - u[i])
    """
    g, n = n_ghost, n_interior
    nd = values.ndim
    if mode == "constant":
        left = values[_axslice(nd, axis, slice(g - 1, g + n))]
        right = values[_axslice(nd, axis, slice(g, g + n + 1))]
        return left.copy(), right.copy()
    if g < 2:
        raise ValueError("linear reconstruction needs at least 2 ghost layers")
    # cells g-1 .. g+n contribute slopes
    lo, hi = g - 1, g + n + 1
    um = values[_axslice(nd, axis, slice(lo - 1, hi - 1))]
    u0 = values[_axslice(nd, axis, slice(lo, hi))]
    up = values[_axslice(nd, axis, slice(lo + 1, hi + 1))]
    if mode == "linear":
        slope = 0.5 * (up - um)
    elif mode == "linear_minmod":
        slope = minmod(u0 - um, up - u0)
    else:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    left = u0[_axslice(nd, axis, slice(0, n + 1))] + 0.5 * slope[_axslice(nd, axis, slice(0, n + 1))]
    right = u0[_axslice(nd, axis, slice(1, n + 2))] - 0.5 * slope[_axslice(nd, axis, slice(1, n + 2))]
    return left, right


def reconstruct(field, axis: int, mode: str, basis: str = "primitive", eos=None, fallback: bool = False):
    """Reconstruct (left, right) face states along +axis from a ghosted field.

    Returns two arrays shaped like the interior with ``axis`` extended to
    n+1 faces and a trailing component axis: conserved components for
    basis='conserved', (rho, v, p) with the true pressure for
    basis='primitive' (requires eos).  Ghosts must be filled.  Raises
    InvalidReconstructedState when a primitive face state loses positivity
    unless fallback=True, which reverts those faces to constant values.
    """
    grid = field.grid
    if mode not in RECON_MODES:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    if grid.n_ghost < ghost_layers_needed(mode):
        raise ValueError(f"{mode} reconstruction needs more ghost layers")
    if basis == "conserved":
        sl = [slice(grid.n_ghost, grid.n_ghost + n) for n in grid.n_cells]
        sl[axis] = slice(None)
        data = field.data[tuple(sl) + (slice(None),)]
        return reconstruct_values(data, axis, mode, grid.n_cells[axis], grid.n_ghost)
    if basis != "primitive":
        raise ValueError(f"unknown basis {basis!r}")
    if eos is None:
        raise ValueError("primitive-basis reconstruction requires an eos")
    return reconstruct_primitive(field, axis, mode, eos, offset=False, fallback=fallback)


def reconstruct_primitive(field, axis: int, mode: str, eos, offset: bool = False, fallback: bool = False):
    """Primitive-variable reconstruction of (rho, v, p) face states.

    With offset=True the pressure slot holds p - p_ref (the field's native
    representation, exact for reconstruction since slopes are unaffected by
    constants); otherwise the true pressure.  fallback=True replaces faces
    that lose positivity with their constant-reconstruction values instead
    of raising.
    """
    grid = field.grid
    dim = grid.dim
    if grid.n_ghost < ghost_layers_needed(mode):
        raise ValueError(f"{mode} reconstruction needs more ghost layers")
    rho, vel, pp = primitive_from_conserved_arrays(field.data, dim, eos.gamma)
    prim = np.concatenate([rho[..., None], vel, pp[..., None]], axis=-1)
    if not offset:
        prim[..., 1 + dim] += field.p_ref(eos)

    sl = [slice(grid.n_ghost, grid.n_ghost + n) for n in grid.n_cells]
    sl[axis] = slice(None)
    prim = prim[tuple(sl) + (slice(None),)]

    left, right = reconstruct_values(prim, axis, mode, grid.n_cells[axis], grid.n_ghost)
    if mode == "constant":
        return left, right

    p_floor = -field.p_ref(eos) if offset else 0.0
    bad = (
        (left[..., 0] <= 0.0)
        | (right[..., 0] <= 0.0)
        | (left[..., 1 + dim] <= p_floor)
        | (right[..., 1 + dim] <= p_floor)
    )
    if np.any(bad):
        if not fallback:
            raise InvalidReconstructedState(
                f"{int(np.count_nonzero(bad))} face state(s) lost positivity"
            )
        cl, cr = reconstruct_values(prim, axis, "constant", grid.n_cells[axis], grid.n_ghost)
        left[bad] = cl[bad]
        right[bad] = cr[bad]
    return left, right
