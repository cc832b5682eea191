"""Semi-discrete residual, explicit/implicit steppers, Newton-Krylov machinery.

The residual convention is r = -dU/dt: summed face-flux differences per
unit length minus sources.  Energy fluxes are evaluated with the field's
constant background (E_off + p_ref) factored out of the face differences,
which keeps the residual exact in offset arithmetic at arbitrarily low
Mach numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from allmach.flux import FluxScheme, _diffusion_cons_batch
from allmach.grid import BoundaryCondition, Grid, GridField, fill_ghosts_inplace
from allmach.reconstruction import ghost_layers_needed, reconstruct_values
from allmach.state import (
    EquationOfState,
    NonPositivePressure,
    conserved_from_primitive_arrays,
    primitive_from_conserved_arrays,
)

__all__ = [
    "TimeStepPolicy",
    "NewtonConfig",
    "NewtonStats",
    "StateBlowup",
    "NewtonDivergence",
    "LinearSolveFailure",
    "compute_dt",
    "spatial_residual",
    "explicit_step",
    "implicit_step",
    "assemble_jacobian",
    "krylov_solve",
    "block_diagonal_preconditioner",
    "SpectralPreconditioner",
    "ImplicitContext",
]

EXPLICIT_STEPPERS = ("forward_euler", "ssprk2")
IMPLICIT_STEPPERS = ("backward_euler", "esdirk23")

#: advective CFL velocity floor relative to the local sound speed
V_FLOOR_REL = 1e-3


class StateBlowup(RuntimeError):
    """A time step produced an invalid state (non-finite or positivity loss)."""


class NewtonDivergence(RuntimeError):
    """Newton iteration failed to reach its tolerance."""


class LinearSolveFailure(RuntimeError):
    """Inner Krylov solver did not converge."""


@dataclass(frozen=True)
class TimeStepPolicy:
    """Time-step selection: acoustic or advective CFL, or a fixed step.

    mach_scaled multiplies the step by the largest local Mach number, the
    stricter criterion required by the modified Roe flux under explicit
    integration.
    """

    kind: str = "advective"
    cfl: float = 0.8
    dt_fixed: float | None = None
    mach_scaled: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("acoustic", "advective", "fixed"):
            raise ValueError(f"unknown time step policy {self.kind!r}")
        if not self.cfl > 0.0:
            raise ValueError("cfl must be positive")
        if self.kind == "fixed" and not (self.dt_fixed and self.dt_fixed > 0.0):
            raise ValueError("fixed policy needs dt_fixed > 0")


@dataclass(frozen=True)
class NewtonConfig:
    """Inexact-Newton settings; tol_abs is relative to the state norm."""

    tol_rel: float = 1e-8
    tol_abs: float = 1e-12
    max_iters: int = 20
    linear_tol: float = 1e-4
    jacobian_mode: str = "matrix_free"

    def __post_init__(self) -> None:
        if min(self.tol_rel, self.tol_abs, self.linear_tol) <= 0.0:
            raise ValueError("Newton tolerances must be positive")
        if self.jacobian_mode not in ("matrix_free", "colored_fd", "dense_fd"):
            raise ValueError(f"unknown jacobian mode {self.jacobian_mode!r}")


@dataclass
class NewtonStats:
    newton_iters: int = 0
    linear_iters: int = 0
    solves: int = 0
    max_iters_per_solve: int = 0

    def merge(self, other: "NewtonStats") -> None:
        self.newton_iters += other.newton_iters
        self.linear_iters += other.linear_iters
        self.solves += other.solves
        self.max_iters_per_solve = max(self.max_iters_per_solve, other.max_iters_per_solve)


# ---------------------------------------------------------------------------
# residual assembly
# ---------------------------------------------------------------------------

def _interior_prim_sweep(prim, grid, axis):
    """Crop the ghosted primitive array to the interior except along axis."""
    sl = [slice(grid.n_ghost, grid.n_ghost + n) for n in grid.n_cells]
    sl[axis] = slice(None)
    return prim[tuple(sl) + (slice(None),)]


def _face_flux(wl, wr, axis, dim, scheme, eos, p_ref, dmat=None):
    """Face fluxes from reconstructed primitives (offset pressure).

    Returns (flux, v_face, dmat): flux covers all components using offset
    energy and pressure; the omitted constant background contributes
    C * v_face to the energy flux and is differenced exactly by the caller.
    A precomputed diffusion-matrix batch may be passed in (frozen-Jacobian
    probes); otherwise it is evaluated at the Roe averages and returned.
    """
    g = eos.gamma
    rho_l, vel_l, pp_l = wl[..., 0], wl[..., 1 : 1 + dim], wl[..., 1 + dim]
    rho_r, vel_r, pp_r = wr[..., 0], wr[..., 1 : 1 + dim], wr[..., 1 + dim]
    vn_l, vn_r = vel_l[..., axis], vel_r[..., axis]
    e_l = pp_l / (g - 1.0) + 0.5 * rho_l * np.sum(vel_l * vel_l, axis=-1)
    e_r = pp_r / (g - 1.0) + 0.5 * rho_r * np.sum(vel_r * vel_r, axis=-1)

    flux = np.empty(wl.shape)
    flux[..., 0] = 0.5 * (rho_l * vn_l + rho_r * vn_r)
    for j in range(dim):
        flux[..., 1 + j] = 0.5 * (rho_l * vn_l * vel_l[..., j] + rho_r * vn_r * vel_r[..., j])
    flux[..., 1 + axis] += 0.5 * (pp_l + pp_r)
    flux[..., 1 + dim] = 0.5 * (vn_l * (e_l + pp_l) + vn_r * (e_r + pp_r))
    v_face = 0.5 * (vn_l + vn_r)
    if scheme.kind == "central":
        return flux, v_face, None

    if dmat is None:
        # Roe average in offset arithmetic; the background enters c^2 only
        s_l, s_r = np.sqrt(rho_l), np.sqrt(rho_r)
        wgt = s_l / (s_l + s_r)
        rho_h = s_l * s_r
        vel_h = wgt[..., None] * vel_l + (1.0 - wgt)[..., None] * vel_r
        h_l = (e_l + pp_l) / rho_l
        h_r = (e_r + pp_r) / rho_r
        h_h = wgt * h_l + (1.0 - wgt) * h_r
        c2 = (g - 1.0) * (h_h - 0.5 * np.sum(vel_h * vel_h, axis=-1)) + g * p_ref / rho_h
        if not np.all(c2 > 0.0):
            raise NonPositivePressure("Roe average lost positivity at a face")
        c_h = np.sqrt(c2)
        m_loc = np.sqrt(np.sum(vel_h * vel_h, axis=-1)) / c_h
        dmat = _diffusion_cons_batch(
            scheme.preconditioner, rho_h, vel_h, c_h, m_loc, scheme.m_cut,
            scheme.entropy_fix, axis, g,
        )
    du = conserved_from_primitive_arrays(rho_r, vel_r, pp_r, g) - conserved_from_primitive_arrays(
        rho_l, vel_l, pp_l, g
    )
    flux -= 0.5 * np.einsum("...ij,...j->...i", dmat, du)
    return flux, v_face, dmat


def _residual_filled(data, grid, scheme, recon_mode, eos, e_off, gravity,
                     fallback=True, capture=None):
    """Residual r = -dU/dt on the interior, ghosts already filled.

    capture, when given, is a per-axis dict: empty slots are filled with
    (left state, right state, diffusion matrices) evaluated here; occupied
    slots have their diffusion matrices reused (frozen-coefficient solves).
    """
    g = eos.gamma
    dim = grid.dim
    p_ref = (g - 1.0) * e_off
    background = e_off + p_ref
    rho, vel, pp = primitive_from_conserved_arrays(data, dim, g)
    prim = np.concatenate([rho[..., None], vel, pp[..., None]], axis=-1)
    r = np.zeros(tuple(grid.n_cells) + (grid.ncomp,))
    divv = np.zeros(tuple(grid.n_cells)) if background != 0.0 else None
    for axis in range(dim):
        sweep = _interior_prim_sweep(prim, grid, axis)
        wl, wr = reconstruct_values(sweep, axis, recon_mode, grid.n_cells[axis], grid.n_ghost)
        if recon_mode != "constant":
            bad = (
                (wl[..., 0] <= 0.0)
                | (wr[..., 0] <= 0.0)
                | (wl[..., 1 + dim] <= -p_ref)
                | (wr[..., 1 + dim] <= -p_ref)
            )
            if np.any(bad):
                if not fallback:
                    raise NonPositivePressure("reconstructed face state lost positivity")
                cl, cr = reconstruct_values(sweep, axis, "constant", grid.n_cells[axis], grid.n_ghost)
                wl[bad] = cl[bad]
                wr[bad] = cr[bad]
        dmat = capture[axis][2] if capture is not None and axis in capture else None
        flux, v_face, dmat = _face_flux(wl, wr, axis, dim, scheme, eos, p_ref, dmat=dmat)
        if capture is not None and axis not in capture:
            capture[axis] = (wl, wr, dmat)
        inv_dx = 1.0 / grid.spacing[axis]
        r += np.diff(flux, axis=axis) * inv_dx
        if divv is not None:
            # accumulate the face-velocity divergence separately so the huge
            # constant background multiplies one already-cancelled sum
            divv += np.diff(v_face, axis=axis) * inv_dx
    if divv is not None:
        r[..., 1 + dim] += background * divv
    if gravity is not None:
        gvec = np.asarray(gravity, dtype=float)
        interior = data[grid.interior()]
        rho_i = interior[..., 0]
        mom_i = interior[..., 1 : 1 + dim]
        r[..., 1 : 1 + dim] -= rho_i[..., None] * gvec
        r[..., 1 + dim] -= np.sum(mom_i * gvec, axis=-1)
    return r


def spatial_residual(field: GridField, scheme: FluxScheme, recon_mode: str,
                     bc: BoundaryCondition, eos: EquationOfState, gravity=None,
                     fallback: bool = True) -> np.ndarray:
    """Semi-discrete residual r = -dU/dt over the interior cells."""
    if field.grid.n_ghost < ghost_layers_needed(recon_mode):
        raise ValueError(f"{recon_mode} reconstruction needs more ghost layers")
    buf = field.data.copy()
    fill_ghosts_inplace(buf, field.grid, bc)
    return _residual_filled(buf, field.grid, scheme, recon_mode, eos, field.e_off, gravity, fallback)


class FrozenResidualLinearization:
    """Exact directional derivative of the residual with frozen dissipation.

    Linearizes the semi-discrete residual about a base state: reconstruction
    and central fluxes are differentiated analytically while the diffusion
    matrices stay frozen at the base Roe averages (their state derivative is
    the one term conventionally dropped from Roe-type Jacobians).  The
    resulting operator is exactly linear and deterministic, which keeps
    Krylov solves free of finite-difference noise at any Mach number.

    The pressure entry of the momentum flux and the constant-background
    energy term are differenced in factored form so that constant
    perturbation components cancel exactly.
    """

    def __init__(self, ctx, base_data: np.ndarray, capture: dict):
        self.ctx = ctx
        grid = ctx.grid
        g = ctx.eos.gamma
        dim = grid.dim
        rho, vel, pp = primitive_from_conserved_arrays(base_data, dim, g)
        self.base_prim = np.concatenate([rho[..., None], vel, pp[..., None]], axis=-1)
        self.faces = capture  # per axis: (wl, wr, dmat or None, bad mask or None)
        self.background = ctx.e_off * g  # e_off + (gamma-1) e_off

    def _delta_prim(self, ddata):
        grid = self.ctx.grid
        dim = grid.dim
        g = self.ctx.eos.gamma
        rho = self.base_prim[..., 0]
        vel = self.base_prim[..., 1 : 1 + dim]
        drho = ddata[..., 0]
        dmom = ddata[..., 1 : 1 + dim]
        de_cons = ddata[..., 1 + dim]
        dvel = (dmom - vel * drho[..., None]) / rho[..., None]
        dpp = (g - 1.0) * (
            de_cons - np.sum(vel * dmom, axis=-1) + 0.5 * np.sum(vel * vel, axis=-1) * drho
        )
        return np.concatenate([drho[..., None], dvel, dpp[..., None]], axis=-1)

    @staticmethod
    def _du_from_dw(w, dw, dim, g):
        """Conserved-variable perturbation from primitive one at base state w."""
        rho = w[..., 0]
        vel = w[..., 1 : 1 + dim]
        drho = dw[..., 0]
        dvel = dw[..., 1 : 1 + dim]
        dpp = dw[..., 1 + dim]
        du = np.empty_like(dw)
        du[..., 0] = drho
        du[..., 1 : 1 + dim] = vel * drho[..., None] + rho[..., None] * dvel
        du[..., 1 + dim] = dpp / (g - 1.0) + 0.5 * np.sum(vel * vel, axis=-1) * drho \
            + rho * np.sum(vel * dvel, axis=-1)
        return du

    def apply(self, w_flat: np.ndarray) -> np.ndarray:
        """L w: linearized residual response to an interior perturbation."""
        ctx = self.ctx
        grid = ctx.grid
        dim = grid.dim
        g = ctx.eos.gamma
        recon = "constant" if ctx.recon_mode == "linear_minmod" else ctx.recon_mode
        ddata = np.zeros(grid.shape_with_ghosts + (grid.ncomp,))
        ddata[grid.interior()] = w_flat.reshape(tuple(grid.n_cells) + (grid.ncomp,))
        fill_ghosts_inplace(ddata, grid, ctx.bc)
        dprim = self._delta_prim(ddata)
        out = np.zeros(tuple(grid.n_cells) + (grid.ncomp,))
        ddivv = np.zeros(tuple(grid.n_cells)) if self.background != 0.0 else None
        for axis in range(dim):
            wl, wr, dmat = self.faces[axis]
            sweep = _interior_prim_sweep(dprim, grid, axis)
            dl, dr = reconstruct_values(sweep, axis, recon, grid.n_cells[axis], grid.n_ghost)
            inv_dx = 1.0 / grid.spacing[axis]

            dflux = np.zeros(dl.shape)
            dp_face = np.zeros(dl.shape[:-1])
            dv_face = np.zeros(dl.shape[:-1])
            for w_b, d_b, sgn in ((wl, dl, 0.5), (wr, dr, 0.5)):
                rho_b = w_b[..., 0]
                vel_b = w_b[..., 1 : 1 + dim]
                pp_b = w_b[..., 1 + dim]
                vn_b = vel_b[..., axis]
                drho = d_b[..., 0]
                dvel = d_b[..., 1 : 1 + dim]
                dpp = d_b[..., 1 + dim]
                dvn = dvel[..., axis]
                e_b = pp_b / (g - 1.0) + 0.5 * rho_b * np.sum(vel_b * vel_b, axis=-1)
                de = dpp / (g - 1.0) + 0.5 * np.sum(vel_b * vel_b, axis=-1) * drho \
                    + rho_b * np.sum(vel_b * dvel, axis=-1)
                dflux[..., 0] += sgn * (vn_b * drho + rho_b * dvn)
                for j in range(dim):
                    dflux[..., 1 + j] += sgn * (
                        vn_b * vel_b[..., j] * drho
                        + rho_b * vel_b[..., j] * dvn
                        + rho_b * vn_b * dvel[..., j]
                    )
                dflux[..., 1 + dim] += sgn * (dvn * (e_b + pp_b) + vn_b * (de + dpp))
                dp_face += sgn * dpp
                dv_face += sgn * dvn
            if dmat is not None:
                ddu = self._du_from_dw(wr, dr, dim, g) - self._du_from_dw(wl, dl, dim, g)
                dflux -= 0.5 * np.einsum("...ij,...j->...i", dmat, ddu)
            out += np.diff(dflux, axis=axis) * inv_dx
            # momentum pressure entry differenced on its own: constant dpp
            # components then cancel bit-exactly
            out[..., 1 + axis] += np.diff(dp_face, axis=axis) * inv_dx
            if ddivv is not None:
                ddivv += np.diff(dv_face, axis=axis) * inv_dx
        if ddivv is not None:
            out[..., 1 + dim] += self.background * ddivv
        if ctx.gravity is not None:
            gvec = np.asarray(ctx.gravity, dtype=float)
            dint = ddata[grid.interior()]
            out[..., 1 : 1 + dim] -= dint[..., 0, None] * gvec
            out[..., 1 + dim] -= np.sum(dint[..., 1 : 1 + dim] * gvec, axis=-1)
        return out.ravel()


# ---------------------------------------------------------------------------
# time-step criteria
# ---------------------------------------------------------------------------

def compute_dt(field: GridField, policy: TimeStepPolicy, eos: EquationOfState) -> float:
    """Time step per the policy: acoustic/advective CFL or fixed."""
    if policy.kind == "fixed":
        dt = policy.dt_fixed
        if policy.mach_scaled:
            dt *= _max_mach(field, eos)
        return dt
    rho, vel, pp = primitive_from_conserved_arrays(field.interior(), field.dim, eos.gamma)
    p = pp + field.p_ref(eos)
    if not (np.all(rho > 0.0) and np.all(p > 0.0)):
        raise StateBlowup("invalid state in compute_dt")
    c = np.sqrt(eos.gamma * p / rho)
    speed = np.sqrt(np.sum(vel * vel, axis=-1))
    if policy.kind == "acoustic":
        wave = float(np.max(speed + c))
    else:
        # flow-crossing time; the sound-speed floor only guards fully static
        # fields, otherwise it would clamp every low-Mach flow to a scaled
        # acoustic step
        wave = float(np.max(speed))
        if wave == 0.0:
            wave = V_FLOOR_REL * float(np.max(c))
    dt = policy.cfl * min(field.grid.spacing) / wave
    if policy.mach_scaled:
        dt *= float(np.max(speed / c))
    return dt


def _max_mach(field: GridField, eos: EquationOfState) -> float:
    rho, vel, pp = primitive_from_conserved_arrays(field.interior(), field.dim, eos.gamma)
    c = np.sqrt(eos.gamma * (pp + field.p_ref(eos)) / rho)
    return float(np.max(np.sqrt(np.sum(vel * vel, axis=-1)) / c))


# ---------------------------------------------------------------------------
# explicit steppers
# ---------------------------------------------------------------------------

def _with_interior(field: GridField, interior: np.ndarray) -> GridField:
    out = field.copy()
    out.data[field.grid.interior()] = interior
    return out


def _check_valid(interior: np.ndarray, dim: int, eos: EquationOfState, p_ref: float) -> None:
    if not np.all(np.isfinite(interior)):
        raise StateBlowup("non-finite state")
    rho, _, pp = primitive_from_conserved_arrays(interior, dim, eos.gamma)
    if not (np.all(rho > 0.0) and np.all(pp + p_ref > 0.0)):
        raise StateBlowup("positivity lost")


def explicit_step(field: GridField, dt: float, stepper: str, scheme: FluxScheme,
                  recon_mode: str, bc: BoundaryCondition, eos: EquationOfState,
                  gravity=None) -> GridField:
    """One explicit step (forward Euler or two-stage SSP Runge-Kutta)."""
    if stepper not in EXPLICIT_STEPPERS:
        raise ValueError(f"unknown explicit stepper {stepper!r}")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    u0 = field.interior().copy()
    r0 = spatial_residual(field, scheme, recon_mode, bc, eos, gravity)
    if stepper == "forward_euler":
        new = u0 - dt * r0
    else:  # ssprk2
        u1 = u0 - dt * r0
        f1 = _with_interior(field, u1)
        r1 = spatial_residual(f1, scheme, recon_mode, bc, eos, gravity)
        new = 0.5 * (u0 + u1 - dt * r1)
    _check_valid(new, field.dim, eos, field.p_ref(eos))
    return _with_interior(field, new)


# ---------------------------------------------------------------------------
# linear algebra: Jacobians, Krylov solver, preconditioners
# ---------------------------------------------------------------------------

def _fd_eps(u, scales, j):
    comp_scale = scales[j % scales.size]
    return math.sqrt(np.finfo(float).eps) * (abs(u[j]) + comp_scale)


def assemble_jacobian(fun, u0: np.ndarray, grid: Grid, stencil_radius: int,
                      mode: str = "colored_fd", periodic_axes=None,
                      comp_scale=None) -> np.ndarray | sp.csr_matrix:
    """Finite-difference Jacobian of fun(u) with u ordered (cells..., comp).

    colored_fd perturbs one unknown per stencil-conflict color
    simultaneously and attributes differences within the cross stencil;
    dense_fd perturbs every unknown (small grids only).  comp_scale
    overrides the per-component magnitudes setting the difference steps
    (the energy component should include any constant background so its
    probes rise above the evaluation noise of the large-coefficient rows).
    """
    ncomp = grid.ncomp
    n = u0.size
    f0 = fun(u0)
    if comp_scale is None:
        comp_scales = np.abs(u0.reshape(-1, ncomp)).max(axis=0) + 1e-30
    else:
        comp_scales = np.asarray(comp_scale, dtype=float)
    if mode == "dense_fd":
        jac = np.empty((n, n))
        for j in range(n):
            eps = _fd_eps(u0, comp_scales, j)
            up = u0.copy()
            up[j] += eps
            jac[:, j] = (fun(up) - f0) / eps
        return jac
    if mode != "colored_fd":
        raise ValueError(f"unknown jacobian mode {mode!r}")

    dims = grid.dim
    ncells = grid.n_cells
    if periodic_axes is None:
        periodic_axes = (False,) * dims
    base = 2 * stencil_radius + 1
    strides = []
    for a in range(dims):
        s = base
        if periodic_axes[a] and ncells[a] % s != 0:
            s = next((k for k in range(base, ncells[a] + 1) if ncells[a] % k == 0), ncells[a])
        strides.append(s)

    idx = np.indices(ncells).reshape(dims, -1)  # (dims, ncell)
    cell_color = np.zeros(idx.shape[1], dtype=int)
    mult = 1
    for a in range(dims):
        cell_color += (idx[a] % strides[a]) * mult
        mult *= strides[a]
    ncell_colors = mult

    offsets = [np.zeros(dims, dtype=int)]
    for a in range(dims):
        for m in range(1, stencil_radius + 1):
            for sgn in (-1, 1):
                o = np.zeros(dims, dtype=int)
                o[a] = sgn * m
                offsets.append(o)

    rows, cols, vals = [], [], []
    flat_weights = np.array([int(np.prod(ncells[a + 1 :])) for a in range(dims)])
    sqrt_eps = math.sqrt(np.finfo(float).eps)
    for cc in range(ncell_colors):
        cell_sel = np.nonzero(cell_color == cc)[0]
        if cell_sel.size == 0:
            continue
        cell_multi = idx[:, cell_sel]  # (dims, k)
        for comp in range(ncomp):
            col_idx = cell_sel * ncomp + comp
            eps = sqrt_eps * (np.abs(u0[col_idx]) + comp_scales[comp])
            up = u0.copy()
            up[col_idx] += eps
            diff = fun(up) - f0
            for off in offsets:
                tgt = cell_multi + off[:, None]
                if any(periodic_axes):
                    keep = np.ones(tgt.shape[1], dtype=bool)
                    for a in range(dims):
                        if periodic_axes[a]:
                            tgt[a] %= ncells[a]
                        else:
                            keep &= (tgt[a] >= 0) & (tgt[a] < ncells[a])
                else:
                    keep = np.all((tgt >= 0) & (tgt < np.array(ncells)[:, None]), axis=0)
                tgt_k = tgt[:, keep]
                if tgt_k.shape[1] == 0:
                    continue
                tgt_flat = (flat_weights[:, None] * tgt_k).sum(axis=0)
                row_block = tgt_flat[:, None] * ncomp + np.arange(ncomp)[None, :]
                col_block = np.broadcast_to(col_idx[keep, None], row_block.shape)
                val_block = diff[row_block] / eps[keep, None]
                rows.append(row_block.ravel())
                cols.append(col_block.ravel())
                vals.append(val_block.ravel())
    jac = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return jac


def block_diagonal_preconditioner(a, block_size: int) -> spla.LinearOperator:
    """Inverse of the per-cell diagonal blocks of a sparse/dense matrix."""
    n = a.shape[0]
    nblocks = n // block_size
    blocks = np.zeros((nblocks, block_size, block_size))
    if sp.issparse(a):
        # element (b*bs+i, b*bs+j) sits on matrix diagonal k = j - i at row b*bs+i
        for k in range(-block_size + 1, block_size):
            diag = a.diagonal(k)
            for i in range(block_size):
                j = i + k
                if 0 <= j < block_size:
                    rows = np.arange(nblocks) * block_size + i
                    blocks[:, i, j] = diag[np.minimum(rows, rows + k)]
    else:
        a = np.asarray(a)
        for b in range(nblocks):
            blocks[b] = a[b * block_size : (b + 1) * block_size, b * block_size : (b + 1) * block_size]
    inv = np.linalg.inv(blocks)

    def apply(x):
        return np.einsum("bij,bj->bi", inv, x.reshape(nblocks, block_size)).ravel()

    return spla.LinearOperator((n, n), matvec=apply)


def krylov_solve(a, b: np.ndarray, tol: float, atol: float = 0.0, M=None,
                 restart: int = 40, maxiter: int = 400, block_size: int | None = None,
                 strict: bool = True):
    """Restarted GMRES solve of a x = b to max(tol * |b|, atol) residual.

    For assembled matrices without an explicit preconditioner a simple
    block-diagonal (per-cell) preconditioner is built when block_size is
    given.  Returns (x, iterations); raises LinearSolveFailure when the
    iteration cap is reached.  With strict=False a stalled iteration that
    still reduced the residual returns its best iterate (inexact-Newton
    callers tolerate partial solves near the matvec noise floor).
    """
    if not np.any(b):
        return np.zeros_like(b), 0
    if M is None and block_size is not None and not isinstance(a, spla.LinearOperator):
        M = block_diagonal_preconditioner(a, block_size)
    count = {"n": 0}

    def cb(_):
        count["n"] += 1

    x, info = spla.gmres(a, b, rtol=tol, atol=atol, restart=restart,
                         maxiter=max(1, maxiter // restart), M=M,
                         callback=cb, callback_type="pr_norm")
    if info != 0:
        if not strict:
            achieved = float(np.linalg.norm(b - a @ x)) if not isinstance(a, spla.LinearOperator) \
                else float(np.linalg.norm(b - a.matvec(x)))
            if achieved <= 0.99 * float(np.linalg.norm(b)):
                return x, count["n"]
        raise LinearSolveFailure(f"GMRES did not converge (info={info})")
    return x, count["n"]


class SpectralPreconditioner:
    """Constant-coefficient implicit-operator inverse on periodic grids.

    Linearizing the scheme about a spatially constant reference state turns
    I + dt_stage * dr/dU into a block-circulant operator, diagonal in
    Fourier space with per-mode blocks
    I + nu_a [A_a i sin(beta_a) + D_a (1 - cos(beta_a))] summed over axes.
    Applying the exact inverse of that operator captures the stiff acoustic
    coupling at any Mach number, so it serves as the GMRES preconditioner
    for matrix-free implicit stepping.
    """

    def __init__(self, grid: Grid, scheme: FluxScheme, eos: EquationOfState,
                 rho_ref: float, p_ref_total: float, m_ref: float):
        from allmach.flux import flux_jacobian
        from allmach.state import PrimitiveState

        self.grid = grid
        self.ncomp = grid.ncomp
        q = PrimitiveState(rho_ref, np.zeros(grid.dim), p_ref_total)
        c = math.sqrt(eos.gamma * p_ref_total / rho_ref)
        self.a_mats = [flux_jacobian(q, ax, eos, "conserved") for ax in range(grid.dim)]
        if scheme.kind == "central":
            self.d_mats = [np.zeros((self.ncomp, self.ncomp)) for _ in range(grid.dim)]
        else:
            self.d_mats = [
                _diffusion_cons_batch(
                    scheme.preconditioner, np.asarray([rho_ref]),
                    np.zeros((1, grid.dim)), np.asarray([c]),
                    np.asarray([max(m_ref, scheme.m_cut)]), scheme.m_cut,
                    scheme.entropy_fix, ax, eos.gamma,
                )[0]
                for ax in range(grid.dim)
            ]
        self._cache = {}

    def _inverse_blocks(self, dt_stage: float) -> np.ndarray:
        key = float(dt_stage)
        if key not in self._cache:
            nc = self.ncomp
            shape = tuple(self.grid.n_cells)
            op = np.zeros(shape + (nc, nc), dtype=complex)
            op[...] = np.eye(nc)
            for ax, n in enumerate(shape):
                beta = 2.0 * np.pi * np.fft.fftfreq(n)
                sin_b = np.sin(beta)
                cos1 = 1.0 - np.cos(beta)
                bshape = [1] * self.grid.dim
                bshape[ax] = n
                sin_b = sin_b.reshape(bshape)
                cos1 = cos1.reshape(bshape)
                nu = dt_stage / self.grid.spacing[ax]
                op += nu * (
                    1j * sin_b[..., None, None] * self.a_mats[ax]
                    + cos1[..., None, None] * self.d_mats[ax]
                )
            self._cache[key] = np.linalg.inv(op)
        return self._cache[key]

    def as_linear_operator(self, dt_stage: float) -> spla.LinearOperator:
        inv = self._inverse_blocks(dt_stage)
        shape = tuple(self.grid.n_cells)
        nc = self.ncomp
        n = int(np.prod(shape)) * nc
        axes = tuple(range(self.grid.dim))

        def apply(x):
            xh = np.fft.fftn(x.reshape(shape + (nc,)), axes=axes)
            yh = np.einsum("...ij,...j->...i", inv, xh)
            return np.fft.ifftn(yh, axes=axes).real.ravel()

        return spla.LinearOperator((n, n), matvec=apply)


# ---------------------------------------------------------------------------
# implicit steppers
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
#: stiffly accurate L-stable tableaux; rows are (a_ij...), last row doubles as b
_TABLEAUX = {
    "backward_euler": np.array([[1.0]]),
    "esdirk23": np.array([
        [0.0, 0.0, 0.0],
        [1.0 - _SQRT2 / 2.0, 1.0 - _SQRT2 / 2.0, 0.0],
        [_SQRT2 / 4.0, _SQRT2 / 4.0, 1.0 - _SQRT2 / 2.0],
    ]),
}


class ImplicitContext:
    """Per-run caches for implicit stepping (spectral preconditioner, buffers)."""

    def __init__(self, field: GridField, scheme: FluxScheme, recon_mode: str,
                 bc: BoundaryCondition, eos: EquationOfState, gravity=None):
        self.scheme = scheme
        self.recon_mode = recon_mode
        self.bc = bc
        self.eos = eos
        self.gravity = gravity
        self.grid = field.grid
        self.e_off = field.e_off
        self.all_periodic = all(lo == "periodic" for lo, _ in bc.sides)
        self.spectral = None
        # residual row scales: the energy equation carries the huge constant
        # background through C div(v), so Newton and GMRES norms weight it by
        # its natural magnitude; mass and momentum rows stay O(1)
        background = eos.gamma * field.e_off
        e_scale = max(1.0, abs(background) + float(np.mean(np.abs(field.interior()[..., -1]))))
        self.row_scale = np.ones(self.grid.ncomp)
        self.row_scale[-1] = e_scale

    def residual_flat(self, buf: np.ndarray, u_flat: np.ndarray, capture=None) -> np.ndarray:
        grid = self.grid
        buf[grid.interior()] = u_flat.reshape(tuple(grid.n_cells) + (grid.ncomp,))
        fill_ghosts_inplace(buf, grid, self.bc)
        r = _residual_filled(buf, grid, self.scheme, self.recon_mode, self.eos,
                             self.e_off, self.gravity, capture=capture)
        return r.ravel()

    def make_buffer(self, field: GridField) -> np.ndarray:
        return field.data.copy()

    def spectral_precond(self, field: GridField) -> SpectralPreconditioner | None:
        if not self.all_periodic:
            return None
        if self.spectral is None:
            g = self.eos.gamma
            rho, vel, pp = primitive_from_conserved_arrays(field.interior(), field.dim, g)
            rho_ref = float(np.mean(rho))
            p_tot = float(np.mean(pp)) + field.p_ref(self.eos)
            c = np.sqrt(g * (pp + field.p_ref(self.eos)) / rho)
            m_ref = float(np.max(np.sqrt(np.sum(vel * vel, axis=-1)) / c))
            self.spectral = SpectralPreconditioner(self.grid, self.scheme, self.eos,
                                                   rho_ref, p_tot, m_ref)
        return self.spectral


def _newton_stage(ctx: ImplicitContext, field: GridField, rhs: np.ndarray,
                  dt_stage: float, guess: np.ndarray, ncfg: NewtonConfig,
                  stats: NewtonStats):
    """Solve X + dt_stage * r(X) = rhs by inexact Newton; returns (X, r(X))."""
    buf = ctx.make_buffer(field)
    u = guess.copy()
    ncomp = ctx.grid.ncomp
    rs = np.broadcast_to(ctx.row_scale, (u.size // ncomp, ncomp)).ravel()

    def g_of(uvec):
        r = ctx.residual_flat(buf, uvec)
        return uvec + dt_stage * r - rhs, r

    def scaled_norm(vec):
        return float(np.linalg.norm(vec / rs))

    g, r_u = g_of(u)
    norm0 = scaled_norm(g)
    tol = ncfg.tol_abs * float(np.linalg.norm(u)) + ncfg.tol_rel * norm0
    # evaluation-noise ceiling: once |G| sits at the round-off floor of the
    # residual evaluation, further reduction is meaningless
    noise_ceiling = 1e-8 * (1.0 + float(np.linalg.norm(u)))
    norm = norm0
    stats.solves += 1
    iters_here = 0
    prev_norm = math.inf
    for _ in range(ncfg.max_iters):
        if norm <= tol:
            break
        if norm <= noise_ceiling and norm > 0.25 * prev_norm:
            break  # stalled at the noise floor; accept
        prev_norm = norm
        iters_here += 1
        if ncfg.jacobian_mode == "matrix_free":
            # analytic frozen-coefficient linearization: exact and free of
            # finite-difference noise (see FrozenResidualLinearization)
            capture = {}
            ctx.residual_flat(buf, u, capture=capture)
            lin = FrozenResidualLinearization(ctx, buf, capture)

            def jv(v):
                return v + dt_stage * lin.apply(v)

            prec = ctx.spectral_precond(field)
            m_op = prec.as_linear_operator(dt_stage) if prec else None
            if m_op is not None:
                # right-preconditioned, row-scaled system: GMRES measures the
                # residual in the scaled norm, immune to the energy row's
                # large-coefficient evaluation noise
                def op_rp(y):
                    return jv(m_op.matvec(rs * y)) / rs

                op = spla.LinearOperator((u.size, u.size), matvec=op_rp)
                try:
                    y, lin_iters = krylov_solve(op, -g / rs, ncfg.linear_tol,
                                                atol=0.5 * tol, strict=False)
                except LinearSolveFailure:
                    if norm <= noise_ceiling:
                        break  # nothing left above the noise floor to solve for
                    raise
                delta = m_op.matvec(rs * y)
            else:
                op = spla.LinearOperator((u.size, u.size), matvec=jv)
                delta, lin_iters = krylov_solve(op, -g, ncfg.linear_tol,
                                                atol=0.5 * tol, strict=False)
        else:
            def gfun(uvec):
                gv, _ = g_of(uvec)
                return gv

            jac = assemble_jacobian(
                gfun, u, ctx.grid, ghost_layers_needed(ctx.recon_mode),
                mode=ncfg.jacobian_mode,
                periodic_axes=tuple(lo == "periodic" for lo, _ in ctx.bc.sides),
            )
            delta, lin_iters = krylov_solve(sp.csr_matrix(jac), -g, ncfg.linear_tol,
                                            atol=0.5 * tol, block_size=ctx.grid.ncomp)
        stats.linear_iters += lin_iters
        # backtracking on residual growth
        step = 1.0
        accepted = None
        for _ in range(5):
            try:
                g_new, r_new = g_of(u + step * delta)
                norm_new = scaled_norm(g_new)
                if np.isfinite(norm_new):
                    accepted = (step, g_new, r_new, norm_new)
            except (NonPositivePressure, FloatingPointError):
                norm_new = math.inf
            if norm_new < norm or norm_new <= tol:
                break
            step *= 0.5
        if accepted is None:
            raise NewtonDivergence("Newton update left the admissible state region")
        step, g, r_u, norm = accepted
        u = u + step * delta
    else:
        raise NewtonDivergence(
            f"Newton stalled at |G| = {norm:.3e} (tol {tol:.3e}) after {ncfg.max_iters} iterations"
        )
    stats.newton_iters += iters_here
    stats.max_iters_per_solve = max(stats.max_iters_per_solve, iters_here)
    return u, r_u


def implicit_step(field: GridField, dt: float, stepper: str, ncfg: NewtonConfig,
                  scheme: FluxScheme, recon_mode: str, bc: BoundaryCondition,
                  eos: EquationOfState, gravity=None,
                  context: ImplicitContext | None = None):
    """One implicit step (backward Euler or two-implicit-stage ESDIRK, order 2).

    Returns (new_field, NewtonStats).  Stage systems
    X + dt a_ii r(X) = RHS are solved by inexact Newton with the
    configured Jacobian mode.
    """
    if stepper not in IMPLICIT_STEPPERS:
        raise ValueError(f"unknown implicit stepper {stepper!r}")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    tab = _TABLEAUX[stepper]
    ctx = context or ImplicitContext(field, scheme, recon_mode, bc, eos, gravity)
    stats = NewtonStats()
    u0 = field.interior().reshape(-1).copy()
    nstage = tab.shape[0]
    r_stages = [None] * nstage
    u_stage = u0
    for i in range(nstage):
        aii = tab[i, i]
        if aii == 0.0:
            buf = ctx.make_buffer(field)
            r_stages[i] = ctx.residual_flat(buf, u0)
            continue
        rhs = u0.copy()
        for j in range(i):
            if tab[i, j] != 0.0:
                rhs -= dt * tab[i, j] * r_stages[j]
        u_stage, r_stages[i] = _newton_stage(ctx, field, rhs, dt * aii, u_stage, ncfg, stats)
    new = u_stage.reshape(tuple(field.grid.n_cells) + (field.grid.ncomp,))
    _check_valid(new, field.dim, eos, field.p_ref(eos))
    return _with_interior(field, new), stats
