"""Stability, conditioning and asymptotic diagnostics.

Von Neumann scanner for the fully discrete scheme, one-norm condition
numbers of implicit Jacobians, Fourier mode growth, pressure-fluctuation
and kinetic-energy/enstrophy diagnostics, and the hydrostatic dissipation
study for the low-Mach modified fluxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from allmach.flux import FluxScheme, _prim_to_cons_transform, diffusion_matrix, flux_jacobian
from allmach.grid import GridField
from allmach.state import EquationOfState, PrimitiveState, primitive_from_conserved_arrays

__all__ = [
    "AmplificationSpec",
    "StabilityReport",
    "SingularMatrix",
    "amplification_matrix",
    "max_stable_nu",
    "scheme_matrices_1d",
    "condition_number_1norm",
    "jacobian_condition_study",
    "high_mode_sum",
    "pressure_fluctuation",
    "kinetic_energy_total",
    "mean_kinetic_energy",
    "enstrophy_mean",
    "tgv_nondim_series",
    "hydrostatic_dissipation_study",
    "hydrostatic_residual_norms",
]


class SingularMatrix(np.linalg.LinAlgError):
    """Condition number requested for a singular matrix."""


@dataclass(frozen=True)
class AmplificationSpec:
    """Inputs of the forward-Euler von Neumann analysis.

    a_mat and d_mat are the (linearized) flux Jacobian and diffusion matrix
    in any common basis; nu = dt/dx; beta = k dx is the phase per cell.
    """

    a_mat: np.ndarray
    d_mat: np.ndarray
    nu: float
    beta: float

    def __post_init__(self) -> None:
        if not self.nu > 0.0:
            raise ValueError("nu must be positive")


@dataclass
class StabilityReport:
    nu_max: float
    beta_critical: float
    betas: np.ndarray
    spectral_radius: np.ndarray  # max |lambda|(beta) at nu_max


def amplification_matrix(spec: AmplificationSpec) -> np.ndarray:
    """I - nu [A i sin(beta) + D (1 - cos(beta))] of the forward-Euler scheme."""
    n = spec.a_mat.shape[0]
    return np.eye(n) - spec.nu * (
        1j * np.sin(spec.beta) * spec.a_mat + (1.0 - np.cos(spec.beta)) * spec.d_mat
    )


def _equilibrate(a_mat, d_mat):
    """Diagonal similarity balancing |A| + |D|; spectral radii are invariant.

    The low-Mach matrices are badly non-normal (entries spread over c^2),
    which would drown the |lambda| <= 1 + 1e-12 test in eigenvalue noise.
    """
    m = np.abs(a_mat) + np.abs(d_mat) + 1e-300
    s = np.ones(m.shape[0])
    for _ in range(20):
        scaled = m * np.outer(1.0 / s, s)
        rown = scaled.sum(axis=1)
        coln = scaled.sum(axis=0)
        s *= (rown / coln) ** 0.25
    sinv = 1.0 / s
    bal = lambda x: x * np.outer(sinv, s)
    return bal(a_mat), bal(d_mat)


def _spectral_radii(a_mat, d_mat, nu, betas):
    n = a_mat.shape[0]
    g = np.empty((betas.size, n, n), dtype=complex)
    g[:] = np.eye(n)
    g -= nu * (
        1j * np.sin(betas)[:, None, None] * a_mat
        + (1.0 - np.cos(betas))[:, None, None] * d_mat
    )
    return np.max(np.abs(np.linalg.eigvals(g)), axis=-1)


def max_stable_nu(a_mat: np.ndarray, d_mat: np.ndarray, beta_samples: int = 1024,
                  nu_bracket=(1e-12, 1e3)) -> StabilityReport:
    """Largest nu with spectral radius <= 1 + 1e-12 over all sampled phases.

    The phase grid is uniform on [0, 2 pi) with the checkerboard mode
    beta = pi included exactly; nu is bisected to 1e-3 relative accuracy.
    """
    if beta_samples < 64:
        raise ValueError("need at least 64 phase samples")
    betas = np.unique(np.concatenate([
        np.linspace(0.0, 2.0 * np.pi, beta_samples, endpoint=False), [np.pi]
    ]))
    a_mat, d_mat = _equilibrate(np.asarray(a_mat, dtype=float), np.asarray(d_mat, dtype=float))

    def stable(nu):
        return bool(np.all(_spectral_radii(a_mat, d_mat, nu, betas) <= 1.0 + 1e-12))

    lo, hi = nu_bracket
    if not stable(lo):
        rad = _spectral_radii(a_mat, d_mat, lo, betas)
        return StabilityReport(lo, float(betas[np.argmax(rad)]), betas, rad)
    if stable(hi):
        rad = _spectral_radii(a_mat, d_mat, hi, betas)
        return StabilityReport(hi, float(betas[np.argmax(rad)]), betas, rad)
    while hi / lo > 1.0 + 1e-3:
        mid = np.sqrt(lo * hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    rad = _spectral_radii(a_mat, d_mat, lo, betas)
    return StabilityReport(float(lo), float(betas[np.argmax(rad)]), betas, rad)


def scheme_matrices_1d(scheme: FluxScheme, q: PrimitiveState, eos: EquationOfState):
    """(A, D) in primitive variables for the 1D von Neumann analysis."""
    a = flux_jacobian(q, 0, eos, basis="primitive")
    d_cons = diffusion_matrix(scheme, q, q, 0, eos)
    t, tinv = _prim_to_cons_transform(np.asarray(q.rho), q.vel[None, :], eos.gamma)
    return a, (tinv @ d_cons[None] @ t)[0]


# ---------------------------------------------------------------------------
# condition numbers
# ---------------------------------------------------------------------------

def _inverse_1norm_longdouble(a: np.ndarray) -> float:
    """|A^-1|_1 via pivoted LU in long double.

    Double precision cannot represent the inverse once kappa approaches
    1/eps ~ 4e15; the extended-precision factorization stays meaningful up
    to kappa ~ 1e18 (the very low Mach Jacobians of the condition study).
    """
    ld = np.longdouble
    n = a.shape[0]
    lu = a.astype(ld).copy()
    perm = np.arange(n)
    for k in range(n - 1):
        j = k + int(np.argmax(np.abs(lu[k:, k])))
        if lu[j, k] == 0:
            raise SingularMatrix("zero pivot in extended-precision LU")
        if j != k:
            lu[[k, j]] = lu[[j, k]]
            perm[[k, j]] = perm[[j, k]]
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    x = np.zeros((n, n), dtype=ld)
    x[np.arange(n), perm] = 1.0  # P applied to the identity
    for i in range(1, n):  # unit lower triangular solve
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):  # upper triangular solve
        if lu[i, i] == 0:
            raise SingularMatrix("zero pivot in extended-precision LU")
        x[i] -= lu[i, i + 1 :] @ x[i + 1 :]
        x[i] /= lu[i, i]
    return float(np.max(np.abs(x).sum(axis=0)))


def condition_number_1norm(a, mode: str = "exact_dense") -> float:
    """kappa_1 = |A|_1 |A^-1|_1, exact for dense A or Hager-style estimated."""
    if mode == "exact_dense":
        a = np.asarray(a.toarray() if sp.issparse(a) else a, dtype=float)
        norm_a = np.max(np.abs(a).sum(axis=0))
        try:
            inv = np.linalg.inv(a)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(str(exc)) from None
        kappa = float(norm_a * np.max(np.abs(inv).sum(axis=0)))
        if kappa > 1e13:  # beyond double-precision inversion; redo in long double
            kappa = float(norm_a) * _inverse_1norm_longdouble(a)
        return kappa
    if mode == "hager_estimate":
        a_sp = sp.csc_matrix(a)
        norm_a = spla.norm(a_sp, 1)
        try:
            lu = spla.splu(a_sp)
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from None
        n = a_sp.shape[0]
        inv_op = spla.LinearOperator((n, n), matvec=lu.solve,
                                     rmatvec=lambda x: lu.solve(x, trans="T"))
        return float(norm_a * spla.onenormest(inv_op))
    raise ValueError(f"unknown mode {mode!r}")


def _solenoidal_perturbation(grid, amplitude, seed):
    """Divergence-free velocity perturbation from random 2D Fourier modes."""
    rng = np.random.default_rng(seed)
    x, y = grid.meshgrid(with_ghosts=True)
    dvx = np.zeros_like(x)
    dvy = np.zeros_like(x)
    for k in (1, 2):
        a = rng.uniform(0.5, 1.0)
        phx, phy = rng.uniform(0.0, 2.0 * np.pi, 2)
        kk = 2.0 * np.pi * k
        # stream function psi = a sin(kk x + phx) sin(kk y + phy)
        dvx += a * kk * np.sin(kk * x + phx) * np.cos(kk * y + phy)
        dvy -= a * kk * np.cos(kk * x + phx) * np.sin(kk * y + phy)
    scale = amplitude / max(np.max(np.abs(dvx)), np.max(np.abs(dvy)))
    return dvx * scale, dvy * scale


def condition_snapshot(mach, n: int = 16, gamma: float = 5.0 / 3.0,
                       perturbation: float = 1e-2, seed: int = 0):
    """Mach-scaled vortex snapshot for the conditioning study.

    The rotating-vortex velocity pattern is scaled by the target Mach
    number at a fixed O(1) sound speed with the matching O(M^2) dynamic
    pressure, the family in which the Jacobian entries stay scale-balanced
    as M drops; a small solenoidal perturbation breaks the symmetry.
    """
    import math

    from allmach.grid import BoundaryCondition, Grid, GridField

    eos = EquationOfState(gamma)
    grid = Grid((n, n), (1.0 / n, 1.0 / n), (-0.5, -0.5), n_ghost=2)
    x, y = grid.meshgrid(with_ghosts=True)
    r = np.sqrt(x * x + y * y)
    vphi = np.where(r < 0.2, 5.0 * r, np.where(r < 0.4, 2.0 - 5.0 * r, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        ex, ey = -y / r, x / r
    ex = np.where(r > 0, ex, 0.0)
    ey = np.where(r > 0, ey, 0.0)
    vel = mach * np.stack([vphi * ex, vphi * ey], axis=-1)
    inner = 12.5 * r * r
    with np.errstate(invalid="ignore", divide="ignore"):
        middle = 4.0 * np.log(5.0 * r) + 4.0 - 20.0 * r + 12.5 * r * r
    profile = np.where(r < 0.2, inner, np.where(r < 0.4, middle, 4.0 * math.log(2.0) - 2.0))
    pp = mach * mach * profile
    dvx, dvy = _solenoidal_perturbation(grid, perturbation * mach, seed)
    vel[..., 0] += dvx
    vel[..., 1] += dvy
    p_ref = 1.0 / gamma  # unit sound speed at rho = 1
    field = GridField.from_primitive(grid, np.ones_like(r), vel, pp, eos,
                                     e_off=p_ref / (gamma - 1.0), include_ghosts=True)
    return field, BoundaryCondition.periodic(2), eos


def jacobian_condition_study(schemes, mach_list, n: int = 16, cfl: float = 0.8,
                             gamma: float = 5.0 / 3.0, perturbation: float = 1e-2,
                             seed: int = 0, mode: str = "exact_dense"):
    """kappa_1 of the implicit-step Jacobian on vortex snapshots per scheme and Mach.

    Measures the operator the Newton solver actually inverts: the
    frozen-coefficient linearization of the backward-Euler stage function
    at an advective-CFL step (finite differences of the state-sensitive
    eigendecompositions would only add noise on top of it).  Returns a list
    of (mach, scheme_kind, kappa) rows.
    """
    from allmach.stepping import (FrozenResidualLinearization, ImplicitContext,
                                  TimeStepPolicy, compute_dt)

    rows = []
    for mach in mach_list:
        field, bc, eos = condition_snapshot(mach, n=n, gamma=gamma,
                                            perturbation=perturbation, seed=seed)
        dt = compute_dt(field, TimeStepPolicy("advective", cfl=cfl), eos)
        u0 = field.interior().reshape(-1).copy()
        nn = u0.size
        for kind in schemes:
            scheme = FluxScheme(kind)
            ctx = ImplicitContext(field, scheme, "linear", bc, eos)
            buf = ctx.make_buffer(field)
            cap = {}
            ctx.residual_flat(buf, u0, capture=cap)
            lin = FrozenResidualLinearization(ctx, buf, cap)
            jac = np.empty((nn, nn))
            unit = np.zeros(nn)
            for j in range(nn):
                unit[j] = 1.0
                jac[:, j] = unit + dt * lin.apply(unit)
                unit[j] = 0.0
            rows.append((mach, kind, condition_number_1norm(jac, mode)))
    return rows


# ---------------------------------------------------------------------------
# field diagnostics
# ---------------------------------------------------------------------------

def high_mode_sum(field: GridField, eos: EquationOfState | None = None) -> float:
    """Sum of |u_hat| over the top half of the positive-frequency velocity modes.

    One-dimensional fields only; grid-scale instability shows up as growth
    of this sum while smooth solutions keep it at round-off level.
    """
    if field.dim != 1:
        raise ValueError("Fourier mode diagnostic is one-dimensional")
    interior = field.interior()
    u = interior[..., 1] / interior[..., 0]
    uhat = np.abs(np.fft.rfft(u))
    n = u.size
    lo = max(1, n // 4)
    return float(np.sum(uhat[lo:]))


def pressure_fluctuation(field: GridField, eos: EquationOfState) -> float:
    """(max p - min p) / mean p over the interior, exact in offset arithmetic."""
    _, _, pp = primitive_from_conserved_arrays(field.interior(), field.dim, eos.gamma)
    return float((np.max(pp) - np.min(pp)) / (field.p_ref(eos) + np.mean(pp)))


def kinetic_energy_total(field: GridField) -> float:
    """Integral of |mom|^2 / (2 rho) over the interior."""
    interior = field.interior()
    mom = interior[..., 1 : 1 + field.dim]
    ke = 0.5 * np.sum(mom * mom, axis=-1) / interior[..., 0]
    return float(np.sum(ke) * field.grid.cell_volume)


def mean_kinetic_energy(field: GridField) -> float:
    """Volumetric mean of |v|^2 / 2 (the decaying-vortex K diagnostic)."""
    interior = field.interior()
    vel = interior[..., 1 : 1 + field.dim] / interior[..., 0][..., None]
    return float(0.5 * np.mean(np.sum(vel * vel, axis=-1)))


def _centered_diff(arr, axis, dx, periodic):
    if periodic:
        return (np.roll(arr, -1, axis=axis) - np.roll(arr, 1, axis=axis)) / (2.0 * dx)
    out = np.empty_like(arr)
    sl = lambda s: tuple(s if a == axis else slice(None) for a in range(arr.ndim))
    out[sl(slice(1, -1))] = (arr[sl(slice(2, None))] - arr[sl(slice(0, -2))]) / (2.0 * dx)
    out[sl(slice(0, 1))] = np.nan
    out[sl(slice(-1, None))] = np.nan
    return out


def enstrophy_mean(field: GridField, periodic: bool = True) -> float:
    """Volumetric mean of |curl v|^2 / 2 via 2nd-order centered differences.

    periodic=False restricts the average to interior cells where the
    centered stencil does not wrap.
    """
    interior = field.interior()
    dim = field.dim
    vel = interior[..., 1 : 1 + dim] / interior[..., 0][..., None]
    dx = field.grid.spacing
    if dim == 1:
        return 0.0
    if dim == 2:
        wz = _centered_diff(vel[..., 1], 0, dx[0], periodic) - _centered_diff(vel[..., 0], 1, dx[1], periodic)
        w2 = wz * wz
    else:
        d = lambda comp, ax: _centered_diff(vel[..., comp], ax, dx[ax], periodic)
        wx = d(2, 1) - d(1, 2)
        wy = d(0, 2) - d(2, 0)
        wz = d(1, 0) - d(0, 1)
        w2 = wx * wx + wy * wy + wz * wz
    if periodic:
        return float(0.5 * np.mean(w2))
    return float(0.5 * np.nanmean(w2))


def tgv_nondim_series(times, kinetic, enstrophy, u0: float, k: float):
    """Nondimensional decay diagnostics: t* = k u0 t, K* = K/u0^2, O* = O/(k u0)^2.

    dK*/dt* is centered-differenced; the numerical Reynolds number
    Re = -O*/(dK*/dt*) carries +inf where the decay rate vanishes.
    """
    t_star = k * u0 * np.asarray(times, dtype=float)
    k_star = np.asarray(kinetic, dtype=float) / u0**2
    o_star = np.asarray(enstrophy, dtype=float) / (k * u0) ** 2
    dk = np.gradient(k_star, t_star)
    with np.errstate(divide="ignore", invalid="ignore"):
        reynolds = np.where(dk != 0.0, -o_star / dk, np.inf)
    return {"t_star": t_star, "k_star": k_star, "omega_star": o_star,
            "dkdt_star": dk, "reynolds": reynolds}


# ---------------------------------------------------------------------------
# hydrostatic dissipation study
# ---------------------------------------------------------------------------

def hydrostatic_dissipation_study(m_cut_list, schemes=("roe_turkel", "roe_miczek"),
                                  n: int = 64, g: float = 1.0, temperature: float = 1.0,
                                  rho0: float = 1.0, gamma: float = 1.4):
    """Norm of the diffusion contribution to the hydrostatic residual vs m_cut.

    Evaluates D (U_{i+1} - U_i) / (2 dx) on each interior face of the
    isothermal column at rest and returns (m_cut, scheme_kind, mean face
    norm) rows.  The Weiss-Smith matrix grows like 1/m_cut here while the
    rotation-type modification stays bounded.
    """
    from allmach.cases import hydrostatic_init, _grid

    eos = EquationOfState(gamma)
    grid = _grid((n,), (0.0,), (1.0,))
    field = hydrostatic_init(grid, g, temperature, rho0, eos)
    data = field.data[grid.interior()]
    rows = []
    for kind in schemes:
        for m_cut in m_cut_list:
            scheme = FluxScheme(kind, m_cut=m_cut)
            norms = []
            for i in range(n - 1):
                ul, ur = data[i], data[i + 1]
                ql = PrimitiveState(ul[0], ul[1] / ul[0],
                                    (gamma - 1.0) * (ul[2] - 0.5 * ul[1] ** 2 / ul[0]))
                qr = PrimitiveState(ur[0], ur[1] / ur[0],
                                    (gamma - 1.0) * (ur[2] - 0.5 * ur[1] ** 2 / ur[0]))
                dmat = diffusion_matrix(scheme, ql, qr, 0, eos)
                contrib = dmat @ (ur - ul) / (2.0 * grid.spacing[0])
                norms.append(np.linalg.norm(contrib))
            rows.append((m_cut, kind, float(np.mean(norms))))
    return rows


def hydrostatic_residual_norms(field: GridField, scheme: FluxScheme, bc, eos,
                               gravity) -> np.ndarray:
    """Momentum residual of the hydrostatic column (for the dx^2 cancellation check)."""
    from allmach.stepping import spatial_residual

    r = spatial_residual(field, scheme, "constant", bc, eos, gravity=gravity)
    return r[..., 1]
