"""Interface fluxes for the compressible Euler equations.

Implements the physical flux, Roe averaging, the upwind diffusion matrix
D = P^-1 |P A| for the plain Roe scheme (P = identity) and its two
low-Mach modifications (Weiss-Smith and the rotation-type modifying
matrix), the Harten entropy fix, and the gravity source term.

The modifying matrices are written in primitive variables for axis-aligned
face normals; diffusion matrices are returned in the conserved basis.
Everything is evaluated in dimensional variables: explicit Mach factors of
the rescaled-equation forms are unity while mu and delta keep their local
Mach number dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from allmach.state import (
    ConservedState,
    EquationOfState,
    MachContext,
    NonPositivePressure,
    PrimitiveState,
    cons_to_prim,
    mach_context,
    mu_delta,
    sound_speed,
)

__all__ = [
    "FluxScheme",
    "SingularPreconditioner",
    "EigendecompositionFailure",
    "physical_flux",
    "flux_jacobian",
    "roe_average",
    "preconditioner_matrix",
    "diffusion_matrix",
    "interface_flux",
    "entropy_fix",
    "gravity_source",
]

SCHEME_KINDS = ("central", "roe", "roe_turkel", "roe_miczek")

#: preconditioner kind used by each flux scheme
_PRECOND_OF_SCHEME = {
    "roe": "identity",
    "roe_turkel": "weiss_smith",
    "roe_miczek": "miczek",
}

#: default Mach cutoffs; the rotation-type matrix tolerates much smaller ones
DEFAULT_M_CUT = {"identity": 1e-12, "weiss_smith": 1e-8, "miczek": 1e-12}


class SingularPreconditioner(ValueError):
    """The modifying matrix P is singular (m_cut <= 0 or non-finite entries)."""


class EigendecompositionFailure(RuntimeError):
    """P A is numerically defective; |P A| cannot be formed reliably."""


@dataclass(frozen=True)
class FluxScheme:
    """Interface flux selector with its low-Mach and entropy-fix parameters.

    ``entropy_fix`` is the Harten smoothing width relative to the
    Roe-average sound speed (0 disables the fix).
    """

    kind: str = "roe_miczek"
    m_cut: float = 0.0
    entropy_fix: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown flux scheme {self.kind!r}")
        if self.m_cut == 0.0 and self.kind in _PRECOND_OF_SCHEME:
            object.__setattr__(self, "m_cut", DEFAULT_M_CUT[_PRECOND_OF_SCHEME[self.kind]])
        if self.kind != "central" and not self.m_cut > 0.0:
            raise SingularPreconditioner(f"m_cut must be > 0, got {self.m_cut}")

    @property
    def preconditioner(self) -> str:
        return _PRECOND_OF_SCHEME.get(self.kind, "identity")


# ---------------------------------------------------------------------------
# physical flux and Jacobians
# ---------------------------------------------------------------------------

def physical_flux(u: ConservedState, axis: int, eos: EquationOfState) -> np.ndarray:
    """Euler flux (rho v_n, rho v_n v + p e_n, v_n (E + p)) along +axis."""
    q = cons_to_prim(u, eos)
    d = u.dim
    vn = q.vel[axis]
    f = np.empty(d + 2)
    f[0] = u.rho * vn
    f[1 : 1 + d] = u.mom * vn
    f[1 + axis] += q.p
    f[1 + d] = vn * (u.E + q.p)
    return f


def _jacobian_primitive(q: PrimitiveState, axis: int, eos: EquationOfState) -> np.ndarray:
    d = q.dim
    c2 = eos.gamma * q.p / q.rho
    vn = q.vel[axis]
    a = np.zeros((d + 2, d + 2))
    np.fill_diagonal(a, vn)
    a[0, 1 + axis] = q.rho
    a[1 + axis, 1 + d] = 1.0 / q.rho
    a[1 + d, 1 + axis] = q.rho * c2
    return a


def _jacobian_conserved(q: PrimitiveState, axis: int, eos: EquationOfState) -> np.ndarray:
    d = q.dim
    g = eos.gamma
    v = q.vel
    vn = v[axis]
    v2 = float(np.dot(v, v))
    h = g * q.p / ((g - 1.0) * q.rho) + 0.5 * v2
    phi = 0.5 * (g - 1.0) * v2
    a = np.zeros((d + 2, d + 2))
    a[0, 1 + axis] = 1.0
    for i in range(d):
        a[1 + i, 0] = -v[i] * vn
        a[1 + i, 1 + i] += vn
        a[1 + i, 1 + axis] += v[i]
        if i == axis:
            a[1 + i, 0] += phi
            a[1 + i, 1 : 1 + d] -= (g - 1.0) * v
            a[1 + i, 1 + d] = g - 1.0
    a[1 + d, 0] = vn * (phi - h)
    a[1 + d, 1 : 1 + d] = -(g - 1.0) * vn * v
    a[1 + d, 1 + axis] += h
    a[1 + d, 1 + d] = g * vn
    return a


def flux_jacobian(
    q: PrimitiveState, axis: int, eos: EquationOfState, basis: str = "conserved"
) -> np.ndarray:
    """Analytic flux Jacobian along +axis in the requested basis."""
    if basis == "conserved":
        return _jacobian_conserved(q, axis, eos)
    if basis == "primitive":
        return _jacobian_primitive(q, axis, eos)
    raise ValueError(f"unknown basis {basis!r}")


def _prim_to_cons_transform(rho, vel, gamma):
    """Batched dU/dW and dW/dU at primitive states; vel has shape (..., d)."""
    d = vel.shape[-1]
    n = d + 2
    shape = np.broadcast_shapes(np.shape(rho), vel.shape[:-1])
    rho = np.broadcast_to(rho, shape)
    vel = np.broadcast_to(vel, shape + (d,))
    t = np.zeros(shape + (n, n))
    tinv = np.zeros(shape + (n, n))
    v2 = np.sum(vel * vel, axis=-1)
    t[..., 0, 0] = 1.0
    tinv[..., 0, 0] = 1.0
    for i in range(d):
        t[..., 1 + i, 0] = vel[..., i]
        t[..., 1 + i, 1 + i] = rho
        tinv[..., 1 + i, 0] = -vel[..., i] / rho
        tinv[..., 1 + i, 1 + i] = 1.0 / rho
    t[..., 1 + d, 0] = 0.5 * v2
    t[..., 1 + d, 1 : 1 + d] = rho[..., None] * vel
    t[..., 1 + d, 1 + d] = 1.0 / (gamma - 1.0)
    tinv[..., 1 + d, 0] = 0.5 * (gamma - 1.0) * v2
    tinv[..., 1 + d, 1 : 1 + d] = -(gamma - 1.0) * vel
    tinv[..., 1 + d, 1 + d] = gamma - 1.0
    return t, tinv


# ---------------------------------------------------------------------------
# Roe average
# ---------------------------------------------------------------------------

def roe_average(qL: PrimitiveState, qR: PrimitiveState, eos: EquationOfState) -> PrimitiveState:
    """Roe-average state: sqrt(rho)-weighted velocity/enthalpy, rho = sqrt(rhoL rhoR).

    The returned primitive state carries the averaged velocity and total
    enthalpy exactly, so the Jacobian evaluated there satisfies the Roe
    property F(UR) - F(UL) = A (UR - UL) in one dimension.
    """
    g = eos.gamma
    sL, sR = np.sqrt(qL.rho), np.sqrt(qR.rho)
    w = sL / (sL + sR)
    vel = w * qL.vel + (1.0 - w) * qR.vel
    hL = g / (g - 1.0) * qL.p / qL.rho + 0.5 * float(np.dot(qL.vel, qL.vel))
    hR = g / (g - 1.0) * qR.p / qR.rho + 0.5 * float(np.dot(qR.vel, qR.vel))
    h = w * hL + (1.0 - w) * hR
    c2 = (g - 1.0) * (h - 0.5 * float(np.dot(vel, vel)))
    if not c2 > 0.0:
        raise NonPositivePressure(f"Roe average has c^2 = {c2} <= 0")
    rho = sL * sR
    return PrimitiveState(rho, vel, rho * c2 / g)


# ---------------------------------------------------------------------------
# modifying (preconditioning) matrices
# ---------------------------------------------------------------------------

def _precond_primitive(kind, rho, c, mu, delta, axis, dim):
    """Batched modifying matrix P in primitive variables, +axis face normal."""
    n = dim + 2
    shape = np.broadcast_shapes(np.shape(rho), np.shape(c), np.shape(mu), np.shape(delta))
    p = np.zeros(shape + (n, n))
    idx = np.arange(n)
    p[..., idx, idx] = 1.0
    if kind == "identity":
        return p
    if kind == "weiss_smith":
        p[..., 0, 1 + dim] = (np.asarray(mu) ** 2 - 1.0) / np.asarray(c) ** 2
        p[..., 1 + dim, 1 + dim] = np.asarray(mu) ** 2
        return p
    if kind == "miczek":
        rho = np.asarray(rho, dtype=float)
        c = np.asarray(c, dtype=float)
        delta = np.asarray(delta, dtype=float)
        p[..., 0, 1 + axis] = rho * delta / c
        p[..., 1 + axis, 1 + dim] = -delta / (rho * c)
        p[..., 1 + dim, 1 + axis] = rho * c * delta
        return p
    raise ValueError(f"unknown preconditioner kind {kind!r}")


def preconditioner_matrix(
    kind: str,
    q: PrimitiveState,
    ctx: MachContext,
    axis: int,
    eos: EquationOfState,
    basis: str = "primitive",
) -> np.ndarray:
    """Modifying matrix P in the requested basis for a +axis face normal.

    The entropy-variable form is available for the rotation-type matrix
    only, where it reduces to a skew coupling between the first component
    and the face-normal velocity.
    """
    if not ctx.m_cut > 0.0:
        raise SingularPreconditioner(f"m_cut must be > 0, got {ctx.m_cut}")
    d = q.dim
    if basis == "entropy":
        if kind == "identity":
            return np.eye(d + 2)
        if kind != "miczek":
            raise ValueError(f"entropy-variable form not available for {kind!r}")
        p = np.eye(d + 2)
        p[0, 1 + axis] = ctx.delta
        p[1 + axis, 0] = -ctx.delta
        return p
    c = sound_speed(q, eos)
    p = _precond_primitive(kind, q.rho, c, ctx.mu, ctx.delta, axis, d)
    if not np.all(np.isfinite(p)):
        raise SingularPreconditioner(f"non-finite entries in P (m_cut={ctx.m_cut})")
    if basis == "primitive":
        return p
    if basis == "conserved":
        t, tinv = _prim_to_cons_transform(q.rho, q.vel, eos.gamma)
        return t @ p @ tinv
    raise ValueError(f"unknown basis {basis!r}")


# ---------------------------------------------------------------------------
# entropy fix
# ---------------------------------------------------------------------------

def entropy_fix(lam, eps):
    """Harten-smoothed absolute value: |lam| outside eps, parabolic inside.

    eps = 0 disables the smoothing.  Works on scalars and arrays; eps may
    broadcast against lam.
    """
    lam = np.asarray(lam, dtype=float)
    eps = np.asarray(eps, dtype=float)
    alam = np.abs(lam)
    safe = np.where(eps > 0.0, eps, 1.0)
    smooth = 0.5 * (lam * lam + safe * safe) / safe
    out = np.where((eps > 0.0) & (alam < eps), smooth, alam)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# diffusion matrix D = P^-1 |P A|
# ---------------------------------------------------------------------------

#: extended-precision eigen-polish kicks in above this delta; double-precision
#: eig noise scales like eps_mach * delta relative to the matrix norm
_POLISH_DELTA = 1e3
_LONGDOUBLE_OK = np.finfo(np.longdouble).eps < 1e-17

#: the diffusion matrix saturates as delta -> inf (entries differ from the
#: limit by O(1/delta^2)), while eigen-decomposition noise grows like
#: eps * delta; capping delta inside the diffusion evaluation trades an
#: O(1e-14) modelling error for five orders less round-off noise
_DELTA_CAP = 1e7


def _abs_matrix_batch(mat, eps):
    """|mat| via numerical eigendecomposition with Harten smoothing.

    mat has shape (..., n, n); eps broadcasts against the batch shape.
    Returns (abs_mat, ok) where ok flags batch entries whose decomposition
    reproduces mat to a relative 1e-8.
    """
    w, v = np.linalg.eig(mat)
    vinv = np.linalg.inv(v)
    eps_b = np.asarray(eps)[..., None] if np.ndim(eps) else eps
    lam = entropy_fix(w.real, eps_b)
    absm = v @ (lam[..., :, None] * vinv)
    recon = v @ (w[..., :, None] * vinv)
    scale = np.max(np.abs(mat), axis=(-2, -1)) + 1e-300
    err = np.max(np.abs(recon - mat), axis=(-2, -1)) / scale
    rmax = np.max(np.abs(absm.real), axis=(-2, -1)) + 1e-300
    imag = np.max(np.abs(absm.imag), axis=(-2, -1)) / rmax
    ok = (
        np.isfinite(err)
        & (err < 1e-8)
        & (imag < 1e-8)
        & np.all(np.isfinite(absm.real), axis=(-2, -1))
    )
    return absm.real, ok, w.real


def _det3(m):
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def _adj3(m):
    """Adjugate of a batch of 3x3 matrices (any float dtype)."""
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    out[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    out[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    out[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    out[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    out[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    out[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    out[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    out[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return out


def _polish_diffusion3(kind, rho, vn, c, mu, delta, w0, eps):
    """Recompute the P^-1 |P A| blocks in extended precision.

    Double-precision eigendecomposition loses roughly eps_mach * delta of
    relative accuracy through cancellations, so above moderate delta the
    block is rebuilt in long double: eigenvalues polished by Newton on the
    characteristic polynomial (seeded with the double eigenvalues),
    eigenvectors recovered from adjugate columns.
    """
    ld = np.longdouble
    rho, vn, c = rho.astype(ld), vn.astype(ld), c.astype(ld)
    shape = rho.shape
    a = np.zeros(shape + (3, 3), dtype=ld)
    a[..., 0, 0] = vn
    a[..., 1, 1] = vn
    a[..., 2, 2] = vn
    a[..., 0, 1] = rho
    a[..., 1, 2] = 1.0 / rho
    a[..., 2, 1] = rho * c**2
    p = np.zeros(shape + (3, 3), dtype=ld)
    p[..., 0, 0] = p[..., 1, 1] = p[..., 2, 2] = 1.0
    mu, delta = mu.astype(ld), delta.astype(ld)
    if kind == "weiss_smith":
        p[..., 0, 2] = (mu**2 - 1.0) / c**2
        p[..., 2, 2] = mu**2
    elif kind == "miczek":
        p[..., 0, 1] = rho * delta / c
        p[..., 1, 2] = -delta / (rho * c)
        p[..., 2, 1] = rho * c * delta
    m = p @ a
    lam = w0.astype(ld)
    tr = np.trace(m, axis1=-2, axis2=-1)
    s2 = (
        m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        + m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
        + m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    )
    det = _det3(m)
    for _ in range(3):  # monic cubic Newton; quadratic convergence per step
        val = ((lam - tr[..., None]) * lam + s2[..., None]) * lam - det[..., None]
        dval = (3.0 * lam - 2.0 * tr[..., None]) * lam + s2[..., None]
        lam = lam - val / np.where(dval == 0, 1.0, dval)
    eye = np.eye(3, dtype=ld)
    vecs = []
    for k in range(3):
        adj = _adj3(m - lam[..., k, None, None] * eye)
        norms = np.sum(np.abs(adj), axis=-2)
        pick = np.argmax(norms, axis=-1)
        col = np.take_along_axis(adj, pick[..., None, None], axis=-1)[..., 0]
        scale = np.max(np.abs(col), axis=-1)
        col = col / np.where(scale == 0, 1.0, scale)[..., None]
        vecs.append(col)
    v = np.stack(vecs, axis=-1)
    vinv = _adj3(v) / _det3(v)[..., None, None]
    lam_fix = entropy_fix(lam.astype(float), np.asarray(eps)[..., None]).astype(ld)
    pinv = _adj3(p) / _det3(p)[..., None, None]
    d_ld = pinv @ (v @ (lam_fix[..., :, None] * vinv))
    return d_ld.astype(float)


def _diffusion_block(kind, rho, vn, c, m_loc, m_cut, efix_eps):
    """3x3 block of P^-1 |P A| on (rho, v_n, p) for batches of face states.

    efix_eps is the absolute Harten width per face (0 disables).  On a
    failed eigendecomposition the local Mach number is perturbed by 1e-13
    and the face retried once.
    """
    shape = np.broadcast_shapes(
        np.shape(rho), np.shape(vn), np.shape(c), np.shape(m_loc)
    )
    rho = np.broadcast_to(np.asarray(rho, dtype=float), shape)
    vn = np.broadcast_to(np.asarray(vn, dtype=float), shape)
    c = np.broadcast_to(np.asarray(c, dtype=float), shape)
    m_loc = np.broadcast_to(np.asarray(m_loc, dtype=float), shape)
    eps = np.broadcast_to(np.asarray(efix_eps, dtype=float), shape)
    a = np.zeros(shape + (3, 3))
    a[..., 0, 0] = vn
    a[..., 1, 1] = vn
    a[..., 2, 2] = vn
    a[..., 0, 1] = rho
    a[..., 1, 2] = 1.0 / rho
    a[..., 2, 1] = rho * c**2
    mu, delta = mu_delta(m_loc, m_cut)
    delta = np.minimum(delta, _DELTA_CAP)
    p = _precond_primitive(kind, rho, c, mu, delta, axis=0, dim=1)
    pa = p @ a
    absm, ok, w = _abs_matrix_batch(pa, eps)
    if not np.all(ok):
        bad = ~ok
        mu2, delta2 = mu_delta(m_loc[bad] + 1e-13, m_cut)
        delta2 = np.minimum(delta2, _DELTA_CAP)
        p_bad = _precond_primitive(kind, rho[bad], c[bad], mu2, delta2, axis=0, dim=1)
        absm_bad, ok_bad, w_bad = _abs_matrix_batch(p_bad @ a[bad], eps[bad])
        if not np.all(ok_bad):
            raise EigendecompositionFailure(
                "defective P A block after Mach-context perturbation"
            )
        absm[bad] = absm_bad
        p[bad] = p_bad
        w[bad] = w_bad
        pa[bad] = p_bad @ a[bad]
    d3 = np.linalg.solve(p, absm)
    need = np.broadcast_to(np.asarray(delta) > _POLISH_DELTA, shape)
    if _LONGDOUBLE_OK and np.any(need):
        idx = np.nonzero(need)
        mu_b = np.broadcast_to(mu, shape)
        delta_b = np.broadcast_to(delta, shape)
        d3[idx] = _polish_diffusion3(
            kind, rho[idx], vn[idx], c[idx], mu_b[idx], delta_b[idx], w[idx], eps[idx]
        )
    return d3


def _diffusion_cons_batch(kind, rho, vel, c, m_loc, m_cut, efix_coeff, axis, gamma):
    """Conserved-basis D = P^-1 |P A| for batches of Roe-average face states.

    For axis-aligned normals the transverse velocity components decouple
    from the (rho, v_n, p) block, so the eigendecomposition reduces to a
    3x3 problem per face; transverse eigenvalues are v_n.
    """
    d = vel.shape[-1]
    n = d + 2
    vn = vel[..., axis]
    eps = efix_coeff * c
    d3 = _diffusion_block(kind, rho, vn, c, m_loc, m_cut, eps)
    shape = d3.shape[:-2]
    dprim = np.zeros(shape + (n, n))
    cols = (0, 1 + axis, 1 + d)
    for i, bi in enumerate(cols):
        for j, bj in enumerate(cols):
            dprim[..., bi, bj] = d3[..., i, j]
    if d > 1:
        lam_t = entropy_fix(vn, eps)
        for t_ax in range(d):
            if t_ax != axis:
                dprim[..., 1 + t_ax, 1 + t_ax] = lam_t
    t, tinv = _prim_to_cons_transform(rho, vel, gamma)
    return t @ dprim @ tinv


def diffusion_matrix(
    scheme: FluxScheme,
    qL: PrimitiveState,
    qR: PrimitiveState,
    axis: int,
    eos: EquationOfState,
) -> np.ndarray:
    """Upwind diffusion matrix of the scheme at the Roe average, conserved basis.

    Forms P A in primitive variables at the Roe-average state, takes the
    absolute value by numerical eigendecomposition (Harten smoothing on the
    eigenvalues when enabled) and maps P^-1 |P A| to the conserved basis.
    For axis-aligned normals P A decouples exactly into the acoustic
    (rho, v_n, p) block and transverse advection, so the eigenproblem is
    solved on the coupled block.
    """
    if scheme.kind == "central":
        return np.zeros((qL.dim + 2, qL.dim + 2))
    q = roe_average(qL, qR, eos)
    ctx = mach_context(q, eos, scheme.m_cut)
    c = sound_speed(q, eos)
    return _diffusion_cons_batch(
        scheme.preconditioner,
        np.asarray([q.rho]),
        q.vel[None, :],
        np.asarray([c]),
        np.asarray([ctx.m_loc]),
        scheme.m_cut,
        scheme.entropy_fix,
        axis,
        eos.gamma,
    )[0]


def interface_flux(
    scheme: FluxScheme,
    uL: ConservedState,
    uR: ConservedState,
    axis: int,
    eos: EquationOfState,
) -> np.ndarray:
    """Numerical flux 0.5 [F(uL) + F(uR)] - 0.5 D (uR - uL) along +axis."""
    f = 0.5 * (physical_flux(uL, axis, eos) + physical_flux(uR, axis, eos))
    if scheme.kind == "central":
        return f
    qL = cons_to_prim(uL, eos)
    qR = cons_to_prim(uR, eos)
    dmat = diffusion_matrix(scheme, qL, qR, axis, eos)
    du = np.concatenate([[uR.rho - uL.rho], uR.mom - uL.mom, [uR.E - uL.E]])
    return f - 0.5 * dmat @ du


def gravity_source(u: ConservedState, g) -> np.ndarray:
    """Cell-centered gravity source (0, rho g, rho g . v)."""
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if g.size != u.dim:
        raise ValueError("gravity vector dimension mismatch")
    return np.concatenate([[0.0], u.rho * g, [float(np.dot(g, u.mom))]])
