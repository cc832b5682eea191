"""Exact Riemann solver for the 1D Euler equations (test oracle).

Independent reference for shock-tube comparisons: Newton iteration on the
star-region pressure with the standard two-rarefaction/two-shock flux
functions, then similarity sampling of the wave fan.
"""

from __future__ import annotations

import math

import numpy as np


def _f_side(p, rho_k, p_k, c_k, gamma):
    """Velocity change across the wave connecting to state k, and derivative."""
    if p > p_k:  # shock
        a = 2.0 / ((gamma + 1.0) * rho_k)
        b = (gamma - 1.0) / (gamma + 1.0) * p_k
        sq = math.sqrt(a / (p + b))
        f = (p - p_k) * sq
        df = sq * (1.0 - 0.5 * (p - p_k) / (p + b))
    else:  # rarefaction
        f = 2.0 * c_k / (gamma - 1.0) * ((p / p_k) ** ((gamma - 1.0) / (2.0 * gamma)) - 1.0)
        df = 1.0 / (rho_k * c_k) * (p / p_k) ** (-(gamma + 1.0) / (2.0 * gamma))
    return f, df


def solve_star(rho_l, u_l, p_l, rho_r, u_r, p_r, gamma, tol=1e-12):
    """Star-region pressure and velocity via Newton iteration."""
    c_l = math.sqrt(gamma * p_l / rho_l)
    c_r = math.sqrt(gamma * p_r / rho_r)
    if 2.0 * (c_l + c_r) / (gamma - 1.0) <= u_r - u_l:
        raise ValueError("vacuum-generating data")
    # two-rarefaction initial guess, robust for near-isentropic data
    z = (gamma - 1.0) / (2.0 * gamma)
    p = ((c_l + c_r - 0.5 * (gamma - 1.0) * (u_r - u_l)) /
         (c_l / p_l**z + c_r / p_r**z)) ** (1.0 / z)
    for _ in range(100):
        f_l, df_l = _f_side(p, rho_l, p_l, c_l, gamma)
        f_r, df_r = _f_side(p, rho_r, p_r, c_r, gamma)
        delta = (f_l + f_r + (u_r - u_l)) / (df_l + df_r)
        p_new = max(p - delta, 1e-14 * p)
        if abs(p_new - p) <= tol * 0.5 * (p + p_new):
            p = p_new
            break
        p = p_new
    f_l, _ = _f_side(p, rho_l, p_l, c_l, gamma)
    f_r, _ = _f_side(p, rho_r, p_r, c_r, gamma)
    u = 0.5 * (u_l + u_r) + 0.5 * (f_r - f_l)
    return p, u


def sample(xi, rho_l, u_l, p_l, rho_r, u_r, p_r, gamma):
    """Self-similar solution W(xi = x/t) of the Riemann problem."""
    c_l = math.sqrt(gamma * p_l / rho_l)
    c_r = math.sqrt(gamma * p_r / rho_r)
    p_s, u_s = solve_star(rho_l, u_l, p_l, rho_r, u_r, p_r, gamma)
    gm, gp = gamma - 1.0, gamma + 1.0
    if xi <= u_s:  # left of the contact
        if p_s > p_l:  # left shock
            rho_sl = rho_l * ((p_s / p_l + gm / gp) / (gm / gp * p_s / p_l + 1.0))
            s_l = u_l - c_l * math.sqrt((gp * p_s / p_l + gm) / (2.0 * gamma))
            return (rho_l, u_l, p_l) if xi <= s_l else (rho_sl, u_s, p_s)
        c_sl = c_l * (p_s / p_l) ** (gm / (2.0 * gamma))
        head, tail = u_l - c_l, u_s - c_sl
        if xi <= head:
            return rho_l, u_l, p_l
        if xi >= tail:
            return rho_l * (p_s / p_l) ** (1.0 / gamma), u_s, p_s
        u = 2.0 / gp * (c_l + 0.5 * gm * u_l + xi)
        c = 2.0 / gp * (c_l + 0.5 * gm * (u_l - xi))
        rho = rho_l * (c / c_l) ** (2.0 / gm)
        return rho, u, rho * c * c / gamma
    if p_s > p_r:  # right shock
        rho_sr = rho_r * ((p_s / p_r + gm / gp) / (gm / gp * p_s / p_r + 1.0))
        s_r = u_r + c_r * math.sqrt((gp * p_s / p_r + gm) / (2.0 * gamma))
        return (rho_r, u_r, p_r) if xi >= s_r else (rho_sr, u_s, p_s)
    c_sr = c_r * (p_s / p_r) ** (gm / (2.0 * gamma))
    head, tail = u_r + c_r, u_s + c_sr
    if xi >= head:
        return rho_r, u_r, p_r
    if xi <= tail:
        return rho_r * (p_s / p_r) ** (1.0 / gamma), u_s, p_s
    u = 2.0 / gp * (-c_r + 0.5 * gm * u_r + xi)
    c = 2.0 / gp * (c_r - 0.5 * gm * (u_r - xi))
    rho = rho_r * (c / c_r) ** (2.0 / gm)
    return rho, u, rho * c * c / gamma


def solution_profile(x, t, left, right, gamma, x0=0.5):
    """Sampled (rho, u, p) arrays at positions x and time t > 0."""
    rho = np.empty_like(x)
    u = np.empty_like(x)
    p = np.empty_like(x)
    for i, xi in enumerate((np.asarray(x) - x0) / t):
        rho[i], u[i], p[i] = sample(xi, *left, *right, gamma)
    return rho, u, p


def wave_structure(left, right, gamma):
    """Wave speeds of the fan: (left head, left tail, contact, right shock/head)."""
    rho_l, u_l, p_l = left
    rho_r, u_r, p_r = right
    c_l = math.sqrt(gamma * p_l / rho_l)
    c_r = math.sqrt(gamma * p_r / rho_r)
    p_s, u_s = solve_star(rho_l, u_l, p_l, rho_r, u_r, p_r, gamma)
    gm, gp = gamma - 1.0, gamma + 1.0
    if p_s > p_l:
        s = u_l - c_l * math.sqrt((gp * p_s / p_l + gm) / (2.0 * gamma))
        lhead = ltail = s
    else:
        lhead = u_l - c_l
        ltail = u_s - c_l * (p_s / p_l) ** (gm / (2.0 * gamma))
    if p_s > p_r:
        s = u_r + c_r * math.sqrt((gp * p_s / p_r + gm) / (2.0 * gamma))
        rhead = rtail = s
    else:
        rhead = u_r + c_r
        rtail = u_s + c_r * (p_s / p_r) ** (gm / (2.0 * gamma))
    return {"left_head": lhead, "left_tail": ltail, "contact": u_s,
            "right_tail": rtail, "right_head": rhead, "p_star": p_s, "u_star": u_s}
