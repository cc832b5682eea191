"""Command-line entry point: run configurations and analysis sweeps.

``solver run config.cfg`` integrates a case and writes series.csv, periodic
field_<step>.csv dumps and a run.json summary into the output directory
(overridable with ALLMACH_OUTPUT_DIR).  ``solver analyze`` exposes the
stability scanner, the condition study, the hydrostatic dissipation study
and Mach sweeps of the vortex benchmark as CSV tables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from allmach import analysis
from allmach.cases import build_case
from allmach.config import RunConfig, parse_config
from allmach.flux import FluxScheme
from allmach.grid import total_conserved
from allmach.state import EquationOfState, PrimitiveState, primitive_from_conserved_arrays
from allmach.stepping import (EXPLICIT_STEPPERS, ImplicitContext, NewtonConfig,
                              NewtonStats, TimeStepPolicy, compute_dt, explicit_step,
                              implicit_step)

__all__ = ["run", "main"]

_FMT = "{:.17g}"


def _fmt(x) -> str:
    return _FMT.format(float(x))


def _diagnostics(field, eos, include_modes: bool) -> dict:
    tot = total_conserved(field)
    rho, vel, pp = primitive_from_conserved_arrays(field.interior(), field.dim, eos.gamma)
    c = np.sqrt(eos.gamma * (pp + field.p_ref(eos)) / rho)
    mach = np.sqrt(np.sum(vel * vel, axis=-1)) / c
    out = {
        "E_kin": analysis.kinetic_energy_total(field),
        "E_total": float(tot[-1]),
        "mass": float(tot[0]),
        "max_mach": float(np.max(mach)),
        "pressure_fluctuation": analysis.pressure_fluctuation(field, eos),
    }
    if include_modes and field.dim == 1:
        out["high_mode_sum"] = analysis.high_mode_sum(field)
    if field.dim == 3:
        out["K"] = analysis.mean_kinetic_energy(field)
        out["Omega"] = analysis.enstrophy_mean(field)
    return out


def _series_columns(dim: int) -> list:
    cols = ["t", "E_kin", "E_total", "mass", "max_mach", "pressure_fluctuation"]
    if dim == 1:
        cols.append("high_mode_sum")
    if dim == 3:
        cols += ["K", "Omega"]
    return cols


def write_field_csv(path, field, eos) -> None:
    """Cell-centered primitive dump: coordinates, rho, velocity, p, Mach."""
    dim = field.dim
    rho, vel, pp = primitive_from_conserved_arrays(field.interior(), dim, eos.gamma)
    p = pp + field.p_ref(eos)
    c = np.sqrt(eos.gamma * p / rho)
    mach = np.sqrt(np.sum(vel * vel, axis=-1)) / c
    coords = list(np.meshgrid(*[field.grid.cell_centers(a) for a in range(dim)], indexing="ij"))
    names = ["x", "y", "z"][:dim] + ["rho"] + ["vx", "vy", "vz"][:dim] + ["p", "mach"]
    columns = coords + [rho] + [vel[..., a] for a in range(dim)] + [p, mach]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        flat = [np.asarray(colm).reshape(-1) for colm in columns]
        for row in zip(*flat):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_rows(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def run(cfg: RunConfig, out_dir: str | None = None) -> int:
    """Integrate the configured case to t_end; returns the process exit code."""
    out = Path(out_dir or os.environ.get("ALLMACH_OUTPUT_DIR") or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_case(cfg.case, cfg.case_params)
    eos = setup.eos
    scheme = FluxScheme(cfg.scheme, m_cut=cfg.m_cut, entropy_fix=cfg.entropy_fix)
    policy = TimeStepPolicy(cfg.dt_policy, cfg.cfl, cfg.dt_fixed, cfg.mach_scaled_dt)
    implicit = cfg.stepper not in EXPLICIT_STEPPERS
    ncfg = NewtonConfig(cfg.newton_tol_rel, cfg.newton_tol_abs, cfg.newton_max_iters,
                        cfg.linear_tol, cfg.jacobian_mode)
    ctx = ImplicitContext(setup.field, scheme, cfg.reconstruction, setup.bc, eos,
                          setup.gravity) if implicit else None

    field = setup.field
    cols = _series_columns(field.dim)
    series = [[0.0] + [None] * (len(cols) - 1)]
    diag = _diagnostics(field, eos, include_modes=True)
    series[0] = [0.0] + [diag[c] for c in cols[1:]]
    stats = NewtonStats()
    t, step = 0.0, 0
    wall0 = time.perf_counter()
    status, message = 0, "reached t_end"
    try:
        while t < cfg.t_end * (1.0 - 1e-14):
            if step >= cfg.max_steps:
                status, message = 1, f"step cap {cfg.max_steps} reached at t={t:.6g}"
                break
            dt = min(compute_dt(field, policy, eos), cfg.t_end - t)
            if implicit:
                field, st = implicit_step(field, dt, cfg.stepper, ncfg, scheme,
                                          cfg.reconstruction, setup.bc, eos,
                                          setup.gravity, context=ctx)
                stats.merge(st)
            else:
                field = explicit_step(field, dt, cfg.stepper, scheme,
                                      cfg.reconstruction, setup.bc, eos, setup.gravity)
            t += dt
            step += 1
            diag = _diagnostics(field, eos, include_modes=True)
            series.append([t] + [diag[c] for c in cols[1:]])
            if step % cfg.output_every == 0:
                write_field_csv(out / f"field_{step:06d}.csv", field, eos)
    except Exception as exc:  # partial outputs still get flushed
        status, message = 1, f"{type(exc).__name__}: {exc}"

    _write_rows(out / "series.csv", cols, series)
    if status == 0 and step % cfg.output_every != 0:
        write_field_csv(out / f"field_{step:06d}.csv", field, eos)
    summary = {
        "status": message,
        "exit_code": status,
        "steps": step,
        "t_final": t,
        "wall_time_s": time.perf_counter() - wall0,
        "final": {k: diag[k] for k in cols[1:]},
        "newton": {
            "iterations": stats.newton_iters,
            "linear_iterations": stats.linear_iters,
            "solves": stats.solves,
            "max_iterations_per_solve": stats.max_iters_per_solve,
        },
    }
    with open(out / "run.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    if status != 0:
        print(f"run failed: {message}", file=sys.stderr)
    return status


# ---------------------------------------------------------------------------
# analysis sweeps
# ---------------------------------------------------------------------------

def analyze_stability(machs, schemes, gamma=1.4, beta_samples=1024):
    """(M, scheme, nu_max) using the Mach-parametrized family v = 1, c = 1/M."""
    eos = EquationOfState(gamma)
    rows = []
    for mach in machs:
        c = 1.0 / mach
        q = PrimitiveState(1.0, [1.0], c * c / eos.gamma)
        for kind in schemes:
            a_mat, d_mat = analysis.scheme_matrices_1d(FluxScheme(kind), q, eos)
            rep = analysis.max_stable_nu(a_mat, d_mat, beta_samples=beta_samples)
            rows.append((mach, kind, rep.nu_max))
    return rows


def analyze_mscan(machs, cfg: RunConfig, out: Path):
    """Vortex benchmark over a Mach list: (M, E_kin ratio, pressure fluctuation)."""
    rows = []
    for mach in machs:
        sub = out / f"M{mach:.0e}"
        params = dict(cfg.case_params)
        params["M"] = mach
        mcfg = RunConfig(case=cfg.case, case_params=params, scheme=cfg.scheme,
                         m_cut=cfg.m_cut, entropy_fix=cfg.entropy_fix,
                         reconstruction=cfg.reconstruction, stepper=cfg.stepper,
                         dt_policy=cfg.dt_policy, cfl=cfg.cfl, t_end=cfg.t_end,
                         output_every=cfg.output_every)
        code = run(mcfg, out_dir=str(sub))
        if code != 0:
            raise RuntimeError(f"mscan member M={mach:g} failed")
        data = np.genfromtxt(sub / "series.csv", delimiter=",", names=True)
        ratio = float(data["E_kin"][-1] / data["E_kin"][0])
        rows.append((mach, ratio, float(data["pressure_fluctuation"][-1])))
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="solver",
                                     description="All-Mach finite-volume Euler solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate a configured case")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("-o", "--output-dir", default=None)

    p_an = sub.add_parser("analyze", help="analysis sweeps emitting CSV tables")
    p_an.add_argument("subcommand", choices=["stability", "condition", "hydrostatic", "mscan"])
    p_an.add_argument("--mach", default="1e-2,1e-3,1e-4",
                      help="comma-separated Mach (or M_cut) list")
    p_an.add_argument("--schemes", default="roe,roe_miczek",
                      help="comma-separated scheme kinds")
    p_an.add_argument("--config", default=None, help="run config for mscan")
    p_an.add_argument("--grid", type=int, default=16, help="cells per axis (condition)")
    p_an.add_argument("-o", "--output-dir", default="out")

    args = parser.parse_args(argv)
    if args.command == "run":
        try:
            cfg = parse_config(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        return run(cfg, out_dir=args.output_dir)

    out = Path(os.environ.get("ALLMACH_OUTPUT_DIR") or args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    machs = [float(tok) for tok in args.mach.split(",") if tok]
    schemes = [tok.strip() for tok in args.schemes.split(",") if tok.strip()]
    if args.subcommand == "stability":
        rows = analyze_stability(machs, schemes)
        _write_rows(out / "stability.csv", ["M", "scheme", "nu_max"], rows)
    elif args.subcommand == "condition":
        rows = analysis.jacobian_condition_study(schemes, machs, n=args.grid)
        _write_rows(out / "condition.csv", ["M", "scheme", "kappa"], rows)
    elif args.subcommand == "hydrostatic":
        rows = analysis.hydrostatic_dissipation_study(machs, schemes=tuple(schemes))
        _write_rows(out / "hydrostatic.csv", ["M_cut", "scheme", "dissipation_norm"], rows)
    else:  # mscan
        if not args.config:
            print("mscan requires --config", file=sys.stderr)
            return 2
        try:
            cfg = parse_config(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        rows = analyze_mscan(machs, cfg, out)
        _write_rows(out / "mscan.csv", ["M", "ekin_ratio", "pressure_fluctuation"], rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
