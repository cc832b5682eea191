"""Run configuration: line-based key = value files with [section] headers.

Unknown keys are errors (fail-closed); sections are optional flattened
prefixes, so ``[time]\\ncfl = 0.8`` and a bare ``cfl = 0.8`` both address
the same key.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

from allmach.cases import CASES
from allmach.flux import SCHEME_KINDS
from allmach.reconstruction import RECON_MODES
from allmach.stepping import EXPLICIT_STEPPERS, IMPLICIT_STEPPERS

__all__ = ["RunConfig", "ParseError", "ValidationError", "parse_config"]


class ParseError(ValueError):
    """Malformed config text; carries the offending line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ValidationError(ValueError):
    """A config key failed validation; carries the key name."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


#: case-specific parameter keys forwarded to the case builders
_CASE_PARAM_KEYS = ("M", "mach_scale", "p0", "rho0", "g", "T", "nx", "ny", "nz", "gamma")


@dataclass
class RunConfig:
    """Validated solver run description."""

    case: str
    case_params: dict = dataclass_field(default_factory=dict)
    scheme: str = "roe_miczek"
    m_cut: float = 0.0  # 0 selects the scheme default
    entropy_fix: float = 0.0
    reconstruction: str = "linear"
    stepper: str = "backward_euler"
    dt_policy: str = "advective"
    cfl: float = 0.8
    dt_fixed: float | None = None
    mach_scaled_dt: bool = False
    t_end: float = 1.0
    max_steps: int = 10_000_000
    output_every: int = 1_000_000  # field dumps; the final step always dumps
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    newton_tol_rel: float = 1e-8
    newton_tol_abs: float = 1e-12
    newton_max_iters: int = 20
    linear_tol: float = 1e-4
    jacobian_mode: str = "matrix_free"


_FLOAT_KEYS = {
    "m_cut", "entropy_fix", "cfl", "dt_fixed", "t_end",
    "newton_tol_rel", "newton_tol_abs", "linear_tol",
}
_INT_KEYS = {"max_steps", "output_every", "seed", "threads", "newton_max_iters"}
_BOOL_KEYS = {"mach_scaled_dt"}
_STR_KEYS = {"case", "scheme", "reconstruction", "stepper", "dt_policy",
             "output_dir", "jacobian_mode"}
_KNOWN = _FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS | _STR_KEYS | set(_CASE_PARAM_KEYS)

_CASE_FLOAT = {"M", "mach_scale", "p0", "rho0", "g", "T", "gamma"}
_CASE_INT = {"nx", "ny", "nz"}


def _parse_bool(key, raw):
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValidationError(key, f"expected a boolean, got {raw!r}")


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text into a RunConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(lineno, "unterminated section header")
            continue  # sections are organizational only; keys stay flat
        if "=" not in line:
            raise ParseError(lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ParseError(lineno, "empty key or value")
        if key in values:
            raise ParseError(lineno, f"duplicate key {key!r}")
        values[key] = val

    unknown = sorted(set(values) - _KNOWN)
    if unknown:
        raise ValidationError(unknown[0], "unknown key")
    if "case" not in values:
        raise ValidationError("case", "required key missing")

    cfg = RunConfig(case=values.pop("case"))
    if cfg.case not in CASES:
        raise ValidationError("case", f"unknown case {cfg.case!r} (have {sorted(CASES)})")
    for key, raw in values.items():
        if key in _CASE_PARAM_KEYS:
            conv = float if key in _CASE_FLOAT else int
            try:
                cfg.case_params[key] = conv(raw)
            except ValueError:
                raise ValidationError(key, f"expected {conv.__name__}, got {raw!r}") from None
            continue
        if key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(raw))
            except ValueError:
                raise ValidationError(key, f"expected float, got {raw!r}") from None
        elif key in _INT_KEYS:
            try:
                setattr(cfg, key, int(raw))
            except ValueError:
                raise ValidationError(key, f"expected int, got {raw!r}") from None
        elif key in _BOOL_KEYS:
            setattr(cfg, key, _parse_bool(key, raw))
        else:
            setattr(cfg, key, raw)

    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.scheme not in SCHEME_KINDS:
        raise ValidationError("scheme", f"unknown scheme {cfg.scheme!r}")
    if cfg.reconstruction not in RECON_MODES:
        raise ValidationError("reconstruction", f"unknown mode {cfg.reconstruction!r}")
    if cfg.stepper not in EXPLICIT_STEPPERS + IMPLICIT_STEPPERS:
        raise ValidationError("stepper", f"unknown stepper {cfg.stepper!r}")
    if cfg.dt_policy not in ("acoustic", "advective", "fixed"):
        raise ValidationError("dt_policy", f"unknown policy {cfg.dt_policy!r}")
    if cfg.jacobian_mode not in ("matrix_free", "colored_fd", "dense_fd"):
        raise ValidationError("jacobian_mode", f"unknown mode {cfg.jacobian_mode!r}")
    if not cfg.t_end > 0.0:
        raise ValidationError("t_end", "must be > 0")
    if not cfg.cfl > 0.0:
        raise ValidationError("cfl", "must be > 0")
    if cfg.m_cut < 0.0:
        raise ValidationError("m_cut", "must be >= 0")
    if cfg.entropy_fix < 0.0:
        raise ValidationError("entropy_fix", "must be >= 0")
    if cfg.output_every < 1:
        raise ValidationError("output_every", "must be >= 1")
    if cfg.max_steps < 1:
        raise ValidationError("max_steps", "must be >= 1")
    if cfg.threads < 1:
        raise ValidationError("threads", "must be >= 1")
    if cfg.dt_policy == "fixed" and not (cfg.dt_fixed and cfg.dt_fixed > 0.0):
        raise ValidationError("dt_fixed", "fixed policy needs dt_fixed > 0")
    for bad in ("newton_tol_rel", "newton_tol_abs", "linear_tol"):
        if not getattr(cfg, bad) > 0.0:
            raise ValidationError(bad, "must be > 0")
    if cfg.newton_max_iters < 1:
        raise ValidationError("newton_max_iters", "must be >= 1")
