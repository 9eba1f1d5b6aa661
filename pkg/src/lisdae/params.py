"""Model constants and scenario definitions.

Both kinds of configuration live in flat ``key = value`` text files so that
parameter provenance stays reviewable and diff-able.  Values are numbers or
JSON-style lists; ``#`` starts a comment.  Keys follow the conventional
symbol names of the zero-dimensional Li-S model (Marinescu, Zhang & Offer,
Phys. Chem. Chem. Phys. 18, 584, 2016).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields, asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .kernels import PARAM_FIELDS, PVEC_LEN

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError", "ValidationError", "Params", "ScenarioConfig",
    "load_params", "load_scenario", "save_params", "save_scenario",
    "validate_params", "reference_params_path", "reference_scenario_path",
]


class ConfigError(ValueError):
    """A configuration file could not be parsed."""


class ValidationError(ValueError):
    """A parsed configuration violates a documented constraint."""


@dataclass(frozen=True)
class Params:
    """Constants of the zero-dimensional Li-S cell model (units as noted)."""

    M_S8: float    # g/mol, molar mass per sulfur atom (n_i * M_S8 = species molar mass)
    n_S8: float    # S atoms in S8^0
    n_S4: float    # S atoms in S4^2-
    n_S2: float    # S atoms in S2^2- (stored; eliminated state, unused in equations)
    n_S: float     # S atoms in S^2-
    n_e: float     # electrons per reaction
    F: float       # C/mol, Faraday constant
    R_gas: float   # J/(K mol), gas constant
    T: float       # K, cell temperature
    rho_S: float   # g/L, density of precipitated sulfur
    k_s: float     # 1/s, shuttle constant
    k_p: float     # 1/s, precipitation rate
    S_star: float  # g, S^2- saturation mass
    E_H0: float    # V, standard potential, high plateau
    E_L0: float    # V, standard potential, low plateau
    i_H0: float    # A/m^2, exchange current density, high plateau
    i_L0: float    # A/m^2, exchange current density, low plateau
    f_H: float     # g L/mol, dimensionality factor, high plateau
    f_L: float     # g^2 L^2/mol, dimensionality factor, low plateau
    a_r: float     # m^2, active reaction area
    v: float       # L, electrolyte volume per cell

    def as_vector(self) -> np.ndarray:
        """Flat float64 vector in the layout expected by lisdae.kernels."""
        vec = np.empty(PVEC_LEN)
        for i, name in enumerate(PARAM_FIELDS):
            vec[i] = getattr(self, name)
        return vec


assert tuple(f.name for f in fields(Params)) == PARAM_FIELDS


@dataclass(frozen=True)
class ScenarioConfig:
    """A complete simulation/estimation scenario.

    ``I_applied`` is a piecewise-constant schedule of (t_start s, amps)
    pairs; covariance entries are the diagonals of P0 (4), Q (4) and R (2).
    """

    I_applied: tuple[tuple[float, float], ...]
    t_end: float                 # s
    dt: float                    # s
    noise_variance: float        # V^2, measurement noise
    rng_seed: int
    x0_plant: tuple[float, ...]      # g, (x1..x4)
    z0_plant: tuple[float, ...]      # A, (i_H, i_L) solver starting guess
    x0_estimator: tuple[float, ...]  # g
    z0_estimator: tuple[float, ...]  # A, solver starting guess
    P0: tuple[float, ...]
    Q: tuple[float, ...]
    R: tuple[float, ...]
    eps_mass: float = 1e-12          # g, depletion floor
    process_noise_variance: float = 0.0  # g^2, optional plant process noise
    jacobian_mode: str = "discrete"      # "discrete" | "paper-literal"

    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt))

    def current_at(self, t: float) -> float:
        cur = self.I_applied[0][1]
        for t_start, amps in self.I_applied:
            if t >= t_start - 1e-12:
                cur = amps
            else:
                break
        return cur

    def current_steps(self) -> np.ndarray:
        """Per-record applied current over the sampling grid."""
        n = self.n_steps()
        t = np.arange(n + 1) * self.dt
        out = np.empty(n + 1)
        for k in range(n + 1):
            out[k] = self.current_at(t[k])
        return out


def _parse_kv_file(path: Path) -> dict:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(val, path, lineno)
    return out


def _parse_value(s: str, path: Path, lineno: int):
    if s.startswith("["):
        try:
            return json.loads(s)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: bad list value: {exc}") from exc
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    # bare word (e.g. jacobian_mode = discrete)
    return s


def _require_number(data: dict, key: str, context: str) -> float:
    if key not in data:
        raise ValidationError(f"{context}: missing required key {key!r}")
    val = data[key]
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ValidationError(f"{context}: {key} must be a number, got {val!r}")
    val = float(val)
    if not math.isfinite(val):
        raise ValidationError(f"{context}: {key} must be finite")
    return val


def _require_vector(data: dict, key: str, length: int, context: str) -> tuple:
    if key not in data:
        raise ValidationError(f"{context}: missing required key {key!r}")
    val = data[key]
    if not isinstance(val, list) or len(val) != length:
        raise ValidationError(
            f"{context}: {key} must be a list of {length} numbers")
    try:
        vec = tuple(float(x) for x in val)
    except (TypeError, ValueError):
        raise ValidationError(f"{context}: {key} entries must be numbers")
    if not all(math.isfinite(x) for x in vec):
        raise ValidationError(f"{context}: {key} entries must be finite")
    return vec


def validate_params(p: Params) -> list[str]:
    """Check Params invariants; returns advisory notes, raises on violation."""
    positive_fields = [f.name for f in fields(Params)
                       if f.name not in ("E_H0", "E_L0")]
    for name in positive_fields:
        val = getattr(p, name)
        if not (val > 0.0) or not math.isfinite(val):
            raise ValidationError(f"{name} must be strictly positive, got {val!r}")
    for name in ("E_H0", "E_L0"):
        if not math.isfinite(getattr(p, name)):
            raise ValidationError(f"{name} must be finite")
    if not p.E_H0 > p.E_L0:
        raise ValidationError("E_H0 > E_L0 violated")
    notes = ["n_S2: stored but unused (the S2^2- state is eliminated by mass "
             "conservation)"]
    return notes


def load_params(path) -> Params:
    """Load and validate a parameter file."""
    path = Path(path)
    data = _parse_kv_file(path)
    kwargs = {}
    for name in PARAM_FIELDS:
        kwargs[name] = _require_number(data, name, str(path))
    unknown = set(data) - set(PARAM_FIELDS)
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    p = Params(**kwargs)
    for note in validate_params(p):
        log.info("%s: %s", path, note)
    return p


_SCENARIO_SCALARS = ("t_end", "dt", "noise_variance")
_SCENARIO_OPTIONAL = ("eps_mass", "process_noise_variance", "jacobian_mode")


def load_scenario(path) -> ScenarioConfig:
    """Load and validate a scenario file."""
    path = Path(path)
    data = _parse_kv_file(path)
    ctx = str(path)

    if "I_applied" not in data or not isinstance(data["I_applied"], list) \
            or not data["I_applied"]:
        raise ValidationError(f"{ctx}: I_applied must be a non-empty list of "
                              "[t_start, amps] pairs")
    profile = []
    for entry in data["I_applied"]:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ValidationError(f"{ctx}: I_applied entries must be "
                                  "[t_start, amps] pairs")
        profile.append((float(entry[0]), float(entry[1])))
    if any(b[0] <= a[0] for a, b in zip(profile, profile[1:])):
        raise ValidationError(f"{ctx}: I_applied t_start values must be "
                              "strictly increasing")
    if profile[0][0] != 0.0:
        raise ValidationError(f"{ctx}: I_applied must start at t = 0")

    t_end = _require_number(data, "t_end", ctx)
    dt = _require_number(data, "dt", ctx)
    noise_variance = _require_number(data, "noise_variance", ctx)
    if not dt > 0.0:
        raise ValidationError(f"{ctx}: dt must be > 0")
    if t_end < dt:
        raise ValidationError(f"{ctx}: t_end must be >= dt")
    if noise_variance < 0.0:
        raise ValidationError(f"{ctx}: noise_variance must be >= 0")

    if "rng_seed" not in data or not isinstance(data["rng_seed"], int) \
            or isinstance(data["rng_seed"], bool):
        raise ValidationError(f"{ctx}: rng_seed must be an integer")
    rng_seed = data["rng_seed"]

    x0_plant = _require_vector(data, "x0_plant", 4, ctx)
    z0_plant = _require_vector(data, "z0_plant", 2, ctx)
    x0_estimator = _require_vector(data, "x0_estimator", 4, ctx)
    z0_estimator = _require_vector(data, "z0_estimator", 2, ctx)
    for name, vec in (("x0_plant", x0_plant), ("x0_estimator", x0_estimator)):
        if not (vec[0] > 0 and vec[1] > 0 and vec[2] > 0):
            raise ValidationError(f"{ctx}: {name}: x1, x2, x3 must be > 0")
        if vec[3] < 0:
            raise ValidationError(f"{ctx}: {name}: x4 must be >= 0")

    P0 = _require_vector(data, "P0", 4, ctx)
    Q = _require_vector(data, "Q", 4, ctx)
    R = _require_vector(data, "R", 2, ctx)
    for name, vec in (("P0", P0), ("Q", Q), ("R", R)):
        if any(x < 0 for x in vec):
            raise ValidationError(f"{ctx}: {name} entries must be >= 0")

    eps_mass = float(data.get("eps_mass", 1e-12))
    if not eps_mass > 0:
        raise ValidationError(f"{ctx}: eps_mass must be > 0")
    process_noise_variance = float(data.get("process_noise_variance", 0.0))
    if process_noise_variance < 0:
        raise ValidationError(f"{ctx}: process_noise_variance must be >= 0")
    jacobian_mode = str(data.get("jacobian_mode", "discrete"))
    if jacobian_mode not in ("discrete", "paper-literal"):
        raise ValidationError(f"{ctx}: jacobian_mode must be 'discrete' or "
                              "'paper-literal'")

    known = set(_SCENARIO_SCALARS) | set(_SCENARIO_OPTIONAL) | {
        "I_applied", "rng_seed", "x0_plant", "z0_plant", "x0_estimator",
        "z0_estimator", "P0", "Q", "R"}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{ctx}: unknown keys {sorted(unknown)}")

    return ScenarioConfig(
        I_applied=tuple(profile), t_end=t_end, dt=dt,
        noise_variance=noise_variance, rng_seed=rng_seed,
        x0_plant=x0_plant, z0_plant=z0_plant, x0_estimator=x0_estimator,
        z0_estimator=z0_estimator, P0=P0, Q=Q, R=R, eps_mass=eps_mass,
        process_noise_variance=process_noise_variance,
        jacobian_mode=jacobian_mode)


def _format_value(val) -> str:
    if isinstance(val, str):
        return val
    if isinstance(val, bool):
        raise TypeError("booleans are not valid config values")
    if isinstance(val, int):
        return str(val)
    if isinstance(val, float):
        return format(val, ".17g")
    if isinstance(val, (list, tuple)):
        inner = ", ".join(_format_value(v) for v in val)
        return f"[{inner}]"
    raise TypeError(f"cannot serialize {val!r}")


def save_params(p: Params, path) -> None:
    lines = [f"{name} = {_format_value(getattr(p, name))}"
             for name in PARAM_FIELDS]
    Path(path).write_text("\n".join(lines) + "\n")


def save_scenario(sc: ScenarioConfig, path) -> None:
    data = asdict(sc)
    lines = []
    lines.append("I_applied = " + _format_value(
        [list(pair) for pair in sc.I_applied]))
    for key in ("t_end", "dt", "noise_variance", "rng_seed"):
        lines.append(f"{key} = {_format_value(data[key])}")
    for key in ("x0_plant", "z0_plant", "x0_estimator", "z0_estimator",
                "P0", "Q", "R"):
        lines.append(f"{key} = {_format_value(list(data[key]))}")
    for key in _SCENARIO_OPTIONAL:
        lines.append(f"{key} = {_format_value(data[key])}")
    Path(path).write_text("\n".join(lines) + "\n")


def reference_params_path() -> Path:
    """Path of the packaged reference parameter file."""
    return Path(resources.files("lisdae").joinpath("data/reference_params.txt"))


def reference_scenario_path() -> Path:
    """Path of the packaged constant-current discharge scenario."""
    return Path(resources.files("lisdae").joinpath("data/reference_scenario.txt"))
