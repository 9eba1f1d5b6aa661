"""Pure evaluation of the zero-dimensional Li-S cell model.

Differential dynamics f, algebraic constraints g, the output stack h, the
physical sub-expressions (Nernst potentials, Butler-Volmer overpotentials)
and their closed-form Jacobians.  All functions are stateless; invalid
states are rejected with :class:`DomainError` rather than clamped -- any
flooring policy lives in the simulator/estimator layers.

State conventions: x = (x1, x2, x3, x4) are the masses of S8^0, S4^2-, S^2-
and precipitated sulfur in grams; z = (i_H, i_L) are the two reaction
currents in amps; currents are positive during discharge.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import kernels
from .params import Params

__all__ = [
    "DomainError", "Potentials", "eval_f", "eval_g", "eval_h", "eval_nernst",
    "eval_butler_volmer_voltage", "eval_potentials", "jac_f", "jac_g",
    "jac_h", "check_differential_state", "check_algebraic_state",
    "conservation_weights",
]


class DomainError(ValueError):
    """A state violates the model's positivity domain."""


class Potentials(NamedTuple):
    E_H: float    # V
    E_L: float    # V
    eta_H: float  # V
    eta_L: float  # V
    V_cell: float  # V, E_H + eta_H


def check_differential_state(x) -> np.ndarray:
    """Validate (x1..x4) against the logarithm domain; returns float64 copy."""
    x = np.asarray(x, dtype=float)
    if x.shape != (4,):
        raise DomainError(f"differential state must have 4 entries, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("differential state must be finite")
    if x[0] <= 0 or x[1] <= 0 or x[2] <= 0:
        raise DomainError(f"x1, x2, x3 must be > 0, got {x.tolist()}")
    if x[3] < 0:
        raise DomainError(f"x4 must be >= 0, got {x[3]}")
    if x[2] + x[3] <= 0:
        raise DomainError("x3 + x4 must be > 0")
    return x


def check_algebraic_state(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (2,):
        raise DomainError(f"algebraic state must have 2 entries, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("algebraic state must be finite")
    return z


def eval_f(p: Params, x, z) -> np.ndarray:
    """Species mass balance, g/s."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    return kernels.eval_f(p.as_vector(), x, z)


def eval_nernst(p: Params, x) -> tuple[float, float]:
    """Equilibrium potentials (E_H, E_L), V."""
    x = check_differential_state(x)
    e_h, e_l = kernels.nernst(p.as_vector(), x)
    return float(e_h), float(e_l)


def eval_butler_volmer_voltage(p: Params, z) -> tuple[float, float]:
    """Overpotentials (eta_H, eta_L) from the reaction currents, V."""
    z = check_algebraic_state(z)
    eta_h, eta_l = kernels.surface_overpotentials(p.as_vector(), z)
    return float(eta_h), float(eta_l)


def eval_h(p: Params, x, z) -> np.ndarray:
    """Output stack (y1, y2): the terminal voltage through each branch, V."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    return kernels.eval_h(p.as_vector(), x, z)


def eval_g(p: Params, x, z, current: float) -> np.ndarray:
    """Constraint residual (current balance, branch-voltage agreement)."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    return kernels.eval_g(p.as_vector(), x, z, float(current))


def eval_potentials(p: Params, x, z) -> Potentials:
    e_h, e_l = eval_nernst(p, x)
    eta_h, eta_l = eval_butler_volmer_voltage(p, z)
    return Potentials(e_h, e_l, eta_h, eta_l, e_h + eta_h)


def jac_f(p: Params, x, z) -> tuple[np.ndarray, np.ndarray]:
    """(df/dx 4x4, df/dz 4x2)."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    pv = p.as_vector()
    return kernels.jac_f_x(pv, x, z), kernels.jac_f_z(pv)


def jac_g(p: Params, x, z) -> tuple[np.ndarray, np.ndarray]:
    """(dg/dx 2x4, dg/dz 2x2)."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    pv = p.as_vector()
    return kernels.jac_g_x(pv, x), kernels.jac_g_z(pv, z)


def jac_h(p: Params, x, z) -> tuple[np.ndarray, np.ndarray]:
    """(dh/dx 2x4, dh/dz 2x2)."""
    x = check_differential_state(x)
    z = check_algebraic_state(z)
    pv = p.as_vector()
    return kernels.jac_h_x(pv, x), kernels.jac_h_z(pv, z)


def conservation_weights() -> np.ndarray:
    """Weights w with w . f(x, z) = 0: the linear mass invariant."""
    return np.array([1.0, 1.0, 2.0, 2.0])
