"""Plant simulator: consistent initialization, Newton algebraic solves and
forward-Euler propagation of the semi-explicit index-1 DAE, plus synthesis of
noisy voltage measurements."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model import check_differential_state, check_algebraic_state
from .params import Params, ScenarioConfig

__all__ = [
    "AlgebraicSolveError", "SimOptions", "SimRecord", "SimResult",
    "solve_algebraic", "step", "simulate", "write_sim_csv", "SIM_CSV_HEADER",
]

SIM_CSV_HEADER = ["t", "x1", "x2", "x3", "x4", "iH", "iL", "V_true", "V_meas",
                  "I", "newton_iters", "g_res"]


class AlgebraicSolveError(RuntimeError):
    """Newton failed to solve the algebraic subsystem."""

    def __init__(self, msg: str, residual: float | None = None,
                 iterations: int | None = None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SimOptions:
    """Solver tolerances; defaults match the documented contract."""

    newton_tol: float = 1e-10   # inf-norm on (A, V) residual components
    max_iters: int = 50
    eps_mass: float = 1e-12     # g, depletion floor
    max_halvings: int = 30      # Newton damping
    conserve_mass_on_floor: bool = True  # take clamp deficit out of x2

    @classmethod
    def from_scenario(cls, sc: ScenarioConfig) -> "SimOptions":
        return cls(eps_mass=sc.eps_mass)


@dataclass(frozen=True)
class SimRecord:
    t: float               # s
    x: np.ndarray          # g, (4,)
    z: np.ndarray          # A, (2,)
    V_true: float          # V
    V_measured: float      # V
    I: float               # A
    newton_iters: int
    g_residual_norm: float


@dataclass
class SimResult:
    """Trajectory arrays; one row per emitted record (t = k * dt)."""

    t: np.ndarray          # (n,)
    X: np.ndarray          # (n, 4)
    Z: np.ndarray          # (n, 2)
    V_true: np.ndarray
    V_meas: np.ndarray
    I: np.ndarray
    newton_iters: np.ndarray
    g_res: np.ndarray
    truncated: bool = False
    truncated_at: float | None = None   # s, time of the failed step
    truncation_reason: str | None = None
    first_x1_floor_time: float | None = None  # s, first clamp of x1
    n_floor_events: int = 0

    def __len__(self) -> int:
        return self.t.shape[0]

    def records(self) -> list[SimRecord]:
        return [
            SimRecord(float(self.t[k]), self.X[k].copy(), self.Z[k].copy(),
                      float(self.V_true[k]), float(self.V_meas[k]),
                      float(self.I[k]), int(self.newton_iters[k]),
                      float(self.g_res[k]))
            for k in range(len(self))
        ]


def solve_algebraic(p: Params, x, current: float, z_guess,
                    opts: SimOptions | None = None) -> np.ndarray:
    """Solve g(x, z, I) = 0 for z with damped Newton, warm-started at z_guess."""
    opts = opts or SimOptions()
    x = check_differential_state(x)
    z_guess = check_algebraic_state(z_guess)
    z, iters, res, status = kernels.newton_algebraic(
        p.as_vector(), x, float(current), z_guess, opts.newton_tol,
        opts.max_iters, opts.max_halvings)
    if status == kernels.STATUS_SINGULAR_JACOBIAN:
        raise AlgebraicSolveError(
            "singular dg/dz in Newton solve (index-1 assumption violated)",
            residual=float(res), iterations=int(iters))
    if status != kernels.STATUS_OK:
        raise AlgebraicSolveError(
            f"algebraic solve did not converge after {iters} iterations "
            f"(last residual {res:.3e})", residual=float(res),
            iterations=int(iters))
    return z


def step(p: Params, rec: SimRecord, I_next: float, dt: float,
         opts: SimOptions | None = None) -> SimRecord:
    """Advance one forward-Euler step and re-solve the constraint."""
    opts = opts or SimOptions()
    f = kernels.eval_f(p.as_vector(), rec.x, rec.z)
    x_next = rec.x + dt * f
    kernels.floor_masses(x_next, opts.eps_mass, opts.conserve_mass_on_floor)
    z_next = solve_algebraic(p, x_next, I_next, rec.z, opts)
    g = kernels.eval_g(p.as_vector(), x_next, z_next, float(I_next))
    y = kernels.eval_h(p.as_vector(), x_next, z_next)
    return SimRecord(rec.t + dt, x_next, z_next, float(y[0]), float(y[0]),
                     float(I_next), 0, float(np.max(np.abs(g))))


def simulate(p: Params, sc: ScenarioConfig,
             opts: SimOptions | None = None) -> SimResult:
    """Run the scenario; returns ceil(t_end/dt) + 1 records unless truncated.

    V_meas = V_true + w_k with w_k ~ N(0, sc.noise_variance), seeded by
    sc.rng_seed; identical seeds give bit-identical sequences.  If Newton
    fails (species depletion at full discharge) the trajectory is truncated
    at the last consistent record and flagged.
    """
    opts = opts or SimOptions.from_scenario(sc)
    n = sc.n_steps()
    currents = sc.current_steps()
    rng = np.random.default_rng(sc.rng_seed)
    if sc.noise_variance > 0:
        meas_noise = rng.normal(0.0, np.sqrt(sc.noise_variance), n + 1)
    else:
        meas_noise = np.zeros(n + 1)
    if sc.process_noise_variance > 0:
        proc_noise = rng.normal(0.0, np.sqrt(sc.process_noise_variance),
                                (n, 4))
    else:
        proc_noise = np.zeros((0, 4))

    x0 = check_differential_state(np.array(sc.x0_plant))
    z0 = check_algebraic_state(np.array(sc.z0_plant))
    (X, Z, v_true, v_meas, iters, res, n_done, first_floor, n_floor,
     status) = kernels.sim_loop(
        p.as_vector(), x0, z0, currents, sc.dt, n, opts.eps_mass,
        opts.conserve_mass_on_floor, opts.newton_tol, opts.max_iters,
        opts.max_halvings, meas_noise, proc_noise)

    if status != kernels.STATUS_OK and n_done < 0:
        raise AlgebraicSolveError(
            "consistent initialization failed: algebraic solve at t = 0 did "
            "not converge")

    last = n_done + 1
    t = np.arange(last) * sc.dt
    result = SimResult(
        t=t, X=X[:last], Z=Z[:last], V_true=v_true[:last],
        V_meas=v_meas[:last], I=currents[:last],
        newton_iters=iters[:last], g_res=res[:last],
        n_floor_events=int(n_floor))
    if first_floor >= 0 and first_floor <= n_done:
        result.first_x1_floor_time = float(first_floor * sc.dt)
    if status != kernels.STATUS_OK:
        result.truncated = True
        result.truncated_at = float((n_done + 1) * sc.dt)
        reason = ("algebraic solve no longer converges (cell fully "
                  f"discharged); trajectory truncated at t = "
                  f"{result.truncated_at:g} s")
        result.truncation_reason = reason
    return result


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_sim_csv(result: SimResult, path) -> None:
    """Emit the trajectory as CSV (full round-trip-exact precision)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_CSV_HEADER)
        for k in range(len(result)):
            w.writerow([
                _fmt(result.t[k]),
                _fmt(result.X[k, 0]), _fmt(result.X[k, 1]),
                _fmt(result.X[k, 2]), _fmt(result.X[k, 3]),
                _fmt(result.Z[k, 0]), _fmt(result.Z[k, 1]),
                _fmt(result.V_true[k]), _fmt(result.V_meas[k]),
                _fmt(result.I[k]),
                str(int(result.newton_iters[k])),
                _fmt(result.g_res[k]),
            ])
