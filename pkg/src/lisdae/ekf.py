"""Extended Kalman filter for the semi-explicit index-1 DAE.

Each step performs, in one combined update: gain computation from the
current covariance, forward-Euler prediction with output-error injection,
covariance recursion, mass flooring, and a Newton consistency solve for the
algebraic estimate.  The measurement enters as the duplicated vector
(V, V) against the two-row output stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .dae_sim import AlgebraicSolveError
from .model import check_differential_state, check_algebraic_state
from .params import Params, ScenarioConfig

__all__ = [
    "AlignmentError", "EstimatorConfig", "EstimatorState", "EstimatorRun",
    "init", "step", "run", "write_ekf_csv", "EKF_CSV_HEADER",
]

EKF_CSV_HEADER = ["t", "x1_hat", "x2_hat", "x3_hat", "x4_hat", "iH_hat",
                  "iL_hat", "V_pred", "innov1", "innov2", "P11", "P22",
                  "P33", "P44", "g_res"]


class AlignmentError(ValueError):
    """Measurement sequence is not aligned with the estimator time step."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Filter tuning and solver options."""

    P0: tuple[float, ...]            # diagonal, 4 entries
    Q: tuple[float, ...]             # diagonal, 4 entries
    R: tuple[float, ...]             # diagonal, 2 entries
    dt: float                        # s
    jacobian_mode: str = "discrete"  # "discrete": F = I + dt df/dx;
                                     # "paper-literal": F = df/dx
    h_mode: str = "explicit"         # "explicit": H = dh/dx;
                                     # "total-derivative": adds implicit dz/dx term
    eps_mass: float = 1e-12          # g
    newton_tol: float = 1e-10
    max_iters: int = 50
    max_halvings: int = 30
    gain_scale: float = 1.0          # test hook; 0 disables correction

    def __post_init__(self):
        if len(self.P0) != 4 or len(self.Q) != 4 or len(self.R) != 2:
            raise ValueError("P0/Q need 4 diagonal entries, R needs 2")
        if any(v < 0 for v in (*self.P0, *self.Q, *self.R)):
            raise ValueError("covariance diagonals must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.jacobian_mode not in ("discrete", "paper-literal"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.h_mode not in ("explicit", "total-derivative"):
            raise ValueError(f"unknown h_mode {self.h_mode!r}")

    @classmethod
    def from_scenario(cls, sc: ScenarioConfig, **overrides) -> "EstimatorConfig":
        kw = dict(P0=sc.P0, Q=sc.Q, R=sc.R, dt=sc.dt, eps_mass=sc.eps_mass,
                  jacobian_mode=sc.jacobian_mode)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class EstimatorState:
    t: float
    x_hat: np.ndarray      # (4,), g
    z_hat: np.ndarray      # (2,), A, consistent with the constraint
    P: np.ndarray          # (4, 4), symmetric PSD
    K: np.ndarray          # (4, 2), last gain
    innovation: np.ndarray  # (2,), V, last output error
    g_residual_norm: float = 0.0
    newton_iters: int = 0


@dataclass
class EstimatorRun:
    """Filter trajectory; row k corresponds to t = t0 + k * dt."""

    t: np.ndarray
    X_hat: np.ndarray      # (n, 4)
    Z_hat: np.ndarray      # (n, 2)
    P: np.ndarray          # (n, 4, 4)
    K: np.ndarray          # (n, 4, 2)
    innovation: np.ndarray  # (n, 2)
    V_pred: np.ndarray     # (n,), h1 at the pre-update state
    newton_iters: np.ndarray
    g_res: np.ndarray
    errors: np.ndarray | None = None   # (n, 4) vs truth when supplied

    def __len__(self) -> int:
        return self.t.shape[0]

    def states(self) -> list[EstimatorState]:
        return [
            EstimatorState(float(self.t[k]), self.X_hat[k].copy(),
                           self.Z_hat[k].copy(), self.P[k].copy(),
                           self.K[k].copy(), self.innovation[k].copy(),
                           float(self.g_res[k]), int(self.newton_iters[k]))
            for k in range(len(self))
        ]


def _p_matrices(cfg: EstimatorConfig):
    return (np.diag(np.asarray(cfg.P0, dtype=float)),
            np.diag(np.asarray(cfg.Q, dtype=float)),
            np.diag(np.asarray(cfg.R, dtype=float)))


def init(cfg: EstimatorConfig, p: Params, x0_hat, I0: float,
         z_guess=None, t0: float = 0.0) -> EstimatorState:
    """Consistent initialization: solve g(x0_hat, z_hat, I0) = 0, P = P0."""
    x0_hat = check_differential_state(x0_hat)
    if z_guess is None:
        z_guess = np.array([I0, 0.0])
    z_guess = check_algebraic_state(z_guess)
    x = x0_hat.copy()
    kernels.floor_masses(x, cfg.eps_mass, False)
    z, iters, res, status = kernels.newton_algebraic(
        p.as_vector(), x, float(I0), z_guess, cfg.newton_tol, cfg.max_iters,
        cfg.max_halvings)
    if status != kernels.STATUS_OK:
        raise AlgebraicSolveError(
            f"estimator initialization: algebraic solve failed "
            f"(residual {res:.3e})", residual=float(res), iterations=int(iters))
    P0, _, _ = _p_matrices(cfg)
    return EstimatorState(t0, x, z, P0, np.zeros((4, 2)), np.zeros(2),
                          float(res), int(iters))


def step(cfg: EstimatorConfig, p: Params, est: EstimatorState,
         y_meas: float, I: float, I_next: float | None = None) -> EstimatorState:
    """One combined EKF step consuming the measurement at est.t."""
    if not np.isfinite(y_meas):
        raise ValueError("measurement must be finite")
    _, Q, R = _p_matrices(cfg)
    if I_next is None:
        I_next = I
    x_next, z_next, P_next, K, innov, _, iters, res, status = \
        kernels.ekf_step_core(
            p.as_vector(), est.x_hat, est.z_hat, est.P, Q, R, cfg.dt,
            float(y_meas), float(I_next), cfg.eps_mass, cfg.newton_tol,
            cfg.max_iters, cfg.max_halvings,
            cfg.jacobian_mode == "discrete",
            cfg.h_mode == "total-derivative", cfg.gain_scale)
    if status == kernels.STATUS_SINGULAR_INNOVATION:
        raise AlgebraicSolveError("innovation covariance numerically singular")
    if status != kernels.STATUS_OK:
        raise AlgebraicSolveError(
            f"estimator consistency solve failed at t = {est.t:g} s "
            f"(residual {res:.3e})", residual=float(res), iterations=int(iters))
    return EstimatorState(est.t + cfg.dt, x_next, z_next, P_next, K, innov,
                          float(res), int(iters))


def run(cfg: EstimatorConfig, p: Params, measurements, x0_hat,
        z_guess=None, truth=None) -> EstimatorRun:
    """Filter a whole measurement sequence.

    measurements: array-like of shape (n, 3) with columns (t, V, I), or a
    tuple of three arrays; must be uniformly sampled at cfg.dt starting at
    the initial time.  Returns n + 1 records (initialization plus one per
    measurement).  ``truth`` is an optional (n + 1, 4) state trajectory used
    to fill per-step estimation errors.
    """
    if isinstance(measurements, tuple):
        t_seq, v_seq, i_seq = (np.asarray(a, dtype=float) for a in measurements)
    else:
        m = np.asarray(measurements, dtype=float)
        if m.ndim != 2 or m.shape[1] != 3:
            raise AlignmentError("measurements must have columns (t, V, I)")
        t_seq, v_seq, i_seq = m[:, 0], m[:, 1], m[:, 2]
    n = t_seq.shape[0]
    if n < 1:
        raise AlignmentError("empty measurement sequence")
    if n > 1:
        dts = np.diff(t_seq)
        if not np.allclose(dts, cfg.dt, rtol=0.0, atol=1e-9 * max(1.0, cfg.dt)):
            raise AlignmentError(
                f"measurement spacing does not match estimator dt = {cfg.dt:g} s")

    x0_hat = check_differential_state(x0_hat)
    if z_guess is None:
        z_guess = np.array([i_seq[0], 0.0])
    z_guess = check_algebraic_state(z_guess)
    P0, Q, R = _p_matrices(cfg)

    (XH, ZH, PH, KH, innov, ypred, iters, res, n_done, status) = \
        kernels.ekf_loop(
            p.as_vector(), x0_hat, z_guess, P0, Q, R, cfg.dt, v_seq, i_seq,
            cfg.eps_mass, cfg.newton_tol, cfg.max_iters, cfg.max_halvings,
            cfg.jacobian_mode == "discrete",
            cfg.h_mode == "total-derivative", cfg.gain_scale)
    if n_done < 0:
        raise AlgebraicSolveError(
            "estimator initialization: algebraic solve failed")
    if status != kernels.STATUS_OK:
        raise AlgebraicSolveError(
            f"estimator failed at t = {t_seq[0] + (n_done + 1) * cfg.dt:g} s "
            "(algebraic solve or innovation covariance)")

    last = n_done + 1
    t = t_seq[0] + np.arange(last) * cfg.dt
    result = EstimatorRun(
        t=t, X_hat=XH[:last], Z_hat=ZH[:last], P=PH[:last], K=KH[:last],
        innovation=innov[:last], V_pred=ypred[:last, 0],
        newton_iters=iters[:last], g_res=res[:last])
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        m = min(last, truth.shape[0])
        errors = np.full((last, 4), np.nan)
        errors[:m] = result.X_hat[:m] - truth[:m]
        result.errors = errors
    return result


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_ekf_csv(result: EstimatorRun, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EKF_CSV_HEADER)
        for k in range(len(result)):
            w.writerow([
                _fmt(result.t[k]),
                _fmt(result.X_hat[k, 0]), _fmt(result.X_hat[k, 1]),
                _fmt(result.X_hat[k, 2]), _fmt(result.X_hat[k, 3]),
                _fmt(result.Z_hat[k, 0]), _fmt(result.Z_hat[k, 1]),
                _fmt(result.V_pred[k]),
                _fmt(result.innovation[k, 0]), _fmt(result.innovation[k, 1]),
                _fmt(result.P[k, 0, 0]), _fmt(result.P[k, 1, 1]),
                _fmt(result.P[k, 2, 2]), _fmt(result.P[k, 3, 3]),
                _fmt(result.g_res[k]),
            ])
