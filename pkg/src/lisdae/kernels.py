"""Hot numeric kernels for the Li-S cell DAE.

Everything in this module operates on plain float64 arrays so the same code
can run either through numba's @njit or as ordinary numpy.  The fallback is
selected at import time by the environment variable ``LISDAE_DISABLE_NUMBA``
(set to ``1``/``true`` to force the pure-numpy path, e.g. for debugging or on
platforms without numba).  ``benchmarks/bench_kernels.py`` compares the two.

Model parameters travel through the kernels as a flat vector (``pvec``) using
the index constants below; :meth:`lisdae.params.Params.as_vector` builds it.
Kernels assume their inputs already satisfy the positivity invariants -- the
wrapper layer in :mod:`lisdae.model` is responsible for rejecting bad states.
"""

from __future__ import annotations

import math
import os

import numpy as np

NUMBA_ENV_FLAG = "LISDAE_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(NUMBA_ENV_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


if _numba_disabled():
    NUMBA_ENABLED = False
else:
    try:
        from numba import njit as _numba_njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def njit(func):
        return _numba_njit(cache=True)(func)
else:
    def njit(func):
        return func


# pvec layout; order must match PARAM_FIELDS.
P_M_S8 = 0
P_N_S8 = 1
P_N_S4 = 2
P_N_S2 = 3
P_N_S = 4
P_N_E = 5
P_F = 6
P_R_GAS = 7
P_T = 8
P_RHO_S = 9
P_K_S = 10
P_K_P = 11
P_S_STAR = 12
P_E_H0 = 13
P_E_L0 = 14
P_I_H0 = 15
P_I_L0 = 16
P_F_H = 17
P_F_L = 18
P_A_R = 19
P_V = 20
PVEC_LEN = 21

PARAM_FIELDS = (
    "M_S8", "n_S8", "n_S4", "n_S2", "n_S", "n_e", "F", "R_gas", "T",
    "rho_S", "k_s", "k_p", "S_star", "E_H0", "E_L0", "i_H0", "i_L0",
    "f_H", "f_L", "a_r", "v",
)

# status codes shared by the Newton solver and the simulation/estimation loops
STATUS_OK = 0
STATUS_NO_CONVERGENCE = 1
STATUS_SINGULAR_JACOBIAN = 2
STATUS_SINGULAR_INNOVATION = 3


# exponent of x2 in the low-plateau Nernst numerator (calibration knob,
# frozen before release)
EL_X2_POWER = 2.0


@njit
def nernst(pv, x):
    """Equilibrium potentials (E_H, E_L) in volts."""
    kn = pv[P_R_GAS] * pv[P_T] / (4.0 * pv[P_F])
    e_h = pv[P_E_H0] + kn * math.log(pv[P_F_H] * x[0] / (x[1] * x[1]))
    e_l = pv[P_E_L0] + kn * math.log(
        pv[P_F_L] * x[1] ** EL_X2_POWER / (x[2] * x[2] * (x[2] + x[3]))
    )
    return e_h, e_l


@njit
def surface_overpotentials(pv, z):
    """Overpotentials (eta_H, eta_L) from the reaction currents, in volts."""
    kb = 2.0 * pv[P_R_GAS] * pv[P_T] / (pv[P_N_E] * pv[P_F])
    c_h = 2.0 * pv[P_I_H0] * pv[P_A_R]
    c_l = 2.0 * pv[P_I_L0] * pv[P_A_R]
    eta_h = kb * math.asinh(z[0] / c_h)
    eta_l = kb * math.asinh(z[1] / c_l)
    return eta_h, eta_l


@njit
def eval_f(pv, x, z):
    """Species mass balance: time derivatives of (x1..x4) in g/s."""
    b = pv[P_M_S8] / (pv[P_N_E] * pv[P_F])
    b_h = pv[P_N_S8] * b
    b_l4 = pv[P_N_S4] * b
    b_l3 = 2.0 * pv[P_N_S] * b
    c_p = pv[P_K_P] / (pv[P_V] * pv[P_RHO_S])
    precip = c_p * x[3] * (x[2] - pv[P_S_STAR])
    out = np.empty(4)
    out[0] = -b_h * z[0] - pv[P_K_S] * x[0]
    out[1] = b_h * z[0] + pv[P_K_S] * x[0] - b_l4 * z[1]
    out[2] = b_l3 * z[1] - precip
    out[3] = precip
    return out


@njit
def eval_h(pv, x, z):
    """Output stack: terminal voltage seen through each reaction branch.

    Discharge currents are positive and pull the terminal voltage below the
    equilibrium potential: y_X = E_X - eta_X(i_X).
    """
    e_h, e_l = nernst(pv, x)
    eta_h, eta_l = surface_overpotentials(pv, z)
    out = np.empty(2)
    out[0] = e_h - eta_h
    out[1] = e_l - eta_l
    return out


@njit
def eval_g(pv, x, z, current):
    """Algebraic residual: current balance and branch-voltage agreement."""
    y = eval_h(pv, x, z)
    out = np.empty(2)
    out[0] = z[0] + z[1] - current
    out[1] = y[0] - y[1]
    return out


@njit
def jac_f_x(pv, x, z):
    c_p = pv[P_K_P] / (pv[P_V] * pv[P_RHO_S])
    out = np.zeros((4, 4))
    out[0, 0] = -pv[P_K_S]
    out[1, 0] = pv[P_K_S]
    out[2, 2] = -c_p * x[3]
    out[2, 3] = -c_p * (x[2] - pv[P_S_STAR])
    out[3, 2] = c_p * x[3]
    out[3, 3] = c_p * (x[2] - pv[P_S_STAR])
    return out


@njit
def jac_f_z(pv):
    b = pv[P_M_S8] / (pv[P_N_E] * pv[P_F])
    out = np.zeros((4, 2))
    out[0, 0] = -pv[P_N_S8] * b
    out[1, 0] = pv[P_N_S8] * b
    out[1, 1] = -pv[P_N_S4] * b
    out[2, 1] = 2.0 * pv[P_N_S] * b
    return out


@njit
def jac_nernst_x(pv, x):
    """Rows (dE_H/dx, dE_L/dx)."""
    kn = pv[P_R_GAS] * pv[P_T] / (4.0 * pv[P_F])
    out = np.zeros((2, 4))
    out[0, 0] = kn / x[0]
    out[0, 1] = -2.0 * kn / x[1]
    out[1, 1] = EL_X2_POWER * kn / x[1]
    out[1, 2] = -kn * (2.0 / x[2] + 1.0 / (x[2] + x[3]))
    out[1, 3] = -kn / (x[2] + x[3])
    return out


@njit
def jac_h_x(pv, x):
    return jac_nernst_x(pv, x)


@njit
def jac_h_z(pv, z):
    kb = 2.0 * pv[P_R_GAS] * pv[P_T] / (pv[P_N_E] * pv[P_F])
    c_h = 2.0 * pv[P_I_H0] * pv[P_A_R]
    c_l = 2.0 * pv[P_I_L0] * pv[P_A_R]
    out = np.zeros((2, 2))
    out[0, 0] = -kb / (c_h * math.sqrt(1.0 + (z[0] / c_h) ** 2))
    out[1, 1] = -kb / (c_l * math.sqrt(1.0 + (z[1] / c_l) ** 2))
    return out


@njit
def jac_g_x(pv, x):
    dn = jac_nernst_x(pv, x)
    out = np.zeros((2, 4))
    for j in range(4):
        out[1, j] = dn[0, j] - dn[1, j]
    return out


@njit
def jac_g_z(pv, z):
    dh = jac_h_z(pv, z)
    out = np.empty((2, 2))
    out[0, 0] = 1.0
    out[0, 1] = 1.0
    out[1, 0] = dh[0, 0]      # d(y1 - y2)/di_H = dh1/di_H
    out[1, 1] = -dh[1, 1]     # d(y1 - y2)/di_L = -dh2/di_L
    return out


@njit
def newton_algebraic(pv, x, current, z_guess, tol, max_iters, max_halvings):
    """Damped Newton solve of g(x, z, I) = 0 for z = (i_H, i_L).

    Returns (z, iterations, residual_inf_norm, status).  The damping halves
    the step until the residual decreases (or the tolerance is met); the last
    halved step is taken even without decrease so the iteration cannot stall.
    """
    z = z_guess.copy()
    g = eval_g(pv, x, z, current)
    res = max(abs(g[0]), abs(g[1]))
    iters = 0
    while res > tol and iters < max_iters:
        jz = jac_g_z(pv, z)
        det = jz[0, 0] * jz[1, 1] - jz[0, 1] * jz[1, 0]
        if abs(det) < 1e-300 or not math.isfinite(det):
            return z, iters, res, STATUS_SINGULAR_JACOBIAN
        dz0 = -(jz[1, 1] * g[0] - jz[0, 1] * g[1]) / det
        dz1 = -(jz[0, 0] * g[1] - jz[1, 0] * g[0]) / det
        lam = 1.0
        zt = np.empty(2)
        for _ in range(max_halvings + 1):
            zt[0] = z[0] + lam * dz0
            zt[1] = z[1] + lam * dz1
            gt = eval_g(pv, x, zt, current)
            rt = max(abs(gt[0]), abs(gt[1]))
            if math.isfinite(rt) and (rt < res or rt <= tol):
                break
            lam *= 0.5
        z[0] = zt[0]
        z[1] = zt[1]
        g = eval_g(pv, x, z, current)
        res = max(abs(g[0]), abs(g[1]))
        iters += 1
    if res <= tol:
        return z, iters, res, STATUS_OK
    return z, iters, res, STATUS_NO_CONVERGENCE


@njit
def floor_masses(x, eps, conserve):
    """Clamp species masses at eps (in place).

    With ``conserve`` set, the clamp deficit is taken out of x2 with the
    weights of the linear invariant x1 + x2 + 2*(x3 + x4), so flooring does
    not create mass.  Returns (number of clamped components, flag telling
    whether x1 was clamped).
    """
    n_clamped = 0
    x1_clamped = False
    borrow = 0.0
    if x[0] < eps:
        borrow += eps - x[0]
        x[0] = eps
        n_clamped += 1
        x1_clamped = True
    if x[2] < eps:
        borrow += 2.0 * (eps - x[2])
        x[2] = eps
        n_clamped += 1
    if x[3] < eps:
        borrow += 2.0 * (eps - x[3])
        x[3] = eps
        n_clamped += 1
    if conserve and borrow > 0.0 and x[1] - borrow >= eps:
        x[1] -= borrow
    if x[1] < eps:
        x[1] = eps
        n_clamped += 1
    return n_clamped, x1_clamped


@njit
def sim_loop(pv, x0, z_guess, currents, dt, n_steps, eps_mass, conserve_floor,
             tol, max_iters, max_halvings, meas_noise, proc_noise):
    """Forward-Euler plant simulation with per-step algebraic solves.

    currents, meas_noise: length n_steps + 1 (per record); proc_noise is
    (n_steps, 4) or (0, 4) for the noise-free plant truth.

    Returns (X, Z, V_true, V_meas, iters, g_res, n_done, first_x1_floor,
    n_floor_events, status) where n_done counts completed records - 1.
    """
    n_rec = n_steps + 1
    X = np.zeros((n_rec, 4))
    Z = np.zeros((n_rec, 2))
    v_true = np.zeros(n_rec)
    v_meas = np.zeros(n_rec)
    iters_arr = np.zeros(n_rec, dtype=np.int64)
    res_arr = np.zeros(n_rec)
    x = x0.copy()
    floor_masses(x, eps_mass, conserve_floor)
    z, it, res, status = newton_algebraic(pv, x, currents[0], z_guess, tol,
                                          max_iters, max_halvings)
    first_x1_floor = -1
    n_floor_events = 0
    if status != STATUS_OK:
        return (X, Z, v_true, v_meas, iters_arr, res_arr, -1, first_x1_floor,
                n_floor_events, status)
    X[0] = x
    Z[0] = z
    y = eval_h(pv, x, z)
    v_true[0] = y[0]
    v_meas[0] = y[0] + meas_noise[0]
    iters_arr[0] = it
    res_arr[0] = res
    n_done = 0
    use_proc_noise = proc_noise.shape[0] == n_steps
    for k in range(n_steps):
        f = eval_f(pv, x, z)
        for j in range(4):
            x[j] = x[j] + dt * f[j]
            if use_proc_noise:
                x[j] += proc_noise[k, j]
        nc, x1c = floor_masses(x, eps_mass, conserve_floor)
        n_floor_events += nc
        if x1c and first_x1_floor < 0:
            first_x1_floor = k + 1
        z, it, res, status = newton_algebraic(pv, x, currents[k + 1], z, tol,
                                              max_iters, max_halvings)
        if status != STATUS_OK:
            return (X, Z, v_true, v_meas, iters_arr, res_arr, n_done,
                    first_x1_floor, n_floor_events, status)
        X[k + 1] = x
        Z[k + 1] = z
        y = eval_h(pv, x, z)
        v_true[k + 1] = y[0]
        v_meas[k + 1] = y[0] + meas_noise[k + 1]
        iters_arr[k + 1] = it
        res_arr[k + 1] = res
        n_done = k + 1
    return (X, Z, v_true, v_meas, iters_arr, res_arr, n_done, first_x1_floor,
            n_floor_events, STATUS_OK)


@njit
def ekf_step_core(pv, xh, zh, P, Q, R, dt, y_meas, current_next, eps_mass,
                  tol, max_iters, max_halvings, discrete_f, total_h,
                  gain_scale):
    """One combined prediction/correction step of the DAE filter.

    Implements, in order: gain from the current covariance, Euler prediction
    plus output-error injection, covariance recursion, mass flooring, and the
    consistency solve for the next algebraic estimate.

    Returns (x_next, z_next, P_next, K, innovation, y_pred, iters, res,
    status).
    """
    fx = jac_f_x(pv, xh, zh)
    if discrete_f:
        F = np.eye(4) + dt * fx
    else:
        F = fx
    H = jac_h_x(pv, xh)
    if total_h:
        # add the implicit sensitivity of z on x through the constraint:
        # dz/dx = -(dg/dz)^-1 (dg/dx)
        gz = jac_g_z(pv, zh)
        gx = jac_g_x(pv, xh)
        hz = jac_h_z(pv, zh)
        det = gz[0, 0] * gz[1, 1] - gz[0, 1] * gz[1, 0]
        if abs(det) < 1e-300:
            return (xh, zh, P, np.zeros((4, 2)), np.zeros(2), np.zeros(2), 0,
                    0.0, STATUS_SINGULAR_JACOBIAN)
        gz_inv = np.empty((2, 2))
        gz_inv[0, 0] = gz[1, 1] / det
        gz_inv[0, 1] = -gz[0, 1] / det
        gz_inv[1, 0] = -gz[1, 0] / det
        gz_inv[1, 1] = gz[0, 0] / det
        H = H - hz @ (gz_inv @ gx)
    PHt = P @ H.T
    S = H @ PHt + R
    det_s = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if abs(det_s) < 1e-300 or not math.isfinite(det_s):
        return (xh, zh, P, np.zeros((4, 2)), np.zeros(2), np.zeros(2), 0, 0.0,
                STATUS_SINGULAR_INNOVATION)
    S_inv = np.empty((2, 2))
    S_inv[0, 0] = S[1, 1] / det_s
    S_inv[0, 1] = -S[0, 1] / det_s
    S_inv[1, 0] = -S[1, 0] / det_s
    S_inv[1, 1] = S[0, 0] / det_s
    K = gain_scale * (F @ (PHt @ S_inv))
    y_pred = eval_h(pv, xh, zh)
    innov = np.empty(2)
    innov[0] = y_meas - y_pred[0]
    innov[1] = y_meas - y_pred[1]
    f = eval_f(pv, xh, zh)
    x_next = np.empty(4)
    for j in range(4):
        x_next[j] = xh[j] + dt * f[j] + K[j, 0] * innov[0] + K[j, 1] * innov[1]
    floor_masses(x_next, eps_mass, False)
    P_next = F @ P @ F.T + Q - K @ S @ K.T
    P_next = 0.5 * (P_next + P_next.T)
    z_next, iters, res, status = newton_algebraic(pv, x_next, current_next,
                                                  zh, tol, max_iters,
                                                  max_halvings)
    return x_next, z_next, P_next, K, innov, y_pred, iters, res, status


@njit
def ekf_loop(pv, x0_hat, z_guess, P0, Q, R, dt, y_meas, currents, eps_mass,
             tol, max_iters, max_halvings, discrete_f, total_h, gain_scale):
    """Run the filter over a measurement sequence.

    y_meas/currents have length n; the returned arrays hold n + 1 records
    (the consistent initial state plus one per processed measurement).
    """
    n = y_meas.shape[0]
    XH = np.zeros((n + 1, 4))
    ZH = np.zeros((n + 1, 2))
    PH = np.zeros((n + 1, 4, 4))
    KH = np.zeros((n + 1, 4, 2))
    innov_h = np.zeros((n + 1, 2))
    ypred_h = np.zeros((n + 1, 2))
    iters_arr = np.zeros(n + 1, dtype=np.int64)
    res_arr = np.zeros(n + 1)
    xh = x0_hat.copy()
    floor_masses(xh, eps_mass, False)
    zh, it, res, status = newton_algebraic(pv, xh, currents[0], z_guess, tol,
                                           max_iters, max_halvings)
    if status != STATUS_OK:
        return XH, ZH, PH, KH, innov_h, ypred_h, iters_arr, res_arr, -1, status
    P = P0.copy()
    XH[0] = xh
    ZH[0] = zh
    PH[0] = P
    iters_arr[0] = it
    res_arr[0] = res
    n_done = 0
    for k in range(n):
        cur_next = currents[k + 1] if k + 1 < n else currents[k]
        xh, zh, P, K, innov, y_pred, it, res, status = ekf_step_core(
            pv, xh, zh, P, Q, R, dt, y_meas[k], cur_next, eps_mass, tol,
            max_iters, max_halvings, discrete_f, total_h, gain_scale)
        if status != STATUS_OK:
            return (XH, ZH, PH, KH, innov_h, ypred_h, iters_arr, res_arr,
                    n_done, status)
        XH[k + 1] = xh
        ZH[k + 1] = zh
        PH[k + 1] = P
        KH[k + 1] = K
        innov_h[k + 1] = innov
        ypred_h[k + 1] = y_pred
        iters_arr[k + 1] = it
        res_arr[k + 1] = res
        n_done = k + 1
    return (XH, ZH, PH, KH, innov_h, ypred_h, iters_arr, res_arr, n_done,
            STATUS_OK)


def warm_up():
    """Trigger jit compilation of all kernels on a tiny problem."""
    pv = np.ones(PVEC_LEN)
    pv[P_F] = 96485.0
    pv[P_R_GAS] = 8.3145
    pv[P_T] = 298.0
    pv[P_E_H0] = 2.4
    pv[P_E_L0] = 2.2
    pv[P_N_E] = 4.0
    pv[P_N_S8] = 8.0
    pv[P_N_S4] = 4.0
    pv[P_N_S] = 1.0
    pv[P_M_S8] = 32.0
    x = np.array([1.0, 1.0, 0.1, 0.1])
    z = np.array([1.0, 0.5])
    eval_f(pv, x, z)
    eval_g(pv, x, z, 1.5)
    jac_f_x(pv, x, z)
    jac_f_z(pv)
    jac_g_x(pv, x)
    jac_g_z(pv, z)
    jac_h_x(pv, x)
    jac_h_z(pv, z)
    newton_algebraic(pv, x, 1.5, z, 1e-10, 50, 30)
    noise = np.zeros(3)
    pnoise = np.zeros((0, 4))
    currents = np.full(3, 1.5)
    sim_loop(pv, x, z, currents, 1.0, 2, 1e-12, True, 1e-10, 50, 30, noise,
             pnoise)
    P0 = np.eye(4) * 1e-6
    Q = np.eye(4) * 1e-12
    R = np.eye(2) * 1e-7
    ekf_loop(pv, x, z, P0, Q, R, 1.0, np.full(2, 2.3), np.full(2, 1.5), 1e-12,
             1e-10, 50, 30, True, False, 1.0)
