"""Compiled hot-path kernels (numba) with a pure-numpy fallback.

Only the per-IMU-step RK4 integration lives here; at 200 Hz it dominates the
filter runtime.  The numba and numpy paths compute identical operations so
results agree to machine precision regardless of which one is active.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


@njit(cache=True)
def _quat_to_rot_nb(q):
    x, y, z, w = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 2 * w * w - 1 + 2 * x * x
    R[0, 1] = 2 * w * z + 2 * x * y
    R[0, 2] = -2 * w * y + 2 * x * z
    R[1, 0] = -2 * w * z + 2 * x * y
    R[1, 1] = 2 * w * w - 1 + 2 * y * y
    R[1, 2] = 2 * w * x + 2 * y * z
    R[2, 0] = 2 * w * y + 2 * x * z
    R[2, 1] = -2 * w * x + 2 * y * z
    R[2, 2] = 2 * w * w - 1 + 2 * z * z
    return R


@njit(cache=True)
def _qdot(w, q):
    # 0.5 * Omega(w) @ q for JPL scalar-last storage
    out = np.empty(4)
    out[0] = 0.5 * (w[2] * q[1] - w[1] * q[2] + w[0] * q[3])
    out[1] = 0.5 * (-w[2] * q[0] + w[0] * q[2] + w[1] * q[3])
    out[2] = 0.5 * (w[1] * q[0] - w[0] * q[1] + w[2] * q[3])
    out[3] = 0.5 * (-w[0] * q[0] - w[1] * q[1] - w[2] * q[2])
    return out


@njit(cache=True)
def _skew_nb(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True)
def rk4_imu_step_nb(q0, v0, p0, w, a, dt, g, want_phi):
    """RK4 over (q, v, p) with constant (w, a); optionally the 15x15 variational matrix."""
    W = _skew_nb(w)
    A = _skew_nb(a)

    n_phi = 15 if want_phi else 1
    Phi = np.eye(n_phi)

    qs = q0
    vs = v0
    Ps = Phi
    kq = np.zeros((4, 4))
    kv = np.zeros((4, 3))
    kp = np.zeros((4, 3))
    kP = np.zeros((4, n_phi, n_phi))

    for stage in range(4):
        if stage == 1 or stage == 2:
            h = 0.5 * dt
            qs = q0 + h * kq[stage - 1]
            vs = v0 + h * kv[stage - 1]
            if want_phi:
                Ps = Phi + h * kP[stage - 1]
        elif stage == 3:
            qs = q0 + dt * kq[2]
            vs = v0 + dt * kv[2]
            if want_phi:
                Ps = Phi + dt * kP[2]
        nq = np.sqrt(qs[0] ** 2 + qs[1] ** 2 + qs[2] ** 2 + qs[3] ** 2)
        qn = qs / nq
        R = _quat_to_rot_nb(qn)
        RT = R.T.copy()
        kq[stage] = _qdot(w, qs)
        kv[stage] = RT @ a + g
        kp[stage] = vs
        if want_phi:
            dP = np.zeros((15, 15))
            P_th = Ps[0:3, :].copy()
            dP[0:3, :] = -W @ P_th - Ps[9:12, :]
            dP[3:6, :] = -RT @ (A @ P_th) - RT @ Ps[12:15, :].copy()
            dP[6:9, :] = Ps[3:6, :]
            kP[stage] = dP

    q1 = q0 + (dt / 6.0) * (kq[0] + 2 * kq[1] + 2 * kq[2] + kq[3])
    v1 = v0 + (dt / 6.0) * (kv[0] + 2 * kv[1] + 2 * kv[2] + kv[3])
    p1 = p0 + (dt / 6.0) * (kp[0] + 2 * kp[1] + 2 * kp[2] + kp[3])
    if want_phi:
        Phi = Phi + (dt / 6.0) * (kP[0] + 2 * kP[1] + 2 * kP[2] + kP[3])
    n1 = np.sqrt(q1[0] ** 2 + q1[1] ** 2 + q1[2] ** 2 + q1[3] ** 2)
    q1 = q1 / n1
    if q1[3] < 0.0:
        q1 = -q1
    return q1, v1, p1, Phi


def warmup() -> None:
    """Trigger JIT compilation once (cached to disk for later processes)."""
    if HAVE_NUMBA:
        rk4_imu_step_nb(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), np.zeros(3),
                        np.zeros(3), np.zeros(3), 0.01, np.zeros(3), True)
