"""IMU mean/covariance propagation and the state-transition matrix.

Mean propagation is RK4 over (q, v, p) holding each IMU sample constant across
its step.  The transition matrix couples two paths: the attitude/velocity/
position block uses the closed endpoint forms (so first-estimate values can be
substituted without re-integrating), while the bias-coupling columns come from
integrating the variational equation alongside the mean, which keeps them
finite-difference exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import HAVE_NUMBA, rk4_imu_step_nb
from .geometry import quat_normalize, quat_to_rot, skew
from .state import IMU_DIM, FejRegistry, ImuState, PartitionedCovariance

GRAVITY = np.array([0.0, 0.0, -9.81])


class NonMonotonicTime(Exception):
    pass


class DimensionMismatch(Exception):
    pass


@dataclass
class ImuSample:
    """One gyro/accelerometer reading; values are held constant over its step."""

    timestamp: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass
class NoiseConfig:
    """Continuous-time IMU noise densities (units per sqrt(Hz))."""

    sigma_g: float = 1.6968e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9393e-5
    sigma_ba: float = 3.0e-3

    def __post_init__(self):
        if min(self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba) < 0:
            raise ValueError("noise densities must be non-negative")

    def diag(self) -> np.ndarray:
        return np.concatenate([
            np.full(3, self.sigma_g**2),
            np.full(3, self.sigma_a**2),
            np.full(3, self.sigma_bg**2),
            np.full(3, self.sigma_ba**2),
        ])


@dataclass
class PropagationMatrices:
    Phi: np.ndarray
    G: np.ndarray
    Q: np.ndarray


def _omega_matrix(w: np.ndarray) -> np.ndarray:
    # JPL quaternion kinematics, scalar-last storage: qdot = 0.5 * Omega(w) @ q.
    wx, wy, wz = w
    return np.array([
        [0.0, wz, -wy, wx],
        [-wz, 0.0, wx, wy],
        [wy, -wx, 0.0, wz],
        [-wx, -wy, -wz, 0.0],
    ])


def _rk4(q0, v0, p0, w, a, dt, gravity, Phi0=None):
    """One RK4 step of the IMU kinematics, optionally carrying the 15x15 variational matrix."""
    Om = 0.5 * _omega_matrix(w)
    sk_a = skew(a)
    want_phi = Phi0 is not None

    def deriv(q, v, Phi):
        qn = q / np.linalg.norm(q)
        R = quat_to_rot(qn)
        qd = Om @ q
        vd = R.T @ a + gravity
        pd = v
        if not want_phi:
            return qd, vd, pd, None
        dPhi = np.zeros_like(Phi)
        dPhi[0:3] = -skew(w) @ Phi[0:3] - Phi[9:12]
        dPhi[3:6] = -R.T @ (sk_a @ Phi[0:3]) - R.T @ Phi[12:15]
        dPhi[6:9] = Phi[3:6]
        return qd, vd, pd, dPhi

    Phi = Phi0
    k1 = deriv(q0, v0, Phi)
    k2 = deriv(q0 + 0.5 * dt * k1[0], v0 + 0.5 * dt * k1[1],
               Phi if not want_phi else Phi + 0.5 * dt * k1[3])
    k3 = deriv(q0 + 0.5 * dt * k2[0], v0 + 0.5 * dt * k2[1],
               Phi if not want_phi else Phi + 0.5 * dt * k2[3])
    k4 = deriv(q0 + dt * k3[0], v0 + dt * k3[1],
               Phi if not want_phi else Phi + dt * k3[3])

    q1 = q0 + (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    v1 = v0 + (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    p1 = p0 + (dt / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    Phi1 = None
    if want_phi:
        Phi1 = Phi + (dt / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
    return quat_normalize(q1), v1, p1, Phi1


def _integrate(imu: ImuState, sample: ImuSample, dt: float, gravity: np.ndarray,
               want_phi: bool):
    w = sample.omega - imu.bg
    a = sample.accel - imu.ba
    if HAVE_NUMBA:
        return rk4_imu_step_nb(
            np.ascontiguousarray(imu.q, dtype=float), np.ascontiguousarray(imu.v, dtype=float),
            np.ascontiguousarray(imu.p, dtype=float), np.ascontiguousarray(w, dtype=float),
            np.ascontiguousarray(a, dtype=float), float(dt),
            np.ascontiguousarray(gravity, dtype=float), want_phi)
    q1, v1, p1, Phi = _rk4(imu.q, imu.v, imu.p, w, a, dt, gravity,
                           Phi0=np.eye(IMU_DIM) if want_phi else None)
    return q1, v1, p1, (Phi if want_phi else np.eye(1))


def propagate_mean(imu: ImuState, sample: ImuSample, dt: float,
                   gravity: np.ndarray = GRAVITY) -> ImuState:
    """RK4-integrate one IMU step; biases are constant across the step."""
    if dt <= 0.0:
        raise NonMonotonicTime(f"dt must be positive, got {dt}")
    q1, v1, p1, _ = _integrate(imu, sample, dt, gravity, False)
    return ImuState(q1, v1, p1, imu.bg.copy(), imu.ba.copy())


def propagate_mean_with_jacobian(imu: ImuState, sample: ImuSample, dt: float,
                                 gravity: np.ndarray = GRAVITY) -> tuple[ImuState, np.ndarray]:
    """Propagate and return the variational 15x15 transition of the step."""
    if dt <= 0.0:
        raise NonMonotonicTime(f"dt must be positive, got {dt}")
    q1, v1, p1, Phi = _integrate(imu, sample, dt, gravity, True)
    return ImuState(q1, v1, p1, imu.bg.copy(), imu.ba.copy()), Phi


def closed_form_block(q_from, v_from, p_from, q_to, v_to, p_to, dt, gravity) -> np.ndarray:
    """Endpoint 9x9 attitude/velocity/position transition block.

    Phi1 = R_to R_from^T; Phi2 = -skew(v_to - v_from - g dt) R_from^T;
    Phi3 = -skew(p_to - p_from - v_from dt - 0.5 g dt^2) R_from^T.
    Substituting first-estimate endpoint values preserves the composition
    structure exactly, which is what the FEJ machinery relies on.
    """
    R_from = quat_to_rot(q_from)
    R_to = quat_to_rot(q_to)
    Phi = np.eye(9)
    Phi[0:3, 0:3] = R_to @ R_from.T
    Phi[3:6, 0:3] = -skew(v_to - v_from - gravity * dt) @ R_from.T
    Phi[6:9, 0:3] = -skew(p_to - p_from - v_from * dt - 0.5 * gravity * dt**2) @ R_from.T
    Phi[6:9, 3:6] = np.eye(3) * dt
    return Phi


def imu_transition(imu_before: ImuState, imu_after: ImuState, sample: ImuSample,
                   dt: float, gravity: np.ndarray = GRAVITY,
                   fej: bool = False, registry: FejRegistry | None = None,
                   t_from: float | None = None) -> np.ndarray:
    """15x15 IMU-block transition for one step.

    With `fej` on, the from-point values are taken from the registry's
    propagated first estimate at `t_from` instead of `imu_before`.
    """
    _, Phi = propagate_mean_with_jacobian(imu_before, sample, dt, gravity)
    q_from, v_from, p_from = imu_before.q, imu_before.v, imu_before.p
    if fej:
        if registry is None or t_from is None:
            raise ValueError("fej transition needs a registry and the from-timestamp")
        q_from, v_from, p_from = registry.point_for(
            ("imu", t_from), (imu_before.q, imu_before.v, imu_before.p))
    Phi[0:9, 0:9] = closed_form_block(q_from, v_from, p_from,
                                      imu_after.q, imu_after.v, imu_after.p, dt, gravity)
    return Phi


def noise_jacobian(imu_before: ImuState) -> np.ndarray:
    """15x12 map from [n_g, n_a, n_bg, n_ba] into the error state."""
    G = np.zeros((IMU_DIM, 12))
    G[0:3, 0:3] = -np.eye(3)
    G[3:6, 3:6] = -quat_to_rot(imu_before.q).T
    G[9:12, 6:9] = np.eye(3)
    G[12:15, 9:12] = np.eye(3)
    return G


def transition_matrix(imu_before: ImuState, imu_after: ImuState, sample: ImuSample,
                      dt: float, gravity: np.ndarray = GRAVITY,
                      fej: bool = False, registry: FejRegistry | None = None,
                      t_from: float | None = None,
                      noise: NoiseConfig | None = None,
                      dim_active: int = IMU_DIM) -> PropagationMatrices:
    """Full active-state transition: identity outside the 15x15 IMU block."""
    Phi15 = imu_transition(imu_before, imu_after, sample, dt, gravity, fej, registry, t_from)
    Phi = np.eye(dim_active)
    Phi[0:IMU_DIM, 0:IMU_DIM] = Phi15
    G = np.zeros((dim_active, 12))
    G[0:IMU_DIM, :] = noise_jacobian(imu_before)
    Q = np.diag((noise or NoiseConfig()).diag() * dt)
    return PropagationMatrices(Phi, G, Q)


def propagate_covariance(cov: PartitionedCovariance, mats: PropagationMatrices) -> None:
    """P_AA <- Phi P_AA Phi^T + G Q G^T;  P_AN <- Phi P_AN;  P_NN untouched."""
    if mats.Phi.shape[0] != cov.dim_active:
        raise DimensionMismatch(
            f"Phi is {mats.Phi.shape[0]}x{mats.Phi.shape[1]}, active dim is {cov.dim_active}")
    cov.P_AA = mats.Phi @ cov.P_AA @ mats.Phi.T + mats.G @ mats.Q @ mats.G.T
    cov.P_AN = mats.Phi @ cov.P_AN
    cov.P_AA = 0.5 * (cov.P_AA + cov.P_AA.T)


def apply_imu_block_propagation(cov: PartitionedCovariance, Phi15: np.ndarray,
                                Q15: np.ndarray) -> None:
    """Fast path equivalent to propagate_covariance for a composed IMU-block step.

    Only the first 15 rows/cols of the active covariance are touched; `Q15` is
    the accumulated process noise mapped into the IMU error block.
    """
    cov.P_AA[0:IMU_DIM, :] = Phi15 @ cov.P_AA[0:IMU_DIM, :]
    cov.P_AA[:, 0:IMU_DIM] = cov.P_AA[:, 0:IMU_DIM] @ Phi15.T
    cov.P_AA[0:IMU_DIM, 0:IMU_DIM] += Q15
    if cov.P_AN.shape[1]:
        cov.P_AN[0:IMU_DIM, :] = Phi15 @ cov.P_AN[0:IMU_DIM, :]
    cov.P_AA = 0.5 * (cov.P_AA + cov.P_AA.T)


@dataclass
class PropagationAccumulator:
    """Composes per-step IMU transitions and noise between camera frames."""

    noise: NoiseConfig = field(default_factory=NoiseConfig)
    Phi: np.ndarray = field(default_factory=lambda: np.eye(IMU_DIM))
    Q: np.ndarray = field(default_factory=lambda: np.zeros((IMU_DIM, IMU_DIM)))

    def _qd_template(self, dt: float) -> np.ndarray:
        # G diag(sigma^2 dt) G^T: the accel-noise term R^T (sigma_a^2 I) R collapses
        # to sigma_a^2 I because the density is isotropic, so Qd is state-free.
        key = round(dt, 12)
        cache = getattr(self, "_qd_cache", None)
        if cache is None or cache[0] != key:
            Qd = np.zeros((IMU_DIM, IMU_DIM))
            Qd[0:3, 0:3] = self.noise.sigma_g**2 * dt * np.eye(3)
            Qd[3:6, 3:6] = self.noise.sigma_a**2 * dt * np.eye(3)
            Qd[9:12, 9:12] = self.noise.sigma_bg**2 * dt * np.eye(3)
            Qd[12:15, 12:15] = self.noise.sigma_ba**2 * dt * np.eye(3)
            self._qd_cache = (key, Qd)
        return self._qd_cache[1]

    def add_step(self, Phi_step: np.ndarray, imu_before: ImuState, dt: float) -> None:
        self.Phi = Phi_step @ self.Phi
        self.Q = Phi_step @ self.Q @ Phi_step.T + self._qd_template(dt)

    def reset(self) -> None:
        self.Phi = np.eye(IMU_DIM)
        self.Q = np.zeros((IMU_DIM, IMU_DIM))
