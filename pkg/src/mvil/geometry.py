"""Rotation, quaternion, and pose algebra in the JPL convention, plus the pinhole camera.

Quaternions are stored scalar-last, ``[x, y, z, w]``.  For a quaternion ``q``
written ``q_AB`` the matrix ``quat_to_rot(q_AB)`` rotates vectors from frame B
into frame A.  Products compose like the matrices: ``C(q ⊗ p) = C(q) C(p)``.

The error-state retraction is left-multiplicative throughout the package:
``R_true = (I - skew(dtheta)) @ R_est``, equivalently
``q_true = small_angle_quat(dtheta) ⊗ q_est``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonPositiveDepth(Exception):
    """Point is at or behind the camera plane; the measurement must be dropped."""


_DEPTH_EPS = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize and resolve the double cover (w >= 0)."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        return np.array([0.0, 0.0, 0.0, 1.0])
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_multiply(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """JPL product: quat_to_rot(q ⊗ p) = quat_to_rot(q) @ quat_to_rot(p)."""
    qx, qy, qz, qw = q
    px, py, pz, pw = p
    return quat_normalize(np.array([
        qw * px + pw * qx - (qy * pz - qz * py),
        qw * py + pw * qy - (qz * px - qx * pz),
        qw * pz + pw * qz - (qx * py - qy * px),
        qw * pw - (qx * px + qy * py + qz * pz),
    ]))


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a JPL quaternion (frame rotation, B-to-A for q_AB).

    Expanded form of (2w^2 - 1) I - 2w skew(v) + 2 v v^T.
    """
    x, y, z, w = q
    ww = 2.0 * w * w - 1.0
    return np.array([
        [ww + 2 * x * x, 2 * (w * z + x * y), 2 * (-w * y + x * z)],
        [2 * (-w * z + x * y), ww + 2 * y * y, 2 * (w * x + y * z)],
        [2 * (w * y + x * z), 2 * (-w * x + y * z), ww + 2 * z * z],
    ])


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_rot (Shepperd's method, stable for all rotations)."""
    tr = np.trace(R)
    # Work in terms of the JPL components directly; diag(R) = 2*(w,x,y,z)^2 - 1 mixtures.
    w2 = 0.25 * (1.0 + tr)
    x2 = 0.25 * (1.0 + 2.0 * R[0, 0] - tr)
    y2 = 0.25 * (1.0 + 2.0 * R[1, 1] - tr)
    z2 = 0.25 * (1.0 + 2.0 * R[2, 2] - tr)
    k = int(np.argmax([w2, x2, y2, z2]))
    if k == 0:
        w = np.sqrt(w2)
        x = (R[1, 2] - R[2, 1]) / (4.0 * w)
        y = (R[2, 0] - R[0, 2]) / (4.0 * w)
        z = (R[0, 1] - R[1, 0]) / (4.0 * w)
    elif k == 1:
        x = np.sqrt(x2)
        w = (R[1, 2] - R[2, 1]) / (4.0 * x)
        y = (R[0, 1] + R[1, 0]) / (4.0 * x)
        z = (R[2, 0] + R[0, 2]) / (4.0 * x)
    elif k == 2:
        y = np.sqrt(y2)
        w = (R[2, 0] - R[0, 2]) / (4.0 * y)
        x = (R[0, 1] + R[1, 0]) / (4.0 * y)
        z = (R[1, 2] + R[2, 1]) / (4.0 * y)
    else:
        z = np.sqrt(z2)
        w = (R[0, 1] - R[1, 0]) / (4.0 * z)
        x = (R[2, 0] + R[0, 2]) / (4.0 * z)
        y = (R[1, 2] + R[2, 1]) / (4.0 * z)
    return quat_normalize(np.array([x, y, z, w]))


def small_angle_quat(dtheta: np.ndarray) -> np.ndarray:
    """Exponential-map quaternion; quat_to_rot(small_angle_quat(t)) ≈ I - skew(t)."""
    dtheta = np.asarray(dtheta, dtype=float)
    angle = np.linalg.norm(dtheta)
    if angle < 1e-12:
        return quat_normalize(np.array([0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2], 1.0]))
    axis = dtheta / angle
    s = np.sin(0.5 * angle)
    return quat_normalize(np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * angle)]))


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Matrix exponential of skew(w) (active rotation by |w| about w)."""
    angle = np.linalg.norm(w)
    K = skew(w)
    if angle < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(angle) / angle) * K + ((1.0 - np.cos(angle)) / angle**2) * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp: w such that so3_exp(w) = R."""
    c = 0.5 * (np.trace(R) - 1.0)
    c = min(1.0, max(-1.0, c))
    angle = np.arccos(c)
    if angle < 1e-9:
        # First-order: R ≈ I + skew(w)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # Near pi the antisymmetric part degenerates; use the symmetric part.
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            axis = A[:, k] / np.linalg.norm(A[:, k])
        sgn = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if sgn @ axis < 0.0:
            axis = -axis
        return angle * axis
    s = np.sin(angle)
    return (angle / (2.0 * s)) * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def attitude_error(R_true: np.ndarray, R_est: np.ndarray) -> np.ndarray:
    """Error vector dtheta with R_true = (I - skew(dtheta)) @ R_est (exact log form)."""
    return so3_log(R_est @ R_true.T)


def quat_error(q_true: np.ndarray, q_est: np.ndarray) -> np.ndarray:
    return attitude_error(quat_to_rot(q_true), quat_to_rot(q_est))


def is_rotation(R: np.ndarray, tol: float = 1e-10) -> bool:
    return (
        np.abs(R @ R.T - np.eye(3)).max() < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


@dataclass
class Pose3:
    """Rigid transform ``T_AB``: maps points from frame B to frame A.

    ``R`` rotates B-vectors into A, ``t`` is the origin of B expressed in A.
    """

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(q_AB: np.ndarray, t: np.ndarray) -> "Pose3":
        return Pose3(quat_to_rot(q_AB), np.asarray(t, dtype=float).copy())

    def compose(self, other: "Pose3") -> "Pose3":
        """T_AB.compose(T_BC) = T_AC."""
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose3":
        return Pose3(self.R.T, -self.R.T @ self.t)

    def transform(self, p: np.ndarray) -> np.ndarray:
        return self.R @ p + self.t

    def quat(self) -> np.ndarray:
        return rot_to_quat(self.R)


@dataclass
class CameraModel:
    """Pinhole intrinsics; no distortion (the simulator emits undistorted pixels)."""

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")


def project(cam: CameraModel, p: np.ndarray) -> np.ndarray:
    """Project a camera-frame point to pixels; raises NonPositiveDepth for z <= 1e-6."""
    if p[2] <= _DEPTH_EPS:
        raise NonPositiveDepth(f"depth {p[2]:.3g} <= {_DEPTH_EPS}")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def projection_jacobian(cam: CameraModel, p: np.ndarray) -> np.ndarray:
    """d(project)/d(p), 2x3."""
    if p[2] <= _DEPTH_EPS:
        raise NonPositiveDepth(f"depth {p[2]:.3g} <= {_DEPTH_EPS}")
    x, y, z = p
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / z**2],
            [0.0, cam.fy / z, -cam.fy * y / z**2],
        ]
    )


def unproject(cam: CameraModel, uv: np.ndarray, depth: float) -> np.ndarray:
    """Back-project a pixel to the camera frame at the given depth."""
    return np.array([(uv[0] - cam.cx) / cam.fx * depth, (uv[1] - cam.cy) / cam.fy * depth, depth])


def in_view(cam: CameraModel, p: np.ndarray, margin: float = 0.0) -> bool:
    """True if the camera-frame point projects inside the image bounds."""
    if p[2] <= _DEPTH_EPS:
        return False
    u, v = project(cam, p)
    return (-margin <= u <= cam.width + margin) and (-margin <= v <= cam.height + margin)
