"""Observability analysis of the simplified augmented system.

The 18-dim error state is ``[dtheta_I, dv, dp, dp_f, dtheta_T, dp_T]``: body
attitude/velocity/position, one local feature in the odometry frame, and the
map transform.  Stacking measurement Jacobians right-multiplied by transition
matrices from time 0 gives the observability matrix; its right null space spans
the unobservable directions.  Three linearization regimes are supported: ideal
(ground truth), estimated (per-step changing points, which kills the null
space), and FEJ (frozen first estimates, which restores it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import CameraModel, NonPositiveDepth, projection_jacobian, quat_to_rot, skew
from .propagation import GRAVITY, closed_form_block

DIM = 18
TH = slice(0, 3)
V = slice(3, 6)
P = slice(6, 9)
PF = slice(9, 12)
TH_T = slice(12, 15)
P_T = slice(15, 18)


class LinearizationRegime(Enum):
    IDEAL = "ideal"
    ESTIMATED = "estimated"
    FEJ = "fej"


@dataclass
class SimplifiedState:
    """Linearization values for one analysis step (biases dropped)."""

    q: np.ndarray       # q_IL
    v: np.ndarray
    p: np.ndarray
    p_f: np.ndarray     # local feature in L
    q_GL: np.ndarray
    p_GL: np.ndarray

    def copy(self) -> "SimplifiedState":
        return SimplifiedState(self.q.copy(), self.v.copy(), self.p.copy(),
                               self.p_f.copy(), self.q_GL.copy(), self.p_GL.copy())


@dataclass
class ObservabilityMatrix:
    M: np.ndarray
    blocks: list[tuple[str, int, np.ndarray]] = field(default_factory=list)

    @property
    def rows(self) -> int:
        return self.M.shape[0]


def reduced_transition(s_from: SimplifiedState, s_to: SimplifiedState, dt: float,
                       gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """18x18 transition: endpoint IMU block, identity for feature and transform."""
    Phi = np.eye(DIM)
    Phi[0:9, 0:9] = closed_form_block(s_from.q, s_from.v, s_from.p,
                                      s_to.q, s_to.v, s_to.p, dt, gravity)
    return Phi


def local_jacobian(s: SimplifiedState, cam: CameraModel) -> np.ndarray:
    """2x18 Jacobian of the local-feature observation at the state's values."""
    R = quat_to_rot(s.q)
    p_C = R @ (s.p_f - s.p)
    if p_C[2] <= 1e-6:
        raise NonPositiveDepth("local feature behind the camera")
    Hp = projection_jacobian(cam, p_C)
    H = np.zeros((2, DIM))
    H[:, TH] = Hp @ skew(p_C)
    H[:, P] = -Hp @ R
    H[:, PF] = Hp @ R
    return H


def map_jacobian(s: SimplifiedState, p_F: np.ndarray, cam: CameraModel) -> np.ndarray:
    """2x18 Jacobian of the map-feature observation; p_F is fixed in the map frame."""
    R = quat_to_rot(s.q)
    R_GL = quat_to_rot(s.q_GL)
    p_L = R_GL.T @ (p_F - s.p_GL)
    p_C = R @ (p_L - s.p)
    if p_C[2] <= 1e-6:
        raise NonPositiveDepth("map feature behind the camera")
    Hp = projection_jacobian(cam, p_C)
    H = np.zeros((2, DIM))
    H[:, TH] = Hp @ skew(p_C)
    H[:, P] = -Hp @ R
    H[:, TH_T] = -Hp @ R @ R_GL.T @ skew(p_F - s.p_GL)
    H[:, P_T] = -Hp @ R @ R_GL.T
    return H


def build_observability(states: list[SimplifiedState], map_features: np.ndarray,
                        cam: CameraModel, dt: float, regime: LinearizationRegime,
                        updated_states: list[SimplifiedState] | None = None,
                        gravity: np.ndarray = GRAVITY) -> ObservabilityMatrix:
    """Stack H_L_i Phi_{i|0} and H_G_i Phi_{i|0} for i = 0..k.

    `map_features` is one map point (3,) or several (n, 3) used round-robin
    across steps, mirroring a system that matches different landmarks over
    time.  A single fixed landmark leaves an extra gauge family (rotations of
    the map frame about that landmark), so the four-dimensional result needs
    at least three non-collinear landmarks in the mix.

    For IDEAL and FEJ the per-step transition runs between consecutive entries
    of `states` (a coherent sequence, so the composition keeps the endpoint
    structure).  For ESTIMATED, `updated_states[i]` is the post-update
    linearization point used as the start of step i -> i+1, which is what
    breaks the composition in a real filter.
    """
    if regime is LinearizationRegime.ESTIMATED:
        if updated_states is None or len(updated_states) != len(states):
            raise ValueError("estimated regime needs one updated state per step")
    feats = np.atleast_2d(np.asarray(map_features, dtype=float))
    rows = []
    blocks = []
    Phi = np.eye(DIM)
    for i, s in enumerate(states):
        if i > 0:
            start = updated_states[i - 1] if regime is LinearizationRegime.ESTIMATED else states[i - 1]
            Phi = reduced_transition(start, s, dt, gravity) @ Phi
        HL = local_jacobian(s, cam) @ Phi
        HG = map_jacobian(s, feats[i % len(feats)], cam) @ Phi
        rows.extend([HL, HG])
        blocks.append(("L", i, HL))
        blocks.append(("G", i, HG))
    return ObservabilityMatrix(np.vstack(rows), blocks)


def analytic_null_space(s0: SimplifiedState, gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """The four unobservable directions: rotation about gravity plus 3 translations.

    Columns are built from the step-0 linearization values; in the ideal and
    FEJ regimes these are the values every Jacobian was evaluated at.
    """
    R0 = quat_to_rot(s0.q)
    R_GL = quat_to_rot(s0.q_GL)
    N = np.zeros((DIM, 4))
    N[TH, 0] = R0 @ gravity
    N[V, 0] = -skew(s0.v) @ gravity
    N[P, 0] = -skew(s0.p) @ gravity
    N[PF, 0] = -skew(s0.p_f) @ gravity
    N[TH_T, 0] = R_GL @ gravity
    N[P, 1:4] = np.eye(3)
    N[PF, 1:4] = np.eye(3)
    N[P_T, 1:4] = -R_GL
    return N


def null_space_dim(M: ObservabilityMatrix | np.ndarray, rel_tol: float = 1e-8) -> int:
    """Number of singular values below rel_tol times the largest one."""
    A = M.M if isinstance(M, ObservabilityMatrix) else M
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return A.shape[1]
    return int(np.count_nonzero(sv < rel_tol * sv[0]))


def singular_values(M: ObservabilityMatrix | np.ndarray) -> np.ndarray:
    A = M.M if isinstance(M, ObservabilityMatrix) else M
    return np.linalg.svd(A, compute_uv=False)
