"""Local-feature updates: triangulation, linearization, null-space projection, gating.

Residual rows are whitened (divided by their pixel sigma) at linearization, so
every LinearizedResidual downstream carries identity measurement covariance and
the feature null-space projection keeps the noise white.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .geometry import CameraModel, NonPositiveDepth, project, projection_jacobian, quat_to_rot, skew
from .state import ATT, POS, AugmentedState, FejRegistry, PartitionedCovariance


class DegenerateBaseline(Exception):
    pass


class BehindCamera(Exception):
    pass


class NoConvergence(Exception):
    pass


class RankDeficientFeatureJacobian(Exception):
    pass


class SingularInnovation(Exception):
    pass


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list[tuple[float, np.ndarray, float]] = field(default_factory=list)
    # (clone timestamp, pixel, pixel sigma)

    def add(self, t: float, uv: np.ndarray, sigma: float) -> None:
        self.observations.append((t, np.asarray(uv, dtype=float), sigma))

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class LinearizedResidual:
    """Whitened residual with Jacobian blocks against the active / nuisance parts.

    `nuisance_cols` lists the nuisance columns actually touched, letting the
    Schmidt update stay linear in the nuisance dimension.  `blocks` optionally
    records per-source row ranges so callers can gate sources individually.
    """

    r: np.ndarray
    H_A: np.ndarray
    H_N: np.ndarray | None = None
    R: np.ndarray | None = None
    nuisance_cols: np.ndarray | None = None
    blocks: list | None = None

    @property
    def rows(self) -> int:
        return self.r.shape[0]

    def noise(self) -> np.ndarray:
        return np.eye(self.rows) if self.R is None else self.R

    def row_subset(self, rows: np.ndarray) -> "LinearizedResidual":
        sub = LinearizedResidual(self.r[rows], self.H_A[rows],
                                 None if self.H_N is None else self.H_N[rows],
                                 None if self.R is None else self.R[np.ix_(rows, rows)],
                                 self.nuisance_cols)
        sub.mean_reproj_px = getattr(self, "mean_reproj_px", None)
        return sub


def _camera_from_clone(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera rotation (L->C) and center for a clone (identity extrinsics)."""
    return quat_to_rot(q), p


def triangulate(track: FeatureTrack, clones, cam: CameraModel,
                min_baseline: float = 0.02, max_depth: float = 200.0,
                min_depth: float = 0.1, max_iters: int = 6) -> tuple[np.ndarray, float]:
    """Linear triangulation plus Gauss-Newton refinement; returns (point_L, reproj RMS px)."""
    poses = []
    pixels = []
    for t, uv, sig in track.observations:
        try:
            c = clones.at(t)
        except KeyError:
            continue
        poses.append(_camera_from_clone(c.q, c.p))
        pixels.append(uv)
    return triangulate_views(poses, pixels, cam, min_baseline, max_depth, min_depth, max_iters)


def triangulate_views(poses: list[tuple[np.ndarray, np.ndarray]], pixels, cam: CameraModel,
                      min_baseline: float = 0.02, max_depth: float = 200.0,
                      min_depth: float = 0.1, max_iters: int = 10) -> tuple[np.ndarray, float]:
    """Multi-view triangulation from (R_cam_from_world, camera_center) pairs."""
    if len(poses) < 2:
        raise DegenerateBaseline("fewer than two usable observations")

    centers = np.array([p for _, p in poses])
    baseline = max(np.linalg.norm(centers[i] - centers[j])
                   for i in range(len(centers)) for j in range(i + 1, len(centers)))
    if baseline <= min_baseline:
        raise DegenerateBaseline(f"baseline {baseline:.4f} m below {min_baseline}")

    A = np.zeros((2 * len(poses), 3))
    b = np.zeros(2 * len(poses))
    for j, ((R_CL, center), uv) in enumerate(zip(poses, pixels)):
        x_n = (uv[0] - cam.cx) / cam.fx
        y_n = (uv[1] - cam.cy) / cam.fy
        t_c = -R_CL @ center
        A[2 * j] = x_n * R_CL[2] - R_CL[0]
        b[2 * j] = -(x_n * t_c[2] - t_c[0])
        A[2 * j + 1] = y_n * R_CL[2] - R_CL[1]
        b[2 * j + 1] = -(y_n * t_c[2] - t_c[1])
    AtA = A.T @ A
    try:
        p_f = np.linalg.solve(AtA, A.T @ b)
    except np.linalg.LinAlgError:
        raise DegenerateBaseline("linear triangulation system singular") from None

    depths = np.array([(R_CL @ (p_f - center))[2] for R_CL, center in poses])
    if np.all(depths <= 0):
        raise BehindCamera("triangulated point behind every view")

    # Gauss-Newton on the reprojection error (normal equations; 3x3 solve).
    converged = False
    for _ in range(max_iters):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        ok_rows = 0
        for (R_CL, center), uv in zip(poses, pixels):
            p_c = R_CL @ (p_f - center)
            if p_c[2] <= 1e-6:
                continue
            rj = uv - project(cam, p_c)
            Jj = projection_jacobian(cam, p_c) @ R_CL
            JtJ += Jj.T @ Jj
            Jtr += Jj.T @ rj
            ok_rows += 2
        if ok_rows < 4:
            raise BehindCamera("too few views with positive depth during refinement")
        try:
            step = np.linalg.solve(JtJ, Jtr)
        except np.linalg.LinAlgError:
            raise NoConvergence("normal equations singular") from None
        p_f = p_f + step
        if np.linalg.norm(step) < 1e-10:
            converged = True
            break
    if not converged and np.linalg.norm(step) > 1e-6:
        raise NoConvergence("Gauss-Newton did not settle")

    depths = np.array([(R_CL @ (p_f - center))[2] for R_CL, center in poses])
    if np.any(depths <= 0):
        raise BehindCamera("refined point behind a view")
    if depths.max() > max_depth or depths.min() < min_depth:
        raise NoConvergence(f"depth range [{depths.min():.2f},{depths.max():.2f}] outside gate")

    res = []
    for (R_CL, center), uv in zip(poses, pixels):
        res.append(uv - project(cam, R_CL @ (p_f - center)))
    rms = float(np.sqrt(np.mean(np.concatenate(res) ** 2)))
    return p_f, rms


def linearize_track(track: FeatureTrack, state: AugmentedState, f_hat: np.ndarray,
                    cam: CameraModel, fej: bool = False,
                    registry: FejRegistry | None = None
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack whitened residual rows and Jacobians for one feature track.

    Residuals are evaluated at the current estimates; with `fej` on, every
    Jacobian is evaluated at the clone/feature first estimates instead.
    Returns (r, H_x over the active state, H_f).
    """
    dA = state.dim_active
    rows_r, rows_Hx, rows_Hf = [], [], []
    for t, uv, sig in track.observations:
        try:
            idx = state.clones.index_of(t)
        except KeyError:
            continue
        clone = state.clones.clones[idx]
        R_cur = quat_to_rot(clone.q)
        p_cur = clone.p
        try:
            pred = project(cam, R_cur @ (f_hat - p_cur))
        except NonPositiveDepth:
            continue

        if fej and registry is not None:
            q_lin, p_lin = registry.point_for(("clone", t), (clone.q, clone.p))
            f_lin = registry.point_for(("feature", track.feature_id), f_hat)
            R_lin = quat_to_rot(q_lin)
        else:
            R_lin, p_lin, f_lin = R_cur, p_cur, f_hat
        p_c_lin = R_lin @ (f_lin - p_lin)
        if p_c_lin[2] <= 1e-6:
            continue
        Hp = projection_jacobian(cam, p_c_lin)

        Hx = np.zeros((2, dA))
        s = state.clone_slice(idx)
        Hx[:, s.start:s.start + 3] = Hp @ skew(p_c_lin)
        Hx[:, s.start + 3:s.stop] = Hp @ (-R_lin)
        Hf = Hp @ R_lin

        w = 1.0 / sig
        rows_r.append((uv - pred) * w)
        rows_Hx.append(Hx * w)
        rows_Hf.append(Hf * w)

    if not rows_r:
        return np.zeros(0), np.zeros((0, dA)), np.zeros((0, 3))
    return np.concatenate(rows_r), np.vstack(rows_Hx), np.vstack(rows_Hf)


def nullspace_project(r: np.ndarray, H_x: np.ndarray, H_f: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Project the feature block out via the left null space of H_f.

    Rows shrink from 2M to 2M-3; the projector's orthonormal columns keep
    whitened noise white.
    """
    rows = H_f.shape[0]
    if rows <= 3:
        raise RankDeficientFeatureJacobian("need more than 3 rows to project a 3-dof feature")
    Q, R = np.linalg.qr(H_f, mode="complete")
    diag = np.abs(np.diag(R[:3, :3]))
    if diag.min() < 1e-10 * max(1.0, diag.max()):
        raise RankDeficientFeatureJacobian("feature Jacobian numerically rank-deficient")
    N = Q[:, 3:]
    return N.T @ r, N.T @ H_x


@lru_cache(maxsize=512)
def _chi2_threshold(dof: int, level: float) -> float:
    return float(chi2.ppf(level, dof))


def chi2_gate(residual: LinearizedResidual, cov: PartitionedCovariance,
              level: float = 0.95) -> bool:
    """Mahalanobis gate: keep iff r^T S^-1 r < chi2_level(dim r)."""
    S = innovation_covariance(residual, cov)
    try:
        m = float(residual.r @ np.linalg.solve(S, residual.r))
    except np.linalg.LinAlgError:
        return False
    return m < _chi2_threshold(residual.rows, level)


def innovation_covariance(residual: LinearizedResidual, cov: PartitionedCovariance) -> np.ndarray:
    """S including the nuisance coupling terms when H_N is present."""
    H_A = residual.H_A
    S = H_A @ cov.P_AA @ H_A.T + residual.noise()
    if residual.H_N is not None and residual.H_N.shape[1]:
        cols = residual.nuisance_cols
        if cols is None:
            cols = np.arange(residual.H_N.shape[1])
        Hn = residual.H_N[:, cols]
        PAN = cov.P_AN[:, cols]
        PNN = cov.P_NN[np.ix_(cols, cols)]
        X = H_A @ PAN @ Hn.T
        S = S + X + X.T + Hn @ PNN @ Hn.T
    return 0.5 * (S + S.T)


def _active_update(state: AugmentedState, cov: PartitionedCovariance,
                   residual: LinearizedResidual, joseph: bool) -> np.ndarray:
    """Standard EKF update restricted to the active part (H_N absent or zero)."""
    H = residual.H_A
    HP = H @ cov.P_AA
    S = HP @ H.T
    if residual.R is None:
        S[np.diag_indices_from(S)] += 1.0
    else:
        S = S + residual.R
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance not positive definite") from None
    K = scipy.linalg.cho_solve(cf, HP, check_finite=False).T  # P H^T S^-1
    dx = K @ residual.r
    if joseph:
        # (I-KH)P(I-KH)^T + KRK^T expanded so HP is reused.
        KHP = K @ HP
        cov.P_AA = cov.P_AA - KHP - KHP.T + K @ S @ K.T
    else:
        cov.P_AA = cov.P_AA - K @ HP
    if cov.P_AN.shape[1]:
        cov.P_AN = cov.P_AN - K @ (H @ cov.P_AN)
    cov.P_AA = 0.5 * (cov.P_AA + cov.P_AA.T)
    state.apply_active_correction(dx)
    return dx


def ekf_update_active(state: AugmentedState, cov: PartitionedCovariance,
                      residual: LinearizedResidual, joseph: bool = True) -> np.ndarray:
    """EKF update with local-feature measurements (not related to the nuisance part)."""
    if residual.H_N is not None and residual.H_N.shape[1] and np.any(residual.H_N):
        raise ValueError("local-feature update must not touch the nuisance part")
    if residual.H_A.shape[1] != cov.dim_active:
        raise DimensionError(residual.H_A.shape[1], cov.dim_active)
    return _active_update(state, cov, residual, joseph)


class DimensionError(Exception):
    def __init__(self, got, want):
        super().__init__(f"Jacobian columns {got} != active dim {want}")
