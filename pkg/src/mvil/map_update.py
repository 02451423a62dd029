"""Map-based measurements: PnP, transform init, the observation stack, Schmidt and
error-compensated updates.

Every matched landmark contributes three kinds of reprojection rows: into the
current image (through the transform chain), into its anchor keyframe, and into
co-observing keyframes.  The landmark block is projected out via its left null
space so landmark covariances never need to be stored; keyframe uncertainty is
carried by the nuisance state and consumed by the Schmidt update at linear cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import (CameraModel, NonPositiveDepth, Pose3, attitude_error, project,
                       projection_jacobian, quat_to_rot, skew)
from .state import ATT, POS, AugmentedState, FejRegistry, PartitionedCovariance
from .vio_update import (LinearizedResidual, RankDeficientFeatureJacobian, SingularInnovation,
                         _active_update, nullspace_project)


class TooFewPoints(Exception):
    pass


class NoConvergence(Exception):
    pass


@dataclass
class LandmarkMatch:
    landmark_id: int
    anchor_id: int
    f_anchor: np.ndarray
    uv_current: np.ndarray
    uv_anchor: np.ndarray
    co_observations: list[tuple[int, np.ndarray]] = field(default_factory=list)


@dataclass
class MapMatch:
    """Feature matchings between the current image and map keyframes at one timestamp."""

    timestamp: float
    landmarks: list[LandmarkMatch]
    sigma_current: float = 1.0
    sigma_map: float = 1.0


@dataclass
class EcuConfig:
    reproj_threshold: float = 20.0
    enabled: bool = True

    def __post_init__(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reprojection threshold must be positive")


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------

def _epnp_control_points(pts: np.ndarray) -> np.ndarray:
    c0 = pts.mean(axis=0)
    centered = pts - c0
    cov = centered.T @ centered / pts.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    ctrl = [c0]
    for k in range(3):
        scale = np.sqrt(max(vals[2 - k], 1e-12))
        ctrl.append(c0 + scale * vecs[:, 2 - k])
    return np.array(ctrl)


def _rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with dst = R @ src + t (Kabsch)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def _reproj_error(R: np.ndarray, t: np.ndarray, pts: np.ndarray, px: np.ndarray,
                  cam: CameraModel) -> float:
    errs = []
    for p, uv in zip(pts, px):
        pc = R @ p + t
        if pc[2] <= 1e-6:
            return np.inf
        errs.append(np.linalg.norm(uv - project(cam, pc)))
    return float(np.mean(errs))


def pnp_pose(points_3d: np.ndarray, pixels: np.ndarray, cam: CameraModel,
             max_iters: int = 15) -> tuple[Pose3, float]:
    """Pose of the camera in the points' frame from 3D-2D correspondences.

    EPnP-style linear initialization followed by Gauss-Newton on the
    reprojection error.  Returns (T_frame_camera, mean reprojection error px).
    """
    pts = np.asarray(points_3d, dtype=float)
    px = np.asarray(pixels, dtype=float)
    n = pts.shape[0]
    if n < 4:
        raise TooFewPoints(f"PnP needs at least 4 points, got {n}")

    ctrl_w = _epnp_control_points(pts)
    basis = (ctrl_w[1:] - ctrl_w[0]).T
    betas_bary, *_ = np.linalg.lstsq(basis, (pts - ctrl_w[0]).T, rcond=None)
    alphas = np.zeros((n, 4))
    alphas[:, 1:] = betas_bary.T
    alphas[:, 0] = 1.0 - betas_bary.T.sum(axis=1)

    un = (px[:, 0] - cam.cx) / cam.fx
    vn = (px[:, 1] - cam.cy) / cam.fy
    M = np.zeros((2 * n, 12))
    for i in range(n):
        for j in range(4):
            M[2 * i, 3 * j] = alphas[i, j]
            M[2 * i, 3 * j + 2] = -alphas[i, j] * un[i]
            M[2 * i + 1, 3 * j + 1] = alphas[i, j]
            M[2 * i + 1, 3 * j + 2] = -alphas[i, j] * vn[i]
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    kernel = Vt[::-1].T  # columns ordered by ascending singular value

    dists_w = [np.linalg.norm(ctrl_w[a] - ctrl_w[b])
               for a in range(4) for b in range(a + 1, 4)]

    def candidate_from(x: np.ndarray):
        ctrl_c = x.reshape(4, 3)
        if (alphas @ ctrl_c)[:, 2].mean() < 0:
            ctrl_c = -ctrl_c
        pts_c = alphas @ ctrl_c
        return _rigid_fit(pts, pts_c)

    candidates = []
    v1 = kernel[:, 0]
    V1 = v1.reshape(4, 3)
    dv1 = [np.linalg.norm(V1[a] - V1[b]) for a in range(4) for b in range(a + 1, 4)]
    denom = float(np.dot(dv1, dv1))
    if denom > 1e-16:
        beta = float(np.dot(dists_w, dv1)) / denom
        candidates.append(candidate_from(beta * v1))
    # Two-vector case: solve the control-point distance system for [b11, b12, b22].
    v2 = kernel[:, 1]
    V2 = v2.reshape(4, 3)
    L = np.zeros((6, 3))
    rho = np.zeros(6)
    idx = 0
    for a in range(4):
        for b in range(a + 1, 4):
            d1 = V1[a] - V1[b]
            d2 = V2[a] - V2[b]
            L[idx] = [d1 @ d1, 2.0 * (d1 @ d2), d2 @ d2]
            rho[idx] = dists_w[idx] ** 2
            idx += 1
    bb, *_ = np.linalg.lstsq(L, rho, rcond=None)
    b1 = np.sqrt(abs(bb[0]))
    b2 = np.sqrt(abs(bb[2])) * (1.0 if bb[1] >= 0 else -1.0)
    if b1 > 1e-12:
        candidates.append(candidate_from(b1 * v1 + b2 * v2))
        candidates.append(candidate_from(b1 * v1 - b2 * v2))
    if not candidates:
        raise NoConvergence("EPnP initialization produced no candidate")

    R, t = min(candidates, key=lambda rt: _reproj_error(rt[0], rt[1], pts, px, cam))

    # Gauss-Newton refinement on SE(3), left-multiplicative rotation error.
    for _ in range(max_iters):
        J = np.zeros((2 * n, 6))
        r = np.zeros(2 * n)
        behind = False
        for i in range(n):
            pc = R @ pts[i] + t
            if pc[2] <= 1e-6:
                behind = True
                break
            Hp = projection_jacobian(cam, pc)
            r[2 * i:2 * i + 2] = px[i] - project(cam, pc)
            J[2 * i:2 * i + 2, 0:3] = Hp @ skew(pc)
            J[2 * i:2 * i + 2, 3:6] = Hp
        if behind:
            raise NoConvergence("point moved behind the camera during refinement")
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        R = (np.eye(3) - skew(step[0:3])) @ R
        U, _, Vt2 = np.linalg.svd(R)
        R = U @ Vt2
        t = t + step[3:6]
        if np.linalg.norm(step) < 1e-12:
            break
    mean_err = _reproj_error(R, t, pts, px, cam)
    if not np.isfinite(mean_err):
        raise NoConvergence("refinement left points behind the camera")
    # (R, t) maps frame points into the camera; invert for the camera pose in frame.
    return Pose3(R, t).inverse(), mean_err


def _match_points_in_anchor(match: MapMatch, map_source) -> tuple[int, np.ndarray, np.ndarray]:
    """All matched landmarks expressed in the dominant anchor keyframe's frame."""
    counts: dict[int, int] = {}
    for lm in match.landmarks:
        counts[lm.anchor_id] = counts.get(lm.anchor_id, 0) + 1
    anchor = max(counts, key=lambda k: counts[k])
    qa, pa = map_source.keyframe_pose(anchor)
    T_KFa_G = Pose3.from_quat(qa, pa).inverse()
    pts, px = [], []
    for lm in match.landmarks:
        if lm.anchor_id == anchor:
            pts.append(lm.f_anchor)
        else:
            qb, pb = map_source.keyframe_pose(lm.anchor_id)
            pts.append(T_KFa_G.transform(Pose3.from_quat(qb, pb).transform(lm.f_anchor)))
        px.append(lm.uv_current)
    return anchor, np.array(pts), np.array(px)


def transform_from_pnp(match: MapMatch, map_source, cam: CameraModel,
                       body_pose_in_odom: Pose3) -> Pose3:
    """T_GL recomputed through the PnP chain: T_G_KF ∘ T_KF_C ∘ (T_L_C)^-1."""
    anchor, pts, px = _match_points_in_anchor(match, map_source)
    T_KFa_C, _ = pnp_pose(pts, px, cam)
    qa, pa = map_source.keyframe_pose(anchor)
    return Pose3.from_quat(qa, pa).compose(T_KFa_C).compose(body_pose_in_odom.inverse())


def refine_transform(match: MapMatch, map_source, cam: CameraModel,
                     body_pose_in_odom: Pose3, T_GL: Pose3,
                     max_iters: int = 10) -> Pose3:
    """Gauss-Newton on T_GL over all matched landmarks and anchors jointly.

    The single-anchor PnP chain inherits that anchor's pose error scaled by a
    long lever arm; refining against every matched landmark averages the
    anchor errors down and gives a much better linearization point to freeze.
    """
    T_CL = body_pose_in_odom.inverse()
    pts_G, px = [], []
    for lm in match.landmarks:
        qa, pa = map_source.keyframe_pose(lm.anchor_id)
        pts_G.append(Pose3.from_quat(qa, pa).transform(lm.f_anchor))
        px.append(lm.uv_current)
    pts_G = np.array(pts_G)
    px = np.array(px)

    R_GL = T_GL.R.copy()
    p_GL = T_GL.t.copy()
    for _ in range(max_iters):
        J = np.zeros((2 * len(px), 6))
        r = np.zeros(2 * len(px))
        for i, (pg, uv) in enumerate(zip(pts_G, px)):
            p_L = R_GL.T @ (pg - p_GL)
            p_C = T_CL.transform(p_L)
            if p_C[2] <= 1e-6:
                continue
            Hp = projection_jacobian(cam, p_C)
            M = Hp @ T_CL.R @ R_GL.T
            r[2 * i:2 * i + 2] = uv - project(cam, p_C)
            J[2 * i:2 * i + 2, 0:3] = -M @ skew(pg - p_GL)
            J[2 * i:2 * i + 2, 3:6] = -M
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        R_GL = (np.eye(3) - skew(step[0:3])) @ R_GL
        U, _, Vt = np.linalg.svd(R_GL)
        R_GL = U @ Vt
        p_GL = p_GL + step[3:6]
        if np.linalg.norm(step) < 1e-10:
            break
    return Pose3(R_GL, p_GL)


def init_transform(state: AugmentedState, cov: PartitionedCovariance, match: MapMatch,
                   map_source, cam: CameraModel, P_init: np.ndarray,
                   registry: FejRegistry | None = None) -> Pose3:
    """Initialize x_T from the first map match and augment it into the state."""
    from .state import augment_transform

    body = state.imu.pose_in_odom()
    T_GL = transform_from_pnp(match, map_source, cam, body)
    T_GL = refine_transform(match, map_source, cam, body, T_GL)
    augment_transform(state, cov, T_GL, P_init, registry)
    return T_GL


# ---------------------------------------------------------------------------
# Observation stack
# ---------------------------------------------------------------------------

def _linearization_points(state, registry, fej, timestamp):
    """(R_imu, p_imu, R_T, p_T) at which map Jacobians are evaluated.

    Before the transform first-estimate has been frozen (delayed-freeze
    configurations), the current transform estimate is used in its place.
    """
    if fej and registry is not None:
        q_lin, _, p_lin = registry.point_for(("imu", timestamp),
                                             (state.imu.q, state.imu.v, state.imu.p))
        if registry.enabled and not registry.has_transform():
            qT_lin, pT_lin = state.transform.q, state.transform.p
        else:
            qT_lin, pT_lin = registry.point_for(("transform",),
                                                (state.transform.q, state.transform.p))
    else:
        q_lin, p_lin = state.imu.q, state.imu.p
        qT_lin, pT_lin = state.transform.q, state.transform.p
    return quat_to_rot(q_lin), p_lin, quat_to_rot(qT_lin), pT_lin


def _landmark_rows(state, lm: LandmarkMatch, timestamp, cam, lin, mode,
                   sigma_cur, sigma_map, anchor_pose, transform_eval=None,
                   compensation=None, perfect_map=False):
    """Whitened 2-row blocks for one landmark.

    Returns (rows_r, rows_HA, rows_HN, rows_Hf, cur_err_px) or None when the
    current-image row is unusable (without it the rows carry no active-state
    information under the Schmidt contract).
    """
    dA = state.dim_active
    imu = state.imu
    R_I_cur = quat_to_rot(imu.q)
    q_T, p_T = state.transform.q, state.transform.p
    if transform_eval is not None:
        q_T, p_T = transform_eval
    R_T_cur = quat_to_rot(q_T)
    qa, pa = anchor_pose
    R_Ka = quat_to_rot(qa)
    R_I, p_lin, R_T, pT_lin = lin

    f = lm.f_anchor
    rows_r, rows_HA, rows_HN, rows_Hf = [], [], [], []

    # (a) current-image reprojection through the transform chain
    p_G = R_Ka @ f + pa  # keyframes and landmarks are constants of the map
    p_L_cur = R_T_cur.T @ (p_G - p_T)
    p_C_cur = R_I_cur @ (p_L_cur - imu.p)
    try:
        pred = project(cam, p_C_cur)
    except NonPositiveDepth:
        return None
    r_a = lm.uv_current - pred
    cur_err = float(np.linalg.norm(r_a))
    if compensation is not None:
        r_a = r_a - compensation["H_aT"] @ compensation["delta"]

    p_L = R_T.T @ (p_G - pT_lin)
    p_C = R_I @ (p_L - p_lin)
    if p_C[2] <= 1e-6:
        return None
    Hp = projection_jacobian(cam, p_C)
    HA = np.zeros((2, dA))
    HA[:, ATT] = Hp @ skew(p_C)
    HA[:, POS] = -Hp @ R_I
    M_L = Hp @ R_I @ R_T.T
    if state.transform.initialized:
        ts = state.transform_slice()
        HA[:, ts.start:ts.start + 3] = -M_L @ skew(p_G - pT_lin)
        HA[:, ts.start + 3:ts.stop] = -M_L
    w = 1.0 / sigma_cur
    rows_r.append(r_a * w)
    rows_HA.append(HA * w)
    rows_HN.append({lm.anchor_id: (M_L @ skew(p_G - pa) * w, M_L * w)})
    rows_Hf.append(M_L @ R_Ka * w)

    if perfect_map:
        return rows_r, rows_HA, rows_HN, rows_Hf, cur_err

    # (b) reprojection into the anchor keyframe (depends on the landmark only)
    try:
        pred_b = project(cam, f)
        Hp_b = projection_jacobian(cam, f)
        w = 1.0 / sigma_map
        rows_r.append((lm.uv_anchor - pred_b) * w)
        rows_HA.append(np.zeros((2, dA)))
        rows_HN.append({})
        rows_Hf.append(Hp_b * w)
    except NonPositiveDepth:
        pass

    # (c) reprojections into co-observing keyframes (multi-frame matching)
    if mode == "MM":
        for kf_id, uv in lm.co_observations:
            if kf_id not in state.keyframes:
                continue
            qc, pc_ = state.keyframes.pose(kf_id)
            R_Kc = quat_to_rot(qc)
            p_Kc = R_Kc.T @ (p_G - pc_)
            try:
                pred_c = project(cam, p_Kc)
            except NonPositiveDepth:
                continue
            Hp_c = projection_jacobian(cam, p_Kc)
            M_c = Hp_c @ R_Kc.T
            w = 1.0 / sigma_map
            rows_r.append((uv - pred_c) * w)
            rows_HA.append(np.zeros((2, dA)))
            rows_HN.append({
                lm.anchor_id: (M_c @ skew(p_G - pa) * w, M_c * w),
                kf_id: (-M_c @ skew(p_G - pc_) * w, -M_c * w),
            })
            rows_Hf.append(M_c @ R_Ka * w)

    return rows_r, rows_HA, rows_HN, rows_Hf, cur_err


def build_map_residual(state: AugmentedState, match: MapMatch, map_source,
                       cam: CameraModel, fej: bool = False,
                       registry: FejRegistry | None = None, mode: str = "MM",
                       perfect_map: bool = False,
                       _transform_eval=None, _compensation=None) -> LinearizedResidual | None:
    """Stacked, landmark-marginalized map residual for one match.

    Keyframes must already be present in the nuisance state (added on demand by
    the caller) unless `perfect_map` is set, in which case keyframe and
    landmark uncertainties are deliberately ignored and only current-image rows
    are produced (the overconfident constant-map ablation).
    """
    dA = state.dim_active
    lin = _linearization_points(state, registry, fej, match.timestamp)
    out_r, out_HA = [], []
    out_HN: list[dict] = []
    cur_errs = []

    for lm in match.landmarks:
        if perfect_map:
            anchor_pose = map_source.keyframe_pose(lm.anchor_id)
        else:
            if lm.anchor_id not in state.keyframes:
                continue
            anchor_pose = state.keyframes.pose(lm.anchor_id)
        built = _landmark_rows(state, lm, match.timestamp, cam, lin, mode,
                               match.sigma_current, match.sigma_map, anchor_pose,
                               transform_eval=_transform_eval,
                               compensation=None if _compensation is None
                               else _compensation.get(lm.landmark_id),
                               perfect_map=perfect_map)
        if built is None:
            continue
        rows_r, rows_HA, rows_HN, rows_Hf, cur_err = built
        cur_errs.append(cur_err)

        if perfect_map:
            out_r.append(rows_r[0])
            out_HA.append(rows_HA[0])
            out_HN.append({})
            continue

        r = np.concatenate(rows_r)
        if r.shape[0] <= 3:
            continue
        HA = np.vstack(rows_HA)
        Hf = np.vstack(rows_Hf)
        kf_ids = sorted({k for d in rows_HN for k in d})
        HN = np.zeros((r.shape[0], 6 * len(kf_ids)))
        for ri, d in enumerate(rows_HN):
            for k, (Hth, Hpp) in d.items():
                c = 6 * kf_ids.index(k)
                HN[2 * ri:2 * ri + 2, c:c + 3] = Hth
                HN[2 * ri:2 * ri + 2, c + 3:c + 6] = Hpp
        try:
            r_p, H_p = nullspace_project(r, np.hstack([HA, HN]), Hf)
        except RankDeficientFeatureJacobian:
            continue
        out_r.append(r_p)
        out_HA.append(H_p[:, :dA])
        out_HN.append({k: H_p[:, dA + 6 * i:dA + 6 * i + 6] for i, k in enumerate(kf_ids)})

    if not out_r:
        return None
    r_all = np.concatenate(out_r)
    HA_all = np.vstack(out_HA)
    dN = state.dim_nuisance
    HN_all = np.zeros((r_all.shape[0], dN)) if dN else None
    touched: set[int] = set()
    blocks = []
    ofs = 0
    for r_blk, d in zip(out_r, out_HN):
        nr = r_blk.shape[0]
        for k, blk in d.items():
            s = state.keyframe_slice(k)
            HN_all[ofs:ofs + nr, s] += blk
            touched.update(range(s.start, s.stop))
        blocks.append((ofs, ofs + nr))
        ofs += nr
    cols = np.array(sorted(touched), dtype=int) if touched else None
    res = LinearizedResidual(r_all, HA_all, HN_all, nuisance_cols=cols, blocks=blocks)
    res.mean_reproj_px = float(np.mean(cur_errs)) if cur_errs else 0.0
    return res


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

def schmidt_update(state: AugmentedState, cov: PartitionedCovariance,
                   residual: LinearizedResidual) -> np.ndarray:
    """Partial update: optimal gain on the active part, zero gain on the nuisance.

    Covariance follows the partitioned form with the active/nuisance cross term
    retained; cost is linear in the nuisance dimension.  The nuisance mean and
    P_NN are untouched by construction.
    """
    if residual.H_A.shape[1] != cov.dim_active:
        raise ValueError("active Jacobian width does not match the covariance")
    no_nuisance = (residual.H_N is None or residual.H_N.shape[1] == 0
                   or residual.nuisance_cols is None or len(residual.nuisance_cols) == 0)
    if no_nuisance:
        return _active_update(state, cov, residual, joseph=False)

    H_A = residual.H_A
    cols = residual.nuisance_cols
    Hn = residual.H_N[:, cols]
    PAN_c = cov.P_AN[:, cols]
    PNN_c = cov.P_NN[np.ix_(cols, cols)]
    R = residual.noise()

    U = cov.P_AA @ H_A.T + PAN_c @ Hn.T  # pre-gain for the active rows
    X = H_A @ PAN_c @ Hn.T
    S = H_A @ cov.P_AA @ H_A.T + X + X.T + Hn @ PNN_c @ Hn.T + R
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance not positive definite") from None
    K_A = scipy.linalg.cho_solve(cf, U.T, check_finite=False).T
    dx = K_A @ residual.r

    cov.P_AA = cov.P_AA - K_A @ U.T
    # Cross term: P_AN <- P_AN - K_A (H_A P_AN + H_N P_NN), linear in the nuisance dim.
    C = H_A @ cov.P_AN + Hn @ cov.P_NN[cols, :]
    cov.P_AN = cov.P_AN - K_A @ C
    cov.P_AA = 0.5 * (cov.P_AA + cov.P_AA.T)
    state.apply_active_correction(dx)
    return dx


def full_ekf_update(state: AugmentedState, cov: PartitionedCovariance,
                    residual: LinearizedResidual,
                    apply_nuisance_mean: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Full-gain reference update (quadratic in the nuisance dimension).

    Returns (dx_active, dx_nuisance).  The nuisance mean correction is only
    applied to the keyframe set on request since keyframe entries are
    write-once under the Schmidt contract.
    """
    H_A = residual.H_A
    dN = cov.dim_nuisance
    H_N = residual.H_N if residual.H_N is not None else np.zeros((residual.rows, dN))
    R = residual.noise()

    U_A = cov.P_AA @ H_A.T + cov.P_AN @ H_N.T
    U_N = cov.P_AN.T @ H_A.T + cov.P_NN @ H_N.T
    S = H_A @ U_A + H_N @ U_N + R
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance not positive definite") from None
    K_A = scipy.linalg.cho_solve(cf, U_A.T, check_finite=False).T
    K_N = scipy.linalg.cho_solve(cf, U_N.T, check_finite=False).T
    dx_A = K_A @ residual.r
    dx_N = K_N @ residual.r

    cov.P_AA = cov.P_AA - K_A @ U_A.T
    cov.P_AN = cov.P_AN - K_A @ U_N.T
    cov.P_NN = cov.P_NN - K_N @ U_N.T
    cov.symmetrize(nuisance=True)
    state.apply_active_correction(dx_A)
    if apply_nuisance_mean and dN:
        _apply_nuisance_correction(state, dx_N)
    return dx_A, dx_N


def _apply_nuisance_correction(state: AugmentedState, dx_N: np.ndarray) -> None:
    # Reserved for the full-gain reference mode; Schmidt never calls this.
    from .geometry import quat_multiply, small_angle_quat

    for kf_id in state.keyframes.ids():
        s = state.keyframe_slice(kf_id)
        q, p = state.keyframes.pose(kf_id)
        q_new = quat_multiply(small_angle_quat(dx_N[s][:3]), q)
        p_new = p + dx_N[s][3:]
        q_new.setflags(write=False)
        p_new.setflags(write=False)
        state.keyframes._poses[kf_id] = (q_new, p_new)


# ---------------------------------------------------------------------------
# Error-compensated update
# ---------------------------------------------------------------------------

def ecu_trigger(residual: LinearizedResidual, config: EcuConfig) -> bool:
    """True iff the mean current-image reprojection error exceeds the threshold."""
    if not config.enabled:
        return False
    err = getattr(residual, "mean_reproj_px", None)
    return err is not None and err > config.reproj_threshold


def ecu_residual(state: AugmentedState, match: MapMatch, map_source, cam: CameraModel,
                 registry: FejRegistry | None, fej: bool = True,
                 mode: str = "MM") -> LinearizedResidual | None:
    """Compensated residual: the evaluation point's transform block is replaced by
    the PnP-chain T_GL while the FEJ Jacobian is kept, and H_FEJ (x_hat - x_r)
    is subtracted so the residual stays consistent with the frozen
    linearization (the preserved observability is untouched).
    """
    T_GL_r = transform_from_pnp(match, map_source, cam, state.imu.pose_in_odom())
    q_r = T_GL_r.quat()
    p_r = T_GL_r.t

    # x_hat ⊖ x_r in the error-state parameterization, transform block only.
    dth = attitude_error(quat_to_rot(state.transform.q), T_GL_r.R)
    dp = state.transform.p - p_r
    delta = np.concatenate([dth, dp])

    lin = _linearization_points(state, registry, fej, match.timestamp)
    R_I, p_lin, R_T, pT_lin = lin
    comp = {}
    for lm in match.landmarks:
        if lm.anchor_id not in state.keyframes:
            continue
        qa, pa = state.keyframes.pose(lm.anchor_id)
        p_G = quat_to_rot(qa) @ lm.f_anchor + pa
        p_C = R_I @ (R_T.T @ (p_G - pT_lin) - p_lin)
        if p_C[2] <= 1e-6:
            continue
        Hp = projection_jacobian(cam, p_C)
        M_L = Hp @ R_I @ R_T.T
        # Unwhitened: the compensation acts on the raw pixel residual.
        H_aT = np.hstack([-M_L @ skew(p_G - pT_lin), -M_L])
        comp[lm.landmark_id] = {"H_aT": H_aT, "delta": delta}

    return build_map_residual(state, match, map_source, cam, fej=fej, registry=registry,
                              mode=mode, _transform_eval=(q_r, p_r), _compensation=comp)
