"""Synthetic world generation: trajectories, IMU streams, landmark fields, map
keyframes (true and perturbed), triangulated map landmarks, and measurement
schedules with configurable map-match gaps.

Two figure-eight trajectories share one landmark tube: the map trajectory
(laterally offset) provides keyframes expressed in a distinct 6-DoF map frame,
the run trajectory provides IMU data and camera frames.  All randomness flows
from explicit seeds, so identical configs produce byte-identical worlds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .geometry import (CameraModel, Pose3, in_view, project, quat_multiply, quat_to_rot,
                       rot_to_quat, small_angle_quat)
from .map_update import LandmarkMatch, MapMatch
from .propagation import GRAVITY, ImuSample, NoiseConfig
from .vio_update import (BehindCamera, DegenerateBaseline, NoConvergence, triangulate_views)


class InvalidSpec(Exception):
    pass


# Camera axes (x right, y down, z forward) expressed in aerospace body axes
# (x forward, y right, z down); the simulated body IS the camera.
_CAM_IN_AERO = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class TrajectorySpec:
    """Parametric figure-eight (default) or periodic waypoint spline."""

    length_m: float = 940.0
    period_s: float = 94.0
    duration_s: float | None = None
    height_amplitude_m: float = 1.5
    width_ratio: float = 0.45
    pitch_amplitude_rad: float = 0.08
    roll_amplitude_rad: float = 0.05
    imu_rate_hz: float = 200.0
    cam_rate_hz: float = 10.0
    waypoints: np.ndarray | None = None
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.length_m <= 0 or self.period_s <= 0:
            raise InvalidSpec("length and period must be positive")
        if self.length_m / self.period_s < 1e-3:
            raise InvalidSpec("trajectory speed is effectively zero")
        if self.imu_rate_hz < 10.0 * self.cam_rate_hz:
            raise InvalidSpec("IMU rate must be at least 10x the camera rate")

    @property
    def duration(self) -> float:
        return self.period_s if self.duration_s is None else self.duration_s


class Trajectory:
    """Analytic trajectory sampler: position, velocity, acceleration, pose, body rate."""

    def __init__(self, spec: TrajectorySpec, pos_fn, vel_fn, acc_fn, length: float):
        self.spec = spec
        self._pos = pos_fn
        self._vel = vel_fn
        self._acc = acc_fn
        self.length = length
        self.duration = spec.duration

    # -- orientation from the path tangent plus pitch/roll excitation -------
    def _angles(self, t: float):
        w = 2.0 * np.pi / self.spec.period_s
        v = self._vel(t)
        a = self._acc(t)
        yaw = np.arctan2(v[1], v[0])
        den = v[0] ** 2 + v[1] ** 2
        yaw_rate = (v[0] * a[1] - v[1] * a[0]) / den
        pitch = self.spec.pitch_amplitude_rad * np.sin(2.0 * w * t + 0.4)
        pitch_rate = self.spec.pitch_amplitude_rad * 2.0 * w * np.cos(2.0 * w * t + 0.4)
        roll = self.spec.roll_amplitude_rad * np.sin(3.0 * w * t + 1.1)
        roll_rate = self.spec.roll_amplitude_rad * 3.0 * w * np.cos(3.0 * w * t + 1.1)
        return yaw, pitch, roll, yaw_rate, pitch_rate, roll_rate

    def rotation_world_from_body(self, t: float) -> np.ndarray:
        yaw, pitch, roll, *_ = self._angles(t)
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return Rz @ Ry @ Rx @ _CAM_IN_AERO

    def body_rate(self, t: float) -> np.ndarray:
        yaw, pitch, roll, dyaw, dpitch, droll = self._angles(t)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        w_aero = np.array([
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        ])
        return _CAM_IN_AERO.T @ w_aero

    def position(self, t: float) -> np.ndarray:
        return self._pos(t) + self.spec.offset

    def velocity(self, t: float) -> np.ndarray:
        return self._vel(t)

    def acceleration(self, t: float) -> np.ndarray:
        return self._acc(t)

    def pose(self, t: float) -> Pose3:
        """Body/camera pose in the world frame (T_WC)."""
        return Pose3(self.rotation_world_from_body(t), self.position(t))

    def imu_true(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(omega_body, specific force) at time t, noise- and bias-free."""
        R_WB = self.rotation_world_from_body(t)
        return self.body_rate(t), R_WB.T @ (self._acc(t) - GRAVITY)


def gen_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Build the analytic figure-eight (or waypoint spline) at the requested length."""
    w = 2.0 * np.pi / spec.period_s
    if spec.waypoints is not None:
        wp = np.asarray(spec.waypoints, dtype=float)
        if wp.shape[0] < 4:
            raise InvalidSpec("waypoint path needs at least 4 points")
        ts = np.linspace(0.0, spec.period_s, wp.shape[0] + 1)
        cs = CubicSpline(ts, np.vstack([wp, wp[:1]]), axis=0, bc_type="periodic")
        dcs = cs.derivative()
        ddcs = cs.derivative(2)
        length = quad(lambda t: np.linalg.norm(dcs(t)), 0, spec.period_s, limit=200)[0]
        if length <= 0:
            raise InvalidSpec("degenerate waypoint path")
        return Trajectory(spec, lambda t: cs(t % spec.period_s),
                          lambda t: dcs(t % spec.period_s),
                          lambda t: ddcs(t % spec.period_s), length)

    B = spec.width_ratio
    C = spec.height_amplitude_m

    def unit_speed(u):
        # derivative of (sin u, B sin u cos u) wrt u
        return np.sqrt(np.cos(u) ** 2 + (B * np.cos(2 * u)) ** 2)

    unit_len = quad(unit_speed, 0.0, 2.0 * np.pi, limit=400)[0]

    def length_of(scale):
        f = lambda u: np.sqrt(scale**2 * (np.cos(u) ** 2 + (B * np.cos(2 * u)) ** 2)
                              + (2 * C * np.cos(2 * u + 0.9)) ** 2)
        return quad(f, 0.0, 2.0 * np.pi, limit=400)[0]

    lo = spec.length_m / unit_len * 0.5
    hi = spec.length_m / unit_len * 1.5
    A = brentq(lambda s: length_of(s) - spec.length_m, lo, hi, xtol=1e-10)

    def pos(t):
        u = w * t
        return np.array([A * np.sin(u), A * B * np.sin(u) * np.cos(u), C * np.sin(2 * u + 0.9)])

    def vel(t):
        u = w * t
        return w * np.array([A * np.cos(u), A * B * np.cos(2 * u), 2 * C * np.cos(2 * u + 0.9)])

    def acc(t):
        u = w * t
        return w**2 * np.array([-A * np.sin(u), -2 * A * B * np.sin(2 * u),
                                -4 * C * np.sin(2 * u + 0.9)])

    return Trajectory(spec, pos, vel, acc, spec.length_m)


def synthesize_imu(traj: Trajectory, noise: NoiseConfig, seed: int,
                   bias_walk: bool = True,
                   init_bg: np.ndarray | None = None,
                   init_ba: np.ndarray | None = None) -> tuple[list[ImuSample], np.ndarray]:
    """Generate the IMU stream at the spec's rate.

    Each sample represents the interval [t, t+dt) and is evaluated at the
    midpoint, which is what an integrating IMU reports to first order; the
    round-trip propagation test relies on this convention.  Returns the sample
    list and the (n, 6) true bias history [bg, ba].
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / traj.spec.imu_rate_hz
    n = int(round(traj.duration * traj.spec.imu_rate_hz))
    bg = np.zeros(3) if init_bg is None else np.asarray(init_bg, float).copy()
    ba = np.zeros(3) if init_ba is None else np.asarray(init_ba, float).copy()
    sg = noise.sigma_g / np.sqrt(dt)
    sa = noise.sigma_a / np.sqrt(dt)
    samples = []
    biases = np.zeros((n, 6))
    for k in range(n):
        t = round(k * dt, 9)
        tm = k * dt + 0.5 * dt
        w_true, f_true = traj.imu_true(tm)
        wm = w_true + bg + sg * rng.standard_normal(3)
        am = f_true + ba + sa * rng.standard_normal(3)
        samples.append(ImuSample(t, wm, am))
        biases[k, 0:3] = bg
        biases[k, 3:6] = ba
        if bias_walk:
            bg = bg + noise.sigma_bg * np.sqrt(dt) * rng.standard_normal(3)
            ba = ba + noise.sigma_ba * np.sqrt(dt) * rng.standard_normal(3)
    return samples, biases


# ---------------------------------------------------------------------------
# Map construction
# ---------------------------------------------------------------------------

@dataclass
class MapPerturbation:
    sigma_p: float = 0.1
    sigma_theta: float = float(np.sqrt(0.00025))

    def __post_init__(self):
        if self.sigma_p < 0 or self.sigma_theta < 0:
            raise ValueError("perturbation sigmas must be non-negative")


@dataclass
class Keyframe:
    kf_id: int
    q: np.ndarray  # q_G_KF: rotates KF vectors into G
    p: np.ndarray  # KF origin in G
    cov: np.ndarray | None = None

    def pose(self) -> Pose3:
        return Pose3.from_quat(self.q, self.p)


@dataclass
class MapLandmark:
    landmark_id: int              # index into the generating landmark field
    anchor_id: int
    p_anchor: np.ndarray          # triangulated estimate, anchor-frame coords
    observations: list[tuple[int, np.ndarray]]   # (kf_id, noisy pixel at map build)
    p_true_G: np.ndarray          # ground-truth position in the map frame


@dataclass
class GapSchedule:
    intervals: list[tuple[float, float]] = field(default_factory=list)

    def validate(self, duration: float) -> None:
        prev_end = -np.inf
        for a, b in self.intervals:
            if a >= b:
                raise ValueError(f"empty gap interval ({a}, {b})")
            if a < prev_end:
                raise ValueError("gap intervals must be non-overlapping and sorted")
            if b > duration:
                raise ValueError("gap interval exceeds trajectory duration")
            prev_end = b

    def contains(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.intervals)


def perturb_map(keyframes: list[Keyframe], pert: MapPerturbation, seed: int) -> list[Keyframe]:
    """Gaussian-perturbed keyframes with the generating covariance attached."""
    rng = np.random.default_rng(seed)
    cov = np.diag([pert.sigma_theta**2] * 3 + [pert.sigma_p**2] * 3)
    out = []
    for kf in keyframes:
        n_th = pert.sigma_theta * rng.standard_normal(3)
        n_p = pert.sigma_p * rng.standard_normal(3)
        q = quat_multiply(kf.q, small_angle_quat(n_th)) if pert.sigma_theta > 0 else kf.q.copy()
        p = kf.p + n_p
        out.append(Keyframe(kf.kf_id, q, p, cov.copy()))
    return out


def build_map_landmarks(perturbed_kfs: list[Keyframe], true_kfs: list[Keyframe],
                        landmarks_true_G: np.ndarray, cam: CameraModel,
                        pixel_sigma: float, seed: int,
                        max_views: int = 4) -> list[MapLandmark]:
    """Triangulate map landmarks from noisy pixels and noisy keyframe poses.

    Pixels are perfect projections through the TRUE keyframes plus Gaussian
    noise; triangulation then uses the PERTURBED poses, so landmark estimates
    inherit the map's imperfection exactly as stored keyframe covariances say.
    """
    rng = np.random.default_rng(seed)
    true_by_id = {kf.kf_id: kf for kf in true_kfs}
    pert_by_id = {kf.kf_id: kf for kf in perturbed_kfs}
    kf_ids = [kf.kf_id for kf in true_kfs]
    centers = np.array([true_by_id[i].p for i in kf_ids])

    out = []
    for lid, p_G in enumerate(landmarks_true_G):
        d2 = np.einsum("ij,ij->i", centers - p_G, centers - p_G)
        order = np.argsort(d2)
        observers = []
        # Keyframes look along the path, so the ones that see a lateral landmark
        # sit well behind it; scan a generous neighborhood.
        for j in order[:60]:
            if d2[j] > 40.0**2:
                break
            kf = true_by_id[kf_ids[j]]
            p_c = kf.pose().inverse().transform(p_G)
            if 0.5 < p_c[2] < 40.0 and in_view(cam, p_c):
                observers.append((kf.kf_id, p_c))
            if len(observers) >= max_views:
                break
        if len(observers) < 2:
            continue
        obs = []
        for kf_id, p_c in observers:
            uv = project(cam, p_c) + pixel_sigma * rng.standard_normal(2)
            obs.append((kf_id, uv))
        views = []
        for kf_id, _ in observers:
            kf = pert_by_id[kf_id]
            T_KF_G = kf.pose().inverse()
            views.append((T_KF_G.R, kf.p))
        try:
            p_G_est, _ = triangulate_views(views, [uv for _, uv in obs], cam,
                                           min_baseline=0.05, max_depth=60.0, min_depth=0.2)
        except (DegenerateBaseline, BehindCamera, NoConvergence):
            continue
        anchor_id = observers[0][0]
        p_anchor = pert_by_id[anchor_id].pose().inverse().transform(p_G_est)
        out.append(MapLandmark(lid, anchor_id, p_anchor, obs, p_G.copy()))
    return out


# ---------------------------------------------------------------------------
# World assembly and measurement generation
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    traj: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    perturbation: MapPerturbation = field(default_factory=MapPerturbation)
    cam: CameraModel = field(default_factory=CameraModel)
    map_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, 2.0, 0.5]))
    keyframe_spacing_m: float = 4.0
    landmarks_per_m: float = 2.0
    tube_radius: tuple[float, float] = (5.0, 15.0)
    pixel_sigma_track: float = 1.0
    pixel_sigma_match: float = 1.0
    pixel_sigma_map: float = 1.0
    max_tracked: int = 16
    match_rate_hz: float = 4.0
    match_keep_prob: float = 1.0
    match_size: int = 10
    max_co_observations: int = 2
    # True map-frame transform (6-DoF, deliberately not gravity-aligned).
    T_GW_rotvec: np.ndarray = field(default_factory=lambda: np.array([-0.035, 0.05, 0.35]))
    T_GW_translation: np.ndarray = field(default_factory=lambda: np.array([5.0, -3.0, 1.2]))

    def T_GW(self) -> Pose3:
        return Pose3(quat_to_rot(small_angle_quat(self.T_GW_rotvec)).T, self.T_GW_translation)


@dataclass
class SimWorld:
    config: SimConfig
    traj_run: Trajectory
    traj_map: Trajectory
    T_GW: Pose3
    landmarks_W: np.ndarray
    keyframes_true: list[Keyframe]
    keyframes: list[Keyframe]       # perturbed, with covariance
    map_landmarks: list[MapLandmark]
    seed: int

    def true_transform(self) -> Pose3:
        """T_GL: the filter's L frame coincides with the world frame W."""
        return self.T_GW

    def keyframe_by_id(self, kf_id: int) -> Keyframe:
        return self._kf_index[kf_id]

    # Prior-map interface consumed by the filter (same duck type as io.PriorMap).
    def keyframe_pose(self, kf_id: int) -> tuple[np.ndarray, np.ndarray]:
        kf = self._kf_index[kf_id]
        return kf.q, kf.p

    def keyframe_cov(self, kf_id: int) -> np.ndarray:
        return self._kf_index[kf_id].cov

    def __post_init__(self):
        self._kf_index = {kf.kf_id: kf for kf in self.keyframes}
        self._lm_by_anchor: dict[int, list[MapLandmark]] = {}
        for lm in self.map_landmarks:
            self._lm_by_anchor.setdefault(lm.anchor_id, []).append(lm)


def build_world(config: SimConfig, seed: int) -> SimWorld:
    """Deterministic world: trajectories, landmark tube, keyframes, map landmarks."""
    ss = np.random.SeedSequence(seed)
    s_land, s_pert, s_lm = [int(s.generate_state(1)[0]) for s in ss.spawn(3)]

    traj_run = gen_trajectory(config.traj)
    map_spec = TrajectorySpec(**{**config.traj.__dict__, "offset": config.map_offset})
    traj_map = gen_trajectory(map_spec)

    # Landmark tube around the traveled portion of the run trajectory.
    traveled_m = config.traj.length_m * min(1.0, traj_run.duration / config.traj.period_s)
    rng = np.random.default_rng(s_land)
    n_land = max(8, int(traveled_m * config.landmarks_per_m))
    ts = np.linspace(0.0, traj_run.duration, n_land, endpoint=False)
    pts = []
    for t in ts:
        p = traj_run.position(t)
        v = traj_run.velocity(t)
        fwd = v / np.linalg.norm(v)
        side = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
        side /= np.linalg.norm(side)
        up = np.cross(fwd, side)
        r = rng.uniform(*config.tube_radius)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        height = rng.uniform(-3.0, 5.0)
        pts.append(p + r * (np.cos(ang) * side + np.sin(ang) * up) + np.array([0, 0, height]))
    landmarks_W = np.array(pts)

    # True keyframes along the map trajectory at fixed arc spacing, in map frame G.
    T_GW = config.T_GW()
    n_kf = max(2, int(traveled_m / config.keyframe_spacing_m))
    kf_times = np.linspace(0.0, traj_map.duration, n_kf, endpoint=False)
    keyframes_true = []
    for i, t in enumerate(kf_times):
        T_WC = traj_map.pose(t)
        T_GC = T_GW.compose(T_WC)
        keyframes_true.append(Keyframe(i, rot_to_quat(T_GC.R), T_GC.t))

    keyframes = perturb_map(keyframes_true, config.perturbation, s_pert)
    landmarks_G = np.array([T_GW.transform(p) for p in landmarks_W])
    map_landmarks = build_map_landmarks(keyframes, keyframes_true, landmarks_G, config.cam,
                                        config.pixel_sigma_map, s_lm)
    return SimWorld(config, traj_run, traj_map, T_GW, landmarks_W,
                    keyframes_true, keyframes, map_landmarks, seed)


@dataclass
class CameraFrame:
    timestamp: float
    tracks: list[tuple[int, np.ndarray, float]]   # (feature id, pixel, sigma)
    match: MapMatch | None = None


@dataclass
class MeasurementStream:
    imu: list[ImuSample]
    frames: list[CameraFrame]
    true_biases: np.ndarray


def gen_measurements(world: SimWorld, gaps: GapSchedule | None, seed: int,
                     match_mode: str = "MM") -> MeasurementStream:
    """Per-frame feature tracks plus map matches outside the gap intervals.

    Tracking emulation: up to `max_tracked` landmarks stay tracked while they
    remain visible; freed slots are refilled deterministically.  Matches fire
    at the configured cadence with Bernoulli dropout, pairing the current frame
    against the nearest map keyframe's anchored landmarks.
    """
    cfg = world.config
    gaps = gaps or GapSchedule()
    gaps.validate(world.traj_run.duration)
    ss = np.random.SeedSequence(seed)
    s_imu, s_px, s_match = [int(s.generate_state(1)[0]) for s in ss.spawn(3)]

    imu, biases = synthesize_imu(world.traj_run, cfg.noise, s_imu)
    rng = np.random.default_rng(s_px)
    rng_match = np.random.default_rng(s_match)

    n_frames = int(round(world.traj_run.duration * cfg.traj.cam_rate_hz))
    dt_cam = 1.0 / cfg.traj.cam_rate_hz
    match_every = max(1, int(round(cfg.traj.cam_rate_hz / cfg.match_rate_hz)))

    kf_centers_W = np.array([world.T_GW.inverse().transform(kf.p) for kf in world.keyframes_true])
    kf_forward_W = np.array([(world.T_GW.inverse().R @ kf.pose().R)[:, 2]
                             for kf in world.keyframes_true])
    kf_ids = [kf.kf_id for kf in world.keyframes_true]

    tracked: dict[int, bool] = {}
    frames = []
    for k in range(n_frames):
        t = round(k * dt_cam, 9)
        T_WC = world.traj_run.pose(t)
        T_CW = T_WC.inverse()
        rel = (world.landmarks_W - T_WC.t) @ T_CW.R.T
        depth_ok = (rel[:, 2] > 0.5) & (rel[:, 2] < 35.0)
        u = cfg.cam.fx * rel[:, 0] / np.where(depth_ok, rel[:, 2], 1.0) + cfg.cam.cx
        v = cfg.cam.fy * rel[:, 1] / np.where(depth_ok, rel[:, 2], 1.0) + cfg.cam.cy
        visible = depth_ok & (u >= 0) & (u <= cfg.cam.width) & (v >= 0) & (v <= cfg.cam.height)
        vis_ids = np.flatnonzero(visible)

        vis_set = set(int(i) for i in vis_ids)
        tracked = {fid: True for fid in tracked if fid in vis_set}
        for fid in sorted(vis_set):
            if len(tracked) >= cfg.max_tracked:
                break
            if fid not in tracked:
                tracked[fid] = True

        tracks = []
        for fid in sorted(tracked):
            uv = np.array([u[fid], v[fid]]) + cfg.pixel_sigma_track * rng.standard_normal(2)
            tracks.append((fid, uv, cfg.pixel_sigma_track))

        match = None
        if k % match_every == 0 and not gaps.contains(t):
            if rng_match.uniform() <= cfg.match_keep_prob:
                match = _make_match(world, t, T_WC, T_CW, kf_centers_W, kf_forward_W, kf_ids,
                                    rng_match, match_mode)
        frames.append(CameraFrame(t, tracks, match))
    return MeasurementStream(imu, frames, biases)


def _make_match(world: SimWorld, t, T_WC, T_CW, kf_centers_W, kf_forward_W, kf_ids,
                rng, match_mode) -> MapMatch | None:
    cfg = world.config
    cam = cfg.cam
    fwd = T_WC.R[:, 2]
    d = np.linalg.norm(kf_centers_W - T_WC.t, axis=1)
    ang_ok = kf_forward_W @ fwd > 0.5
    candidates = np.flatnonzero((d < 20.0) & ang_ok)
    if candidates.size == 0:
        return None
    candidates = candidates[np.argsort(d[candidates])]

    # Both sides of a match are re-measured per event: matching noise is fresh
    # each time, so repeated matches against a landmark do not replay one fixed
    # pixel-noise realization (the stored map-build pixels only fed triangulation).
    true_kf = {kf.kf_id: kf for kf in world.keyframes_true}
    lms: list[LandmarkMatch] = []
    for ci in candidates[:3]:
        anchor_id = kf_ids[int(ci)]
        for lm in world._lm_by_anchor.get(anchor_id, []):
            p_c = T_CW.transform(world.landmarks_W[lm.landmark_id])
            if not (4.0 < p_c[2] < 35.0 and in_view(cam, p_c)):
                continue
            uv_cur = project(cam, p_c) + cfg.pixel_sigma_match * rng.standard_normal(2)
            p_anchor_c = true_kf[lm.anchor_id].pose().inverse().transform(lm.p_true_G)
            if p_anchor_c[2] <= 1e-6:
                continue
            uv_anchor = project(cam, p_anchor_c) + cfg.pixel_sigma_map * rng.standard_normal(2)
            co = []
            if match_mode == "MM":
                for kid, _ in lm.observations:
                    if kid == lm.anchor_id or len(co) >= cfg.max_co_observations:
                        continue
                    p_kc = true_kf[kid].pose().inverse().transform(lm.p_true_G)
                    if p_kc[2] <= 1e-6:
                        continue
                    co.append((kid, project(cam, p_kc)
                               + cfg.pixel_sigma_map * rng.standard_normal(2)))
            lms.append(LandmarkMatch(lm.landmark_id, lm.anchor_id, lm.p_anchor.copy(),
                                     uv_cur, uv_anchor, co))
            if len(lms) >= cfg.match_size:
                break
        if len(lms) >= cfg.match_size:
            break
    if len(lms) < 4:
        return None
    return MapMatch(t, lms, cfg.pixel_sigma_match, cfg.pixel_sigma_map)
