"""The localization filter: MSCKF-style odometry plus Schmidt map updates.

Event order per camera frame: propagate to the frame time, apply the composed
covariance propagation, retire the oldest clone (consuming its feature tracks)
when the window is full, clone the current pose, update with dead tracks, then
process the map match if one arrived.  First-estimate bookkeeping happens at
each of these steps so Jacobians can be pinned when FEJ is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose3, quat_to_rot
from .map_update import (EcuConfig, MapMatch, NoConvergence, TooFewPoints, build_map_residual,
                         ecu_residual, ecu_trigger, full_ekf_update, init_transform,
                         schmidt_update)
from .propagation import (GRAVITY, ImuSample, NoiseConfig, PropagationAccumulator,
                          apply_imu_block_propagation, closed_form_block,
                          propagate_mean_with_jacobian)
from .state import (AugmentedState, FejRegistry, PartitionedCovariance, add_keyframes,
                    augment_clone, marginalize_oldest)
from .vio_update import (BehindCamera, DegenerateBaseline, FeatureTrack, LinearizedResidual,
                         NoConvergence as TriNoConvergence, RankDeficientFeatureJacobian,
                         SingularInnovation, chi2_gate, ekf_update_active, linearize_track,
                         nullspace_project, triangulate)


@dataclass
class FilterConfig:
    window_size: int = 11
    fej: bool = True
    use_map: bool = True
    map_mode: str = "MM"                  # SM drops co-observation rows
    map_uncertainty: str = "schmidt"      # schmidt | perfect | full-ekf
    ecu: EcuConfig = field(default_factory=lambda: EcuConfig(enabled=False))
    joseph: bool = True
    gate_level: float = 0.95
    gate_map: bool = True
    # Number of accepted map updates before the transform linearization point is
    # frozen.  The very first PnP estimate inherits keyframe/landmark noise at
    # full lever arm; letting a few Schmidt updates converge it first gives the
    # FEJ machinery a usable point to pin.  Zero freezes at initialization.
    fej_transform_delay: int = 8
    triangulation_max_rms_px: float = 3.0
    min_track_length: int = 3
    # Full eigenvalue PSD check every N frames (symmetrization happens always).
    psd_check_interval: int = 10
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    cam: CameraModel = field(default_factory=CameraModel)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    transform_prior: np.ndarray = field(
        default_factory=lambda: np.diag([0.25, 0.25, 0.25, 4.0, 4.0, 4.0]))
    init_sigmas: np.ndarray = field(default_factory=lambda: np.array(
        [1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 1e-3, 1e-6, 1e-6, 1e-6,
         1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 1e-3]))


@dataclass
class FilterStats:
    local_updates: int = 0
    local_rejected: int = 0
    map_updates: int = 0
    map_rejected: int = 0
    map_skipped: int = 0
    ecu_fires: int = 0
    tracks_failed: int = 0


class MvilFilter:
    def __init__(self, config: FilterConfig, prior_map=None):
        self.config = config
        self.map = prior_map
        self.state = AugmentedState(config.window_size)
        self.cov = PartitionedCovariance(np.diag(config.init_sigmas**2))
        self.registry = FejRegistry(enabled=config.fej)
        self.acc = PropagationAccumulator(noise=config.noise)
        self.tracks: dict[int, FeatureTrack] = {}
        self.stats = FilterStats()
        self.t = None
        self.harvest: list[dict] = []
        self.harvest_enabled = False

    # -- lifecycle ---------------------------------------------------------
    def initialize(self, t0: float, q, v, p, bg=None, ba=None) -> None:
        self.state.imu.q = np.asarray(q, float).copy()
        self.state.imu.v = np.asarray(v, float).copy()
        self.state.imu.p = np.asarray(p, float).copy()
        if bg is not None:
            self.state.imu.bg = np.asarray(bg, float).copy()
        if ba is not None:
            self.state.imu.ba = np.asarray(ba, float).copy()
        self.t = t0
        self.registry.record_imu(t0, self.state.imu.q, self.state.imu.v, self.state.imu.p)

    def process_imu(self, sample: ImuSample, t_next: float) -> None:
        """Propagate the mean over [sample.timestamp, t_next] and fold the step
        transition into the covariance accumulator (applied at the next frame)."""
        dt = t_next - sample.timestamp
        imu_before = self.state.imu
        imu_after, Phi = propagate_mean_with_jacobian(imu_before, sample, dt, self.config.gravity)
        if self.config.fej:
            q0, v0, p0 = self.registry.point_for(("imu", self.t))
        else:
            q0, v0, p0 = imu_before.q, imu_before.v, imu_before.p
        Phi[0:9, 0:9] = closed_form_block(q0, v0, p0, imu_after.q, imu_after.v, imu_after.p,
                                          dt, self.config.gravity)
        self.acc.add_step(Phi, imu_before, dt)
        self.state.imu = imu_after
        self.t = t_next
        self.registry.record_imu(t_next, imu_after.q, imu_after.v, imu_after.p)

    def _flush_propagation(self) -> None:
        apply_imu_block_propagation(self.cov, self.acc.Phi, self.acc.Q)
        self.acc.reset()

    # -- camera frame ------------------------------------------------------
    def process_frame(self, t: float, tracks: list[tuple[int, np.ndarray, float]],
                      match: MapMatch | None) -> None:
        self._flush_propagation()
        if self.harvest_enabled:
            rec = {"t": t, "q_prop": self.state.imu.q.copy(), "v_prop": self.state.imu.v.copy(),
                   "p_prop": self.state.imu.p.copy()}
            if self.state.transform.initialized:
                rec["qT_prop"] = self.state.transform.q.copy()
                rec["pT_prop"] = self.state.transform.p.copy()

        # One batched local update per frame: tracks that just died plus tracks
        # about to lose their oldest observation to marginalization.
        seen = {fid for fid, _, _ in tracks}
        consume = [fid for fid in self.tracks if fid not in seen]
        window_full = len(self.state.clones) >= self.config.window_size
        if window_full:
            oldest_t = self.state.clones.clones[0].timestamp
            consume.extend(fid for fid, tr in self.tracks.items()
                           if fid not in consume
                           and any(ot == oldest_t for ot, _, _ in tr.observations))
        self._consume_tracks(consume)
        if window_full:
            oldest_t = self.state.clones.clones[0].timestamp
            marginalize_oldest(self.state, self.cov, self.registry)
            for tr in self.tracks.values():
                tr.observations = [o for o in tr.observations if o[0] != oldest_t]

        augment_clone(self.state, self.cov, t, self.registry)
        for fid, uv, sigma in tracks:
            self.tracks.setdefault(fid, FeatureTrack(fid)).add(t, uv, sigma)

        if match is not None and self.config.use_map and self.map is not None:
            self._process_match(match)

        self._frame_count = getattr(self, "_frame_count", 0) + 1
        if self._frame_count % self.config.psd_check_interval == 0:
            self.cov.enforce_psd()
        else:
            self.cov.symmetrize()
        if self.harvest_enabled:
            rec.update({"q_upd": self.state.imu.q.copy(), "v_upd": self.state.imu.v.copy(),
                        "p_upd": self.state.imu.p.copy()})
            if self.state.transform.initialized:
                rec["qT_upd"] = self.state.transform.q.copy()
                rec["pT_upd"] = self.state.transform.p.copy()
            if self.registry.enabled and self.registry.has_transform():
                qf, pf = self.registry.point_for(("transform",))
                rec["qT_fej"] = qf.copy()
                rec["pT_fej"] = pf.copy()
            self.harvest.append(rec)

    # -- local features ----------------------------------------------------
    def _consume_tracks(self, feature_ids) -> None:
        rows_r, rows_H = [], []
        for fid in feature_ids:
            track = self.tracks.pop(fid)
            if len(track) < self.config.min_track_length:
                continue
            try:
                f_hat, rms = triangulate(track, self.state.clones, self.config.cam)
            except (DegenerateBaseline, BehindCamera, TriNoConvergence):
                self.stats.tracks_failed += 1
                continue
            if rms > self.config.triangulation_max_rms_px:
                self.stats.tracks_failed += 1
                continue
            # Key by track instance: a re-tracked feature id is a fresh track with
            # a fresh first estimate, not a reuse of the stale one.
            key = ("local", fid, track.observations[0][0])
            if self.config.fej and not self.registry.has_feature(key):
                self.registry.record_feature(key, f_hat)
            r, H_x, H_f = linearize_track(
                _keyed_track(track, key), self.state, f_hat, self.config.cam,
                self.config.fej, self.registry)
            if r.shape[0] <= 3:
                continue
            try:
                r_p, H_p = nullspace_project(r, H_x, H_f)
            except RankDeficientFeatureJacobian:
                self.stats.tracks_failed += 1
                continue
            res = LinearizedResidual(r_p, H_p)
            if not chi2_gate(res, self.cov, self.config.gate_level):
                self.stats.local_rejected += 1
                continue
            rows_r.append(r_p)
            rows_H.append(H_p)
        if not rows_r:
            return
        res = LinearizedResidual(np.concatenate(rows_r), np.vstack(rows_H))
        try:
            ekf_update_active(self.state, self.cov, res, joseph=self.config.joseph)
            self.stats.local_updates += 1
        except SingularInnovation:
            self.stats.local_rejected += 1

    # -- map match ---------------------------------------------------------
    def _ensure_keyframes(self, match: MapMatch) -> None:
        needed = []
        for lm in match.landmarks:
            ids = [lm.anchor_id] + ([k for k, _ in lm.co_observations]
                                    if self.config.map_mode == "MM" else [])
            for kid in ids:
                if kid not in self.state.keyframes and kid not in [e[0] for e in needed]:
                    q, p = self.map.keyframe_pose(kid)
                    needed.append((kid, q, p, self.map.keyframe_cov(kid)))
        if needed:
            add_keyframes(self.state, self.cov, needed, self.registry)

    def _process_match(self, match: MapMatch) -> None:
        perfect = self.config.map_uncertainty == "perfect"
        if not perfect:
            self._ensure_keyframes(match)
        if not self.state.transform.initialized:
            try:
                # With a delayed freeze the registry transform entry is written
                # later, once the estimate has converged through a few updates.
                reg = self.registry if self.config.fej_transform_delay == 0 else None
                init_transform(self.state, self.cov, match, self.map, self.config.cam,
                               self.config.transform_prior, reg)
            except (TooFewPoints, NoConvergence, np.linalg.LinAlgError):
                self.stats.map_skipped += 1
                return

        residual = build_map_residual(self.state, match, self.map, self.config.cam,
                                      fej=self.config.fej, registry=self.registry,
                                      mode=self.config.map_mode, perfect_map=perfect)
        if residual is None:
            self.stats.map_skipped += 1
            return
        if ecu_trigger(residual, self.config.ecu):
            try:
                comp = ecu_residual(self.state, match, self.map, self.config.cam,
                                    self.registry, fej=self.config.fej,
                                    mode=self.config.map_mode)
                if comp is not None:
                    residual = comp
                    self.stats.ecu_fires += 1
            except (TooFewPoints, NoConvergence):
                pass

        if self.config.gate_map:
            residual = self._gate_map_blocks(residual)
            if residual is None:
                self.stats.map_rejected += 1
                return
        try:
            if perfect:
                ekf_update_active(self.state, self.cov, residual, joseph=self.config.joseph)
            elif self.config.map_uncertainty == "full-ekf":
                full_ekf_update(self.state, self.cov, residual, apply_nuisance_mean=True)
            else:
                schmidt_update(self.state, self.cov, residual)
            self.stats.map_updates += 1
        except SingularInnovation:
            self.stats.map_rejected += 1
            return
        if (self.config.fej and not self.registry.has_transform()
                and self.stats.map_updates >= self.config.fej_transform_delay):
            self.registry.record_transform(self.state.transform.q, self.state.transform.p)

    def _gate_map_blocks(self, residual):
        """Chi-square gate each landmark's rows; keep the survivors stacked.

        Per-landmark gating matches the local-feature granularity: a batch gate
        over the whole stack rejects wholesale on the mild linearization misfit
        FEJ carries right after initialization.
        """
        if residual.blocks is None:
            return residual if chi2_gate(residual, self.cov, self.config.gate_level) else None
        keep_rows = []
        for a, b in residual.blocks:
            sub = residual.row_subset(np.arange(a, b))
            if chi2_gate(sub, self.cov, self.config.gate_level):
                keep_rows.extend(range(a, b))
        if not keep_rows:
            return None
        kept = residual.row_subset(np.array(keep_rows, dtype=int))
        return kept

    # -- accessors ----------------------------------------------------------
    def body_pose_in_odom(self) -> Pose3:
        return self.state.imu.pose_in_odom()

    def global_pose(self) -> Pose3 | None:
        if not self.state.transform.initialized:
            return None
        return self.state.transform.pose().compose(self.body_pose_in_odom())


def _keyed_track(track: FeatureTrack, key) -> FeatureTrack:
    t = FeatureTrack(key)
    t.observations = track.observations
    return t
