"""Augmented filter state, partitioned covariance, and linearization-point registry.

Error-state layout is fixed as ``[imu(15) | clones(6 each) | transform(6)]`` for
the active part and ``[keyframes(6 each)]`` for the nuisance part.  Per-block
error order is ``[dtheta, dv, dp, dbg, dba]`` for the IMU and ``[dtheta, dp]``
for clones, transform, and keyframes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose3, quat_multiply, quat_normalize, small_angle_quat

IMU_DIM = 15
ATT = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


class WindowFull(Exception):
    pass


class AlreadyInitialized(Exception):
    pass


class DuplicateKeyframe(Exception):
    pass


class MissingFejEntry(Exception):
    """A Jacobian was requested before its state existed — a logic bug upstream."""


@dataclass
class ImuState:
    """Current IMU state: q_IL rotates odometry-frame (L) vectors into the body (I)."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "ImuState":
        return ImuState(self.q.copy(), self.v.copy(), self.p.copy(), self.bg.copy(), self.ba.copy())

    def pose_in_odom(self) -> Pose3:
        """T_LI: body pose in the odometry frame (camera pose, identity extrinsics)."""
        from .geometry import quat_to_rot

        return Pose3(quat_to_rot(self.q).T, self.p.copy())


@dataclass
class Clone:
    timestamp: float
    q: np.ndarray
    p: np.ndarray


class CloneWindow:
    """Sliding window of historical body poses, oldest first."""

    def __init__(self, max_size: int = 11):
        self.max_size = max_size
        self.clones: list[Clone] = []

    def __len__(self) -> int:
        return len(self.clones)

    def __iter__(self):
        return iter(self.clones)

    def index_of(self, timestamp: float) -> int:
        for i, c in enumerate(self.clones):
            if c.timestamp == timestamp:
                return i
        raise KeyError(f"no clone at t={timestamp}")

    def at(self, timestamp: float) -> Clone:
        return self.clones[self.index_of(timestamp)]

    def timestamps(self) -> list[float]:
        return [c.timestamp for c in self.clones]


@dataclass
class MapTransform:
    """Relative transform x_T = (q_GL, p_GL) between map frame G and odometry frame L."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initialized: bool = False

    def pose(self) -> Pose3:
        return Pose3.from_quat(self.q, self.p)


class KeyframeSet:
    """Nuisance map keyframe poses; entries are never modified after insertion."""

    def __init__(self):
        self._poses: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._order: list[int] = []

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, kf_id: int) -> bool:
        return kf_id in self._poses

    def ids(self) -> list[int]:
        return list(self._order)

    def insert(self, kf_id: int, q: np.ndarray, p: np.ndarray) -> None:
        if kf_id in self._poses:
            raise DuplicateKeyframe(f"keyframe {kf_id} already in state")
        q = quat_normalize(q)
        p = np.asarray(p, dtype=float).copy()
        q.setflags(write=False)
        p.setflags(write=False)
        self._poses[kf_id] = (q, p)
        self._order.append(kf_id)

    def pose(self, kf_id: int) -> tuple[np.ndarray, np.ndarray]:
        return self._poses[kf_id]

    def column_index(self, kf_id: int) -> int:
        """Start column of this keyframe's 6-dim error block within the nuisance part."""
        return 6 * self._order.index(kf_id)

    def mean_bytes(self) -> bytes:
        """Serialized nuisance mean, for bit-identity checks across Schmidt updates."""
        parts = []
        for kf_id in self._order:
            q, p = self._poses[kf_id]
            parts.append(q.tobytes())
            parts.append(p.tobytes())
        return b"".join(parts)


class AugmentedState:
    def __init__(self, window_size: int = 11):
        self.imu = ImuState()
        self.clones = CloneWindow(window_size)
        self.transform = MapTransform()
        self.keyframes = KeyframeSet()

    @property
    def dim_active(self) -> int:
        return IMU_DIM + 6 * len(self.clones) + (6 if self.transform.initialized else 0)

    @property
    def dim_nuisance(self) -> int:
        return 6 * len(self.keyframes)

    def clone_slice(self, index: int) -> slice:
        start = IMU_DIM + 6 * index
        return slice(start, start + 6)

    def transform_slice(self) -> slice:
        if not self.transform.initialized:
            raise AlreadyInitialized("transform not in the state yet")
        start = IMU_DIM + 6 * len(self.clones)
        return slice(start, start + 6)

    def keyframe_slice(self, kf_id: int) -> slice:
        start = self.keyframes.column_index(kf_id)
        return slice(start, start + 6)

    def apply_active_correction(self, dx: np.ndarray) -> None:
        """Retract an active-part error vector into the state (quaternions via exp map)."""
        if dx.shape[0] != self.dim_active:
            raise ValueError(f"correction dim {dx.shape[0]} != active dim {self.dim_active}")
        self.imu.q = quat_multiply(small_angle_quat(dx[ATT]), self.imu.q)
        self.imu.v = self.imu.v + dx[VEL]
        self.imu.p = self.imu.p + dx[POS]
        self.imu.bg = self.imu.bg + dx[BG]
        self.imu.ba = self.imu.ba + dx[BA]
        for i, clone in enumerate(self.clones):
            s = self.clone_slice(i)
            clone.q = quat_multiply(small_angle_quat(dx[s][:3]), clone.q)
            clone.p = clone.p + dx[s][3:]
        if self.transform.initialized:
            s = self.transform_slice()
            self.transform.q = quat_multiply(small_angle_quat(dx[s][:3]), self.transform.q)
            self.transform.p = self.transform.p + dx[s][3:]


class PartitionedCovariance:
    """Covariance blocks P_AA, P_AN, P_NN tracking the active/nuisance partition."""

    def __init__(self, P_AA: np.ndarray | None = None, dim_active: int = IMU_DIM):
        if P_AA is None:
            P_AA = np.zeros((dim_active, dim_active))
        self.P_AA = np.asarray(P_AA, dtype=float)
        self.P_AN = np.zeros((self.P_AA.shape[0], 0))
        self.P_NN = np.zeros((0, 0))
        self.clamp_events = 0

    @property
    def dim_active(self) -> int:
        return self.P_AA.shape[0]

    @property
    def dim_nuisance(self) -> int:
        return self.P_NN.shape[0]

    def full(self) -> np.ndarray:
        top = np.hstack([self.P_AA, self.P_AN])
        bot = np.hstack([self.P_AN.T, self.P_NN])
        return np.vstack([top, bot])

    def symmetrize(self, nuisance: bool = False) -> None:
        # P_NN is untouched by Schmidt updates, so by default only the active
        # block is re-symmetrized; pass nuisance=True after full-gain updates.
        self.P_AA = 0.5 * (self.P_AA + self.P_AA.T)
        if nuisance:
            self.P_NN = 0.5 * (self.P_NN + self.P_NN.T)

    def enforce_psd(self, tol: float = -1e-9) -> None:
        """Clamp negative eigenvalues only when they breach tol; count the event."""
        self.symmetrize()
        w = np.linalg.eigvalsh(self.P_AA)
        if w.min() < tol:
            self.clamp_events += 1
            vals, vecs = np.linalg.eigh(self.P_AA)
            self.P_AA = (vecs * np.maximum(vals, 0.0)) @ vecs.T

    def insert_active_block(self, at: int, block: np.ndarray, cross_rows: np.ndarray,
                            cross_nuisance: np.ndarray | None = None) -> None:
        """Insert a new active sub-block at row/col `at` with given cross-covariances.

        `cross_rows` is (new_dim x old_active_dim); `cross_nuisance` is
        (new_dim x dim_nuisance), zeros when omitted.
        """
        n_new = block.shape[0]
        d_old = self.P_AA.shape[0]
        d_new = d_old + n_new
        P = np.zeros((d_new, d_new))
        idx_old = np.r_[0:at, at + n_new:d_new]
        P[np.ix_(idx_old, idx_old)] = self.P_AA
        P[at:at + n_new, at:at + n_new] = block
        P[np.ix_(range(at, at + n_new), idx_old)] = cross_rows
        P[np.ix_(idx_old, range(at, at + n_new))] = cross_rows.T
        self.P_AA = P
        if cross_nuisance is None:
            cross_nuisance = np.zeros((n_new, self.dim_nuisance))
        P_AN = np.zeros((d_new, self.dim_nuisance))
        P_AN[idx_old, :] = self.P_AN
        P_AN[at:at + n_new, :] = cross_nuisance
        self.P_AN = P_AN

    def remove_active_block(self, at: int, n: int) -> None:
        keep = np.r_[0:at, at + n:self.P_AA.shape[0]]
        self.P_AA = self.P_AA[np.ix_(keep, keep)].copy()
        self.P_AN = self.P_AN[keep, :].copy()

    def append_nuisance_blocks(self, blocks: list[np.ndarray]) -> None:
        """Grow P_NN block-diagonally; new P_AN columns are zero (independent map).

        Backing storage grows geometrically so repeated keyframe additions stay
        amortized-linear instead of copying the whole block each time.
        """
        n_add = sum(b.shape[0] for b in blocks)
        d_old = self.P_NN.shape[0]
        d_new = d_old + n_add
        cap = getattr(self, "_nn_capacity", 0)
        buf = getattr(self, "_nn_buffer", None)
        if d_new > cap:
            cap = max(64, d_new, 2 * cap)
            new_buf = np.zeros((cap, cap))
            new_buf[:d_old, :d_old] = self.P_NN
            self._nn_buffer = buf = new_buf
            self._nn_capacity = cap
        elif self.P_NN.base is not buf:
            # P_NN was replaced wholesale (full-gain reference mode); resync.
            buf[:d_old, :d_old] = self.P_NN
        ofs = d_old
        for b in blocks:
            buf[ofs:ofs + b.shape[0], ofs:ofs + b.shape[0]] = b
            ofs += b.shape[0]
        buf[:d_old, d_old:d_new] = 0.0
        buf[d_old:d_new, :d_old] = 0.0
        self.P_NN = buf[:d_new, :d_new]
        self.P_AN = np.hstack([self.P_AN, np.zeros((self.P_AA.shape[0], n_add))])


class FejRegistry:
    """Write-once first-estimate linearization points.

    Entries are keyed by what they freeze: propagated IMU estimates per
    timestamp, clone poses per timestamp, the map transform, keyframe poses,
    and triangulated feature positions.  With ``enabled=False`` lookups fall
    through to the caller-supplied current estimate (used to reproduce the
    no-FEJ observability result).
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._imu: dict[float, tuple] = {}
        self._clones: dict[float, tuple] = {}
        self._transform: tuple | None = None
        self._features: dict[int, np.ndarray] = {}
        self._keyframes: dict[int, tuple] = {}
        self._latest_imu_t: float | None = None

    # -- writes (write-once per key) --------------------------------------
    def record_imu(self, t: float, q: np.ndarray, v: np.ndarray, p: np.ndarray) -> None:
        if t in self._imu:
            raise ValueError(f"imu first-estimate at t={t} already recorded")
        self._imu[t] = (q.copy(), v.copy(), p.copy())
        if self._latest_imu_t is not None and self._latest_imu_t < t:
            # Keep memory bounded: only the newest propagated entry is ever read
            # again once a clone snapshotted the older one.
            self._imu.pop(self._latest_imu_t, None)
        self._latest_imu_t = t

    def record_clone(self, t: float, q: np.ndarray, p: np.ndarray) -> None:
        if t in self._clones:
            raise ValueError(f"clone first-estimate at t={t} already recorded")
        self._clones[t] = (q.copy(), p.copy())

    def drop_clone(self, t: float) -> None:
        self._clones.pop(t, None)

    def record_transform(self, q: np.ndarray, p: np.ndarray) -> None:
        if self._transform is not None:
            raise ValueError("transform first-estimate already recorded")
        self._transform = (q.copy(), p.copy())

    def has_transform(self) -> bool:
        return self._transform is not None

    def record_feature(self, fid: int, p: np.ndarray) -> None:
        if fid in self._features:
            raise ValueError(f"feature {fid} first-estimate already recorded")
        self._features[fid] = np.asarray(p, dtype=float).copy()

    def has_feature(self, fid: int) -> bool:
        return fid in self._features

    def record_keyframe(self, kf_id: int, q: np.ndarray, p: np.ndarray) -> None:
        if kf_id in self._keyframes:
            raise ValueError(f"keyframe {kf_id} first-estimate already recorded")
        self._keyframes[kf_id] = (q.copy(), p.copy())

    # -- reads -------------------------------------------------------------
    def point_for(self, key: tuple, current=None):
        """Return the frozen linearization point for `key`.

        Keys: ("imu", t) -> (q, v, p); ("clone", t) -> (q, p); ("transform",)
        -> (q, p); ("feature", id) -> position; ("keyframe", id) -> (q, p).
        With the registry disabled, returns `current` unchanged.
        """
        if not self.enabled:
            if current is None:
                raise MissingFejEntry(f"registry disabled and no current value for {key}")
            return current
        kind = key[0]
        try:
            if kind == "imu":
                return self._imu[key[1]]
            if kind == "clone":
                return self._clones[key[1]]
            if kind == "transform":
                if self._transform is None:
                    raise KeyError
                return self._transform
            if kind == "feature":
                return self._features[key[1]]
            if kind == "keyframe":
                return self._keyframes[key[1]]
        except KeyError:
            raise MissingFejEntry(f"no first-estimate recorded for {key}") from None
        raise ValueError(f"unknown registry key {key}")

    def snapshot(self) -> dict:
        """Deep copy of all entries (test hook for the never-rewritten invariant)."""
        return {
            "imu": {t: tuple(a.copy() for a in v) for t, v in self._imu.items()},
            "clones": {t: tuple(a.copy() for a in v) for t, v in self._clones.items()},
            "transform": None if self._transform is None else tuple(a.copy() for a in self._transform),
            "features": {k: v.copy() for k, v in self._features.items()},
            "keyframes": {k: tuple(a.copy() for a in v) for k, v in self._keyframes.items()},
        }


def fej_point_for(registry: FejRegistry, key: tuple, current=None):
    """Module-level convenience wrapper around FejRegistry.point_for."""
    return registry.point_for(key, current)


def augment_clone(state: AugmentedState, cov: PartitionedCovariance, timestamp: float,
                  registry: FejRegistry | None = None) -> None:
    """Append a stochastic clone of the current IMU pose.

    The cloning Jacobian is a selection matrix, so the new rows/cols copy the
    IMU attitude/position rows exactly.  The first-estimate entry for the clone
    is the propagated estimate recorded before any update at `timestamp`.
    """
    if len(state.clones) >= state.clones.max_size:
        raise WindowFull(f"window already holds {state.clones.max_size} clones")
    if state.clones.clones and timestamp <= state.clones.clones[-1].timestamp:
        raise ValueError("clone timestamps must be strictly increasing")

    at = IMU_DIM + 6 * len(state.clones)
    sel = np.zeros((6, cov.dim_active))
    sel[0:3, ATT] = np.eye(3)
    sel[3:6, POS] = np.eye(3)
    block = sel @ cov.P_AA @ sel.T
    cross_rows = sel @ cov.P_AA  # new block vs all old entries (insertion preserves order)
    cross_nuis = sel @ cov.P_AN
    cov.insert_active_block(at, block, cross_rows, cross_nuis)

    state.clones.clones.append(Clone(timestamp, state.imu.q.copy(), state.imu.p.copy()))
    if registry is not None:
        q, _, p = registry.point_for(("imu", timestamp), (state.imu.q, state.imu.v, state.imu.p))
        registry.record_clone(timestamp, q, p)


def marginalize_oldest(state: AugmentedState, cov: PartitionedCovariance,
                       registry: FejRegistry | None = None) -> None:
    """Drop the oldest clone's rows/cols; remaining blocks are untouched."""
    if not state.clones.clones:
        raise ValueError("no clones to marginalize")
    oldest = state.clones.clones.pop(0)
    cov.remove_active_block(IMU_DIM, 6)
    if registry is not None:
        registry.drop_clone(oldest.timestamp)


def augment_transform(state: AugmentedState, cov: PartitionedCovariance,
                      T_init: Pose3, P_init: np.ndarray,
                      registry: FejRegistry | None = None) -> None:
    """Insert x_T with self-covariance P_init and zero cross-covariance."""
    if state.transform.initialized:
        raise AlreadyInitialized("map transform already in the state")
    at = IMU_DIM + 6 * len(state.clones)
    cov.insert_active_block(at, np.asarray(P_init, dtype=float),
                            np.zeros((6, cov.dim_active)), np.zeros((6, cov.dim_nuisance)))
    state.transform.q = T_init.quat()
    state.transform.p = T_init.t.copy()
    state.transform.initialized = True
    if registry is not None:
        registry.record_transform(state.transform.q, state.transform.p)


def add_keyframes(state: AugmentedState, cov: PartitionedCovariance,
                  entries: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]],
                  registry: FejRegistry | None = None) -> None:
    """Append nuisance keyframes: (id, q_GKF, p_GKF, 6x6 covariance) each.

    The map is built independently of the current run, so new P_AN columns are
    zero and P_NN grows block-diagonally with the supplied map covariances.
    """
    for kf_id, q, p, _P in entries:
        if kf_id in state.keyframes:
            raise DuplicateKeyframe(f"keyframe {kf_id} already in state")
    blocks = []
    for kf_id, q, p, P in entries:
        state.keyframes.insert(kf_id, q, p)
        blocks.append(np.asarray(P, dtype=float))
        if registry is not None:
            qq, pp = state.keyframes.pose(kf_id)
            registry.record_keyframe(kf_id, qq, pp)
    cov.append_nuisance_blocks(blocks)
