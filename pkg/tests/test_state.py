import numpy as np
import pytest

from mvil.geometry import Pose3, quat_normalize
from mvil.state import (AlreadyInitialized, AugmentedState, DuplicateKeyframe, FejRegistry,
                        MissingFejEntry, PartitionedCovariance, WindowFull, add_keyframes,
                        augment_clone, augment_transform, fej_point_for, marginalize_oldest)


def random_psd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n + 4))
    return scale * (A @ A.T) / (n + 4)


def fresh(rng, n_clones=0, window=4):
    state = AugmentedState(window_size=window)
    cov = PartitionedCovariance(random_psd(rng, 15, 0.01))
    for i in range(n_clones):
        augment_clone(state, cov, float(i))
    return state, cov


class TestCloning:
    def test_clone_copies_pose_block(self, rng):
        state, cov = fresh(rng)
        state.imu.q = quat_normalize(rng.normal(size=4))
        state.imu.p = rng.normal(size=3)
        P_before = cov.P_AA.copy()
        augment_clone(state, cov, 0.0)
        s = state.clone_slice(0)
        ix = np.r_[0:3, 6:9]
        assert np.allclose(cov.P_AA[s, s], P_before[np.ix_(ix, ix)])
        clone = state.clones.clones[0]
        assert np.all(clone.q == state.imu.q)
        assert np.all(clone.p == state.imu.p)

    def test_clone_correlation_is_one(self, rng):
        state, cov = fresh(rng)
        augment_clone(state, cov, 0.0)
        s = state.clone_slice(0)
        ix = np.r_[0:3, 6:9]
        cross = cov.P_AA[np.ix_(range(s.start, s.stop), ix)]
        block = cov.P_AA[s, s]
        for k in range(6):
            corr = cross[k, k] / np.sqrt(block[k, k] * cov.P_AA[ix[k], ix[k]])
            assert abs(corr - 1.0) < 1e-12

    def test_window_full(self, rng):
        state, cov = fresh(rng, n_clones=4, window=4)
        with pytest.raises(WindowFull):
            augment_clone(state, cov, 99.0)

    def test_timestamps_strictly_increasing(self, rng):
        state, cov = fresh(rng, n_clones=2)
        with pytest.raises(ValueError):
            augment_clone(state, cov, 0.5)


class TestMarginalize:
    def test_psd_and_dims(self, rng):
        state, cov = fresh(rng, n_clones=4, window=4)
        d = cov.dim_active
        marginalize_oldest(state, cov)
        assert cov.dim_active == d - 6
        assert np.linalg.eigvalsh(cov.P_AA).min() > -1e-9

    def test_other_blocks_untouched(self, rng):
        state, cov = fresh(rng, n_clones=3)
        keep = np.r_[0:15, 21:cov.dim_active]
        expected = cov.P_AA[np.ix_(keep, keep)].copy()
        marginalize_oldest(state, cov)
        assert np.all(cov.P_AA == expected)


class TestTransform:
    def test_insertion(self, rng):
        state, cov = fresh(rng, n_clones=2)
        P_init = 10.0 * np.eye(6)
        augment_transform(state, cov, Pose3.identity(), P_init)
        s = state.transform_slice()
        assert np.allclose(cov.P_AA[s, s], P_init)
        other = np.r_[0:s.start]
        assert np.all(cov.P_AA[np.ix_(range(s.start, s.stop), other)] == 0.0)

    def test_fej_written_at_init(self, rng):
        state, cov = fresh(rng)
        reg = FejRegistry()
        T = Pose3.identity()
        T.t = np.array([1.0, 2.0, 3.0])
        augment_transform(state, cov, T, np.eye(6), reg)
        q, p = reg.point_for(("transform",))
        assert np.allclose(p, T.t)

    def test_double_init(self, rng):
        state, cov = fresh(rng)
        augment_transform(state, cov, Pose3.identity(), np.eye(6))
        with pytest.raises(AlreadyInitialized):
            augment_transform(state, cov, Pose3.identity(), np.eye(6))


class TestKeyframes:
    def test_block_diagonal_map_covariance(self, rng):
        # Map keyframe pose covariance 0.1 I6 per keyframe.
        state, cov = fresh(rng)
        P_kf = 0.1 * np.eye(6)
        entries = [(7, quat_normalize(rng.normal(size=4)), rng.normal(size=3), P_kf),
                   (9, quat_normalize(rng.normal(size=4)), rng.normal(size=3), P_kf)]
        add_keyframes(state, cov, entries)
        expected = np.zeros((12, 12))
        expected[:6, :6] = P_kf
        expected[6:, 6:] = P_kf
        assert np.allclose(cov.P_NN, expected)

    def test_cross_columns_zero(self, rng):
        state, cov = fresh(rng, n_clones=2)
        add_keyframes(state, cov, [(1, np.array([0., 0., 0., 1.]), np.zeros(3), np.eye(6))])
        assert np.all(cov.P_AN == 0.0)

    def test_duplicate(self, rng):
        state, cov = fresh(rng)
        entry = (3, np.array([0., 0., 0., 1.]), np.zeros(3), np.eye(6))
        add_keyframes(state, cov, [entry])
        with pytest.raises(DuplicateKeyframe):
            add_keyframes(state, cov, [entry])

    def test_mean_is_frozen(self, rng):
        state, cov = fresh(rng)
        add_keyframes(state, cov, [(1, quat_normalize(rng.normal(size=4)),
                                    rng.normal(size=3), np.eye(6))])
        q, p = state.keyframes.pose(1)
        with pytest.raises(ValueError):
            q[0] = 99.0
        with pytest.raises(ValueError):
            p[0] = 99.0


class TestFejRegistry:
    def test_write_once_read_twice(self):
        reg = FejRegistry()
        reg.record_feature(("local", 5), np.array([1.0, 2.0, 3.0]))
        a = fej_point_for(reg, ("feature", ("local", 5)))
        b = fej_point_for(reg, ("feature", ("local", 5)))
        assert np.all(a == b)
        with pytest.raises(ValueError):
            reg.record_feature(("local", 5), np.zeros(3))

    def test_missing_entry(self):
        reg = FejRegistry()
        with pytest.raises(MissingFejEntry):
            fej_point_for(reg, ("clone", 1.25))

    def test_disabled_returns_current(self):
        reg = FejRegistry(enabled=False)
        cur = np.array([9.0, 9.0, 9.0])
        assert fej_point_for(reg, ("feature", 1), cur) is cur

    def test_snapshot_entries_never_change(self):
        reg = FejRegistry()
        reg.record_clone(0.5, np.array([0., 0., 0., 1.]), np.zeros(3))
        snap1 = reg.snapshot()
        reg.record_clone(0.6, np.array([0., 0., 0., 1.]), np.ones(3))
        snap2 = reg.snapshot()
        assert np.all(snap1["clones"][0.5][1] == snap2["clones"][0.5][1])


class TestInvariants:
    def test_dimension_formula(self, rng):
        state, cov = fresh(rng, n_clones=3, window=5)
        augment_transform(state, cov, Pose3.identity(), np.eye(6))
        add_keyframes(state, cov, [(k, np.array([0., 0., 0., 1.]), np.zeros(3), np.eye(6))
                                   for k in range(4)])
        assert state.dim_active == 15 + 6 * 3 + 6
        assert state.dim_nuisance == 6 * 4
        assert cov.dim_active == state.dim_active
        assert cov.dim_nuisance == state.dim_nuisance

    def test_full_covariance_symmetric_psd_after_ops(self, rng):
        state, cov = fresh(rng, n_clones=2, window=4)
        augment_transform(state, cov, Pose3.identity(), np.eye(6))
        add_keyframes(state, cov, [(0, np.array([0., 0., 0., 1.]), np.zeros(3), 0.1 * np.eye(6))])
        augment_clone(state, cov, 10.0)
        marginalize_oldest(state, cov)
        P = cov.full()
        assert np.abs(P - P.T).max() < 1e-9
        assert np.linalg.eigvalsh(P).min() >= -1e-9
