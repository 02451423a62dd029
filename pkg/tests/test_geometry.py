import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvil.geometry import (CameraModel, NonPositiveDepth, Pose3, attitude_error, project,
                           projection_jacobian, quat_multiply, quat_normalize, quat_to_rot,
                           rot_to_quat, skew, small_angle_quat, so3_exp, so3_log, unproject)


def rodrigues_frame_rotation(axis, angle):
    """Independent oracle: frame-rotation matrix about a unit axis."""
    K = skew(axis)
    return np.eye(3) - np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


class TestQuatToRot:
    def test_identity(self):
        assert np.allclose(quat_to_rot(np.array([0.0, 0.0, 0.0, 1.0])), np.eye(3))

    def test_double_cover(self, rng):
        q = quat_normalize(rng.normal(size=4))
        assert np.allclose(quat_to_rot(q), quat_to_rot(-q), atol=1e-14)

    def test_matches_rodrigues_oracle(self, rng):
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, np.pi - 1e-3)
            R = quat_to_rot(small_angle_quat(angle * axis))
            assert np.abs(R - rodrigues_frame_rotation(axis, angle)).max() < 1e-12

    def test_orthonormal(self, rng):
        for _ in range(100):
            R = quat_to_rot(quat_normalize(rng.normal(size=4)))
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-10
            assert abs(np.linalg.det(R) - 1.0) < 1e-10

    def test_composition_matches_matrix_product(self, rng):
        q1 = quat_normalize(rng.normal(size=4))
        q2 = quat_normalize(rng.normal(size=4))
        assert np.allclose(quat_to_rot(quat_multiply(q1, q2)),
                           quat_to_rot(q1) @ quat_to_rot(q2), atol=1e-12)

    def test_rot_to_quat_roundtrip(self, rng):
        for _ in range(50):
            q = quat_normalize(rng.normal(size=4))
            assert np.abs(rot_to_quat(quat_to_rot(q)) - q).max() < 1e-9


class TestSkew:
    def test_zero(self):
        assert np.all(skew(np.zeros(3)) == 0.0)

    def test_antisymmetric_and_cross(self, rng):
        v = rng.normal(size=3)
        S = skew(v)
        assert np.allclose(S, -S.T)
        assert np.allclose(S @ v, 0.0)
        w = rng.normal(size=3)
        assert np.allclose(S @ w, np.cross(v, w))

    def test_basis(self):
        e1, e2, e3 = np.eye(3)
        assert np.allclose(skew(e1) @ e2, e3)


class TestProjection:
    def test_optical_axis(self):
        cam = CameraModel(fx=400, fy=400, cx=0, cy=0)
        assert np.allclose(project(cam, np.array([0.0, 0.0, 1.0])), [0.0, 0.0])

    def test_closed_form(self):
        cam = CameraModel(fx=400, fy=400, cx=300, cy=300)
        assert np.allclose(project(cam, np.array([1.0, 1.0, 2.0])), [500.0, 500.0])

    def test_nonpositive_depth(self):
        cam = CameraModel()
        with pytest.raises(NonPositiveDepth):
            project(cam, np.array([0.0, 0.0, 0.0]))
        with pytest.raises(NonPositiveDepth):
            projection_jacobian(cam, np.array([1.0, 1.0, -2.0]))

    def test_jacobian_finite_difference(self, rng):
        cam = CameraModel()
        eps = 1e-6
        for _ in range(100):
            p = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 50)])
            J = projection_jacobian(cam, p)
            J_fd = np.zeros((2, 3))
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                J_fd[:, k] = (project(cam, p + d) - project(cam, p - d)) / (2 * eps)
            assert np.abs(J - J_fd).max() / np.abs(J_fd).max() < 1e-6

    def test_pinhole_row_structure(self, rng):
        cam = CameraModel()
        J = projection_jacobian(cam, np.array([1.0, 2.0, 5.0]))
        assert J[0, 1] == 0.0
        assert J[1, 0] == 0.0

    def test_jacobian_homogeneity(self, rng):
        cam = CameraModel()
        p = np.array([1.0, -2.0, 8.0])
        assert np.allclose(projection_jacobian(cam, 2.0 * p),
                           0.5 * projection_jacobian(cam, p))

    @given(st.floats(0.1, 100.0), st.integers(0, 639), st.integers(0, 479))
    @settings(max_examples=60, deadline=None)
    def test_unproject_roundtrip(self, depth, u, v):
        cam = CameraModel()
        uv = np.array([float(u), float(v)])
        assert np.abs(project(cam, unproject(cam, uv, depth)) - uv).max() < 1e-9


class TestSmallAngle:
    def test_zero_is_identity(self):
        assert np.allclose(small_angle_quat(np.zeros(3)), [0, 0, 0, 1])

    def test_quarter_turn_yaw(self):
        R = quat_to_rot(small_angle_quat(np.array([0.0, 0.0, np.pi / 2])))
        assert np.abs(R - rodrigues_frame_rotation(np.array([0.0, 0.0, 1.0]), np.pi / 2)).max() < 1e-12

    def test_inverse_composition(self, rng):
        a = rng.normal(size=3)
        q = quat_multiply(small_angle_quat(a), small_angle_quat(-a))
        assert np.abs(q - np.array([0, 0, 0, 1.0])).max() < 1e-12


class TestSo3Log:
    def test_roundtrip(self, rng):
        for _ in range(50):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * rng.uniform(1e-8, np.pi - 1e-6)
            assert np.abs(so3_log(so3_exp(w)) - w).max() < 1e-8

    def test_attitude_error_convention(self, rng):
        d = np.array([1e-5, -2e-5, 3e-5])
        R_est = quat_to_rot(quat_normalize(rng.normal(size=4)))
        R_true = (np.eye(3) - skew(d)) @ R_est
        assert np.abs(attitude_error(R_true, R_est) - d).max() < 1e-9


class TestPose3:
    def test_compose_associative(self, rng):
        poses = [Pose3(quat_to_rot(quat_normalize(rng.normal(size=4))), rng.normal(size=3))
                 for _ in range(3)]
        a = poses[0].compose(poses[1]).compose(poses[2])
        b = poses[0].compose(poses[1].compose(poses[2]))
        assert np.abs(a.R - b.R).max() < 1e-12
        assert np.abs(a.t - b.t).max() < 1e-12

    def test_inverse(self, rng):
        T = Pose3(quat_to_rot(quat_normalize(rng.normal(size=4))), rng.normal(size=3))
        I = T.compose(T.inverse())
        assert np.abs(I.R - np.eye(3)).max() < 1e-10
        assert np.abs(I.t).max() < 1e-10

    def test_transform_point(self, rng):
        T = Pose3(quat_to_rot(quat_normalize(rng.normal(size=4))), rng.normal(size=3))
        p = rng.normal(size=3)
        assert np.allclose(T.inverse().transform(T.transform(p)), p)
