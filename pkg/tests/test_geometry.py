"""Poses, horizontal offsets, pinhole projection and bilinear sampling.

Oracles here are deliberately independent of the implementation: 4x4
homogeneous matrices for pose arithmetic, the hand pinhole formula for
projection and explicit corner weights for interpolation.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnloc.features import DenseFeatureLevel
from attnloc.geometry import (
    DEPTH_MIN,
    CameraModel,
    GeometryError,
    Pose3,
    PoseSE2Offset,
    apply_offset,
    bilinear_sample,
    offset_between,
    project_point,
    project_points,
    quat_to_matrix,
    matrix_to_quat,
    wrap_angle,
    wrap_angles,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-50.0, 50.0, allow_nan=False)


def _homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def _rz(a):
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def _random_pose(rng):
    q = rng.normal(size=4)
    return Pose3(rng.uniform(-20, 20, 3), q / np.linalg.norm(q))


def _offset_oracle(anchor: Pose3, o: PoseSE2Offset) -> np.ndarray:
    """Homogeneous-matrix version: translate in the heading frame, yaw about world z."""
    R = anchor.rotation
    psi = math.atan2(R[1, 0], R[0, 0])
    t = anchor.position + _rz(psi) @ np.array([o.dx, o.dy, 0.0])
    return _homogeneous(_rz(o.dpsi) @ R, t)


class TestWrap:
    def test_range(self):
        for a in (-math.pi, math.pi, 3 * math.pi, -3 * math.pi, 0.0, 7.0):
            w = wrap_angle(a)
            assert -math.pi < w <= math.pi
            assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
            assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)

    def test_minus_pi_maps_to_pi(self):
        assert wrap_angle(-math.pi) == math.pi

    @given(angles)
    def test_vectorised_agrees(self, a):
        assert math.isclose(float(wrap_angles(np.array([a]))[0]), wrap_angle(a), abs_tol=1e-12)


class TestPose3:
    def test_quaternion_norm_checked(self):
        with pytest.raises(GeometryError):
            Pose3([0, 0, 0], [1.0, 0.1, 0, 0])

    def test_matrix_quaternion_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = _random_pose(rng)
            R = p.rotation
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-12)
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)

    def test_compose_matches_homogeneous(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = _random_pose(rng), _random_pose(rng)
            np.testing.assert_allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
            np.testing.assert_allclose(a.inverse().matrix(), np.linalg.inv(a.matrix()), atol=1e-10)

    def test_heading_of_yaw_pose(self):
        p = Pose3.from_xyz_rpy(1, 2, 3, roll=0.1, pitch=-0.05, yaw=0.7)
        assert math.isclose(p.heading, 0.7, abs_tol=1e-12)

    def test_equality_is_bitwise(self):
        a = Pose3([1.0, 2.0, 3.0])
        assert a == Pose3([1.0, 2.0, 3.0])
        assert a != Pose3([1.0, 2.0, 3.0 + 1e-15])


class TestApplyOffset:
    def test_zero_offset_is_identity(self):
        p = Pose3.from_xyz_rpy(3, -1, 2, 0.1, 0.2, 0.3)
        assert apply_offset(p, PoseSE2Offset()) == p

    def test_identity_anchor_forward(self):
        out = apply_offset(Pose3.identity(), PoseSE2Offset(1.0, 0.0, 0.0))
        np.testing.assert_array_equal(out.position, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(out.rotation, np.eye(3))

    def test_yawed_anchor_moves_along_world_y(self):
        anchor = Pose3.from_xyz_rpy(0, 0, 0, yaw=math.pi / 2)
        out = apply_offset(anchor, PoseSE2Offset(1.0, 0.0, 0.0))
        np.testing.assert_allclose(out.matrix(), _offset_oracle(anchor, PoseSE2Offset(1.0, 0.0, 0.0)), atol=1e-12)
        np.testing.assert_allclose(out.position, [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            anchor = _random_pose(rng)
            o = PoseSE2Offset(*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi))
            np.testing.assert_allclose(apply_offset(anchor, o).matrix(), _offset_oracle(anchor, o), atol=1e-10)

    def test_roll_pitch_height_preserved(self):
        anchor = Pose3.from_xyz_rpy(1, 2, 3, roll=0.2, pitch=-0.1, yaw=1.0)
        out = apply_offset(anchor, PoseSE2Offset(0.5, -0.4, 0.3))
        assert out.position[2] == anchor.position[2]
        # the world-z column of R (gravity direction in body) is unchanged up to a z rotation
        assert math.isclose(out.rotation[2, 2], anchor.rotation[2, 2], abs_tol=1e-12)

    @settings(max_examples=200)
    @given(coords, coords, angles, coords, coords, angles)
    def test_inverse_undoes(self, x, y, yaw, dx, dy, dpsi):
        anchor = Pose3.from_xyz_rpy(x, y, 0.0, yaw=yaw)
        o = PoseSE2Offset(dx, dy, dpsi)
        back = apply_offset(apply_offset(anchor, o), o.inverse())
        np.testing.assert_allclose(back.matrix(), anchor.matrix(), atol=1e-9)

    @settings(max_examples=200)
    @given(coords, coords, angles, coords, coords, angles, coords, coords, angles)
    def test_compose_is_sequential_application(self, x, y, yaw, ax, ay, apsi, bx, by, bpsi):
        anchor = Pose3.from_xyz_rpy(x, y, 1.0, yaw=yaw)
        a, b = PoseSE2Offset(ax, ay, apsi), PoseSE2Offset(bx, by, bpsi)
        lhs = apply_offset(apply_offset(anchor, a), b)
        rhs = apply_offset(anchor, a.compose(b))
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)

    def test_offset_between_recovers_offset(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            anchor = Pose3.from_xyz_rpy(*rng.uniform(-5, 5, 3), yaw=rng.uniform(-4, 4))
            o = PoseSE2Offset(*rng.uniform(-2, 2, 2), rng.uniform(-3, 3))
            np.testing.assert_allclose(offset_between(anchor, apply_offset(anchor, o)).as_array(), o.as_array(), atol=1e-10)


def _axis_camera(**kw):
    """Camera whose frame coincides with the vehicle frame (identity extrinsic)."""
    base = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    base.update(kw)
    return CameraModel(**base)


class TestProjection:
    def test_hand_pinhole(self):
        # u = fx X / Z + cx = 100 * 1/5 + 50
        assert project_point([1.0, 0.0, 5.0], Pose3.identity(), _axis_camera()) == (70.0, 50.0, 5.0)

    def test_optical_axis(self):
        assert project_point([0.0, 0.0, 5.0], Pose3.identity(), _axis_camera()) == (50.0, 50.0, 5.0)

    def test_behind_camera(self):
        assert project_point([0.0, 0.0, -1.0], Pose3.identity(), _axis_camera()) is None
        assert project_point([0.0, 0.0, DEPTH_MIN], Pose3.identity(), _axis_camera()) is None

    def test_outside_image(self):
        assert project_point([10.0, 0.0, 5.0], Pose3.identity(), _axis_camera()) is None

    def test_forward_facing_camera(self):
        cam = CameraModel.forward_facing(1000, 1000, 640, 360, 1280, 720, mount=(0, 0, 1.5))
        # 10 m ahead at mount height projects to the principal point; a point to the left lands left
        u, v, z = project_point([10.0, 0.0, 1.5], Pose3.identity(), cam)
        assert (u, v, z) == pytest.approx((640.0, 360.0, 10.0), abs=1e-9)
        u_left, _, _ = project_point([10.0, 1.0, 1.5], Pose3.identity(), cam)
        assert u_left == pytest.approx(540.0, abs=1e-9)

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(7)
        cam = CameraModel.forward_facing(800, 800, 400, 300, 800, 600)
        pose = Pose3.from_xyz_rpy(1, 2, 0, yaw=0.3)
        pts = rng.uniform([-20, -20, -2], [40, 40, 6], size=(300, 3))
        uv, depth = project_points(pts, pose, cam)
        for p, q, d in zip(pts, uv, depth):
            r = project_point(p, pose, cam)
            if r is not None:
                np.testing.assert_allclose(r, (*q, d), atol=1e-9)

    def test_intrinsics_scale(self):
        assert _axis_camera().intrinsics_at(4) == (25.0, 25.0, 12.5, 12.5)

    def test_invalid_camera(self):
        with pytest.raises(GeometryError):
            _axis_camera(fx=0.0)
        with pytest.raises(GeometryError):
            _axis_camera(cx=100.0)


class TestBilinear:
    def _level(self, desc):
        desc = np.asarray(desc, dtype=np.float32)
        return DenseFeatureLevel(2, desc, np.zeros(desc.shape[:2], dtype=np.float32))

    def test_integer_returns_cell(self):
        rng = np.random.default_rng(8)
        lv = self._level(rng.normal(size=(5, 6, 3)))
        for v in range(5):
            for u in range(6):
                np.testing.assert_array_equal(bilinear_sample(lv, u, v), lv.descriptors[v, u].astype(np.float64))

    def test_midpoint_is_mean(self):
        lv = self._level([[[0.0, 2.0], [4.0, 6.0]], [[1.0, 1.0], [1.0, 1.0]]])
        np.testing.assert_allclose(bilinear_sample(lv, 0.5, 0.0), [2.0, 4.0], atol=1e-12)

    def test_corner_weights(self):
        corners = np.array([[[1.0], [2.0]], [[3.0], [5.0]]])  # [v][u]
        a, b = 0.25, 0.75
        expected = (1 - a) * (1 - b) * 1.0 + a * (1 - b) * 2.0 + (1 - a) * b * 3.0 + a * b * 5.0
        assert bilinear_sample(self._level(corners), a, b)[0] == pytest.approx(expected, abs=1e-12)

    def test_out_of_range(self):
        lv = self._level(np.zeros((3, 3, 1)))
        with pytest.raises(GeometryError):
            bilinear_sample(lv, 2.01, 0.0)
        with pytest.raises(GeometryError):
            bilinear_sample(lv, -0.01, 0.0)
        bilinear_sample(lv, 2.0, 2.0)
