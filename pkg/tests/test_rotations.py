import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from textmotion.errors import DegenerateRotation, LayoutError
from textmotion.rotations import (
    IDENTITY_6D,
    POSE_DIM,
    axis_angle_to_matrix,
    euler_zyx_to_matrix,
    identity_pose,
    matrix_to_axis_angle,
    matrix_to_euler_zyx,
    matrix_to_quaternion,
    matrix_to_rot6d,
    pack_pose,
    pose_rotations,
    quaternion_to_matrix,
    random_rotations,
    rot6d_to_matrix,
    slerp_pose,
    unpack_pose,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)
vec3 = arrays(np.float64, 3, elements=finite)


def _orthonormal(m, tol=1e-6):
    eye = np.eye(3)
    return np.abs(np.swapaxes(m, -1, -2) @ m - eye).max() < tol and np.abs(np.linalg.det(m) - 1).max() < tol


def test_canonical_and_scaled_6d_give_identity():
    assert np.allclose(rot6d_to_matrix(IDENTITY_6D), np.eye(3), atol=0)
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-15)


def test_gram_schmidt_columns():
    r = np.array([1.0, 2.0, 2.0, 0.5, -1.0, 3.0])
    m = rot6d_to_matrix(r)
    a = r[:3] / 3.0
    b = r[3:] - (a @ r[3:]) * a
    assert np.allclose(m[:, 0], a, atol=1e-12)
    assert np.allclose(m[:, 1], b / np.linalg.norm(b), atol=1e-12)
    assert np.allclose(m[:, 2], np.cross(m[:, 0], m[:, 1]), atol=1e-12)


@pytest.mark.parametrize("bad", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1e-9, 0, 0, 0, 1, 0]])
def test_degenerate_6d_raises(bad):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(bad)


def test_matrix_to_rot6d_reads_first_columns():
    assert np.array_equal(matrix_to_rot6d(np.eye(3)), IDENTITY_6D)
    yaw = axis_angle_to_matrix([0, math.pi / 2, 0])
    assert np.allclose(matrix_to_rot6d(yaw), np.concatenate([yaw[:, 0], yaw[:, 1]]))


def test_round_trips_against_scipy(rng):
    mats = random_rotations(rng, 1000)
    assert _orthonormal(mats)
    assert np.abs(rot6d_to_matrix(matrix_to_rot6d(mats)) - mats).max() < 1e-6
    aa = matrix_to_axis_angle(mats)
    ref = Rotation.from_matrix(mats).as_rotvec()
    assert np.abs(aa - ref).max() < 1e-6
    assert np.abs(axis_angle_to_matrix(aa) - mats).max() < 1e-6
    q = matrix_to_quaternion(mats)
    q_ref = Rotation.from_matrix(mats).as_quat()[:, [3, 0, 1, 2]]
    q_ref *= np.sign(q_ref[:, :1])
    assert np.abs(q - q_ref).max() < 1e-9
    assert np.abs(quaternion_to_matrix(q) - mats).max() < 1e-12


def test_axis_angle_special_cases():
    assert np.array_equal(axis_angle_to_matrix([0.0, 0.0, 0.0]), np.eye(3))
    assert np.allclose(axis_angle_to_matrix([math.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-15)
    back = matrix_to_axis_angle(np.diag([1.0, -1.0, -1.0]))
    assert np.isclose(np.linalg.norm(back), math.pi)


@given(vec3, vec3, st.floats(0.01, 100), st.floats(0.01, 100))
def test_6d_output_is_rotation_and_scale_invariant(a, b, lam, mu):
    r = np.concatenate([a, b])
    try:
        m = rot6d_to_matrix(r)
        m2 = rot6d_to_matrix(np.concatenate([lam * a, mu * b]))
    except DegenerateRotation:
        return
    assert _orthonormal(m)
    assert np.abs(m - m2).max() < 1e-6


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.floats(1e-3, math.pi - 1e-3))
def test_axis_angle_round_trip(direction, angle):
    n = np.linalg.norm(direction)
    if n < 1e-3:
        return
    aa = direction / n * angle
    assert np.abs(matrix_to_axis_angle(axis_angle_to_matrix(aa)) - aa).max() < 1e-6


@given(arrays(np.float64, 3, elements=st.floats(-math.pi, math.pi)))
def test_euler_zyx_round_trip(angles):
    m = euler_zyx_to_matrix(angles)
    assert np.abs(euler_zyx_to_matrix(matrix_to_euler_zyx(m)) - m).max() < 1e-6


def test_euler_zyx_matches_intrinsic_convention(rng):
    angles = rng.uniform(-1.2, 1.2, size=(50, 3))
    ref = Rotation.from_euler("ZYX", angles).as_matrix()
    assert np.abs(euler_zyx_to_matrix(angles) - ref).max() < 1e-12


def test_euler_gimbal_lock_sets_last_angle_zero():
    m = euler_zyx_to_matrix([0.3, math.pi / 2, 0.4])
    z, y, x = matrix_to_euler_zyx(m)
    assert x == 0.0
    assert np.abs(euler_zyx_to_matrix([z, y, x]) - m).max() < 1e-6


def test_pack_layout():
    p = identity_pose()
    assert p.shape == (POSE_DIM,) == (22 * 6 + 3,)
    assert np.array_equal(p, np.concatenate([np.tile(IDENTITY_6D, 22), np.zeros(3)]))


def test_pack_unpack_bit_exact(rng):
    root, joints, trans = rng.normal(size=6), rng.normal(size=(21, 6)), rng.normal(size=3)
    r2, j2, t2 = unpack_pose(pack_pose(root, joints, trans))
    assert np.array_equal(r2, root) and np.array_equal(j2, joints) and np.array_equal(t2, trans)


@pytest.mark.parametrize("joints", [np.zeros((20, 6)), np.zeros((22, 6)), np.zeros((21, 5))])
def test_pack_wrong_counts(joints):
    with pytest.raises(LayoutError):
        pack_pose(IDENTITY_6D, joints, np.zeros(3))


def _yaw_pose(angle, trans=(0.0, 0.0, 0.0)):
    p = identity_pose()
    p[:6] = matrix_to_rot6d(axis_angle_to_matrix([0, angle, 0]))
    p[-3:] = trans
    return p


def test_slerp_endpoints_and_midpoint():
    p0, p1 = _yaw_pose(0.0, (0, 0, 0)), _yaw_pose(math.pi / 2, (2, 0, 4))
    assert np.array_equal(slerp_pose(p0, p1, 0.0), p0)
    assert np.array_equal(slerp_pose(p0, p1, 1.0), p1)
    mid = slerp_pose(p0, p1, 0.5)
    assert np.abs(pose_rotations(mid)[0] - axis_angle_to_matrix([0, math.pi / 4, 0])).max() < 1e-6
    assert np.allclose(mid[-3:], [1, 0, 2])


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_slerp_stays_on_rotation_manifold(u, seed):
    rng = np.random.default_rng(seed)
    mats = random_rotations(rng, 44).reshape(2, 22, 3, 3)
    p0 = np.concatenate([matrix_to_rot6d(mats[0]).ravel(), rng.normal(size=3)])
    p1 = np.concatenate([matrix_to_rot6d(mats[1]).ravel(), rng.normal(size=3)])
    assert _orthonormal(pose_rotations(slerp_pose(p0, p1, u)))
