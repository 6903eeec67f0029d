"""Rotation conversions and the 135-channel pose layout.

All functions accept arrays with arbitrary leading batch dimensions and work in
float64. Angles are radians. A 6D rotation is the first two columns of a
rotation matrix, concatenated as ``(col0, col1)``.
"""

import numpy as np

from textmotion.errors import DegenerateRotation, LayoutError

NUM_JOINTS = 22
NUM_BODY_JOINTS = 21
POSE_DIM = NUM_JOINTS * 6 + 3  # 135
TRANSLATION_SLICE = slice(NUM_JOINTS * 6, POSE_DIM)

_EPS = 1e-8

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_to_matrix(r):
    """Gram-Schmidt orthogonalization of a 6D rotation.

    Columns of the result are ``a/|a|``, the normalized component of ``b``
    orthogonal to it, and their cross product.

    Raises:
        DegenerateRotation: if ``a`` or the orthogonal part of ``b`` has norm
            below 1e-8.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise LayoutError(f"expected trailing dimension 6, got {r.shape}")
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _EPS) or not np.all(np.isfinite(r)):
        raise DegenerateRotation("first 6D column has (near) zero norm or is non-finite")
    c0 = a / na
    b_orth = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    nb = np.linalg.norm(b_orth, axis=-1, keepdims=True)
    if np.any(nb < _EPS):
        raise DegenerateRotation("second 6D column is (near) parallel to the first")
    c1 = b_orth / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def matrix_to_rot6d(m):
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def _skew(v):
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def axis_angle_to_matrix(axis_angle):
    """Rodrigues' formula. The zero vector maps to the identity."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    k = aa / safe[..., None]
    K = _skew(k)
    s = np.sin(theta)[..., None, None]
    c = np.cos(theta)[..., None, None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    return np.where(small[..., None, None], eye, R)


def matrix_to_axis_angle(m):
    """Inverse Rodrigues; the returned angle lies in [0, pi]."""
    return quaternion_to_axis_angle(matrix_to_quaternion(m))


def matrix_to_quaternion(m):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``.

    Uses the largest-diagonal branch selection so precision holds near
    half-turns.
    """
    m = np.asarray(m, dtype=np.float64)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    trace = m00 + m11 + m22
    cands = np.stack(
        [
            np.stack([1.0 + trace, m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
            np.stack([m[..., 2, 1] - m[..., 1, 2], 1.0 + m00 - m11 - m22, m[..., 0, 1] + m[..., 1, 0], m[..., 0, 2] + m[..., 2, 0]], -1),
            np.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 0, 1] + m[..., 1, 0], 1.0 - m00 + m11 - m22, m[..., 1, 2] + m[..., 2, 1]], -1),
            np.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0], m[..., 1, 2] + m[..., 2, 1], 1.0 - m00 - m11 + m22], -1),
        ],
        axis=-2,
    )
    diag = np.stack([trace, m00, m11, m22], axis=-1)
    best = np.argmax(diag, axis=-1)
    q = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quaternion_to_axis_angle(q):
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0, -q, q)
    vec = q[..., 1:]
    sin_half = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(sin_half, q[..., 0])
    # angle/sin(angle/2) -> 2 as the angle vanishes
    scale = np.where(sin_half < 1e-12, 2.0, angle / np.where(sin_half < 1e-12, 1.0, sin_half))
    return vec * scale[..., None]


def quaternion_slerp(q0, q1, u):
    """Geodesic interpolation between unit quaternions along the short arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    u = u[..., None] if u.ndim else u
    near = dot > 1.0 - 1e-10
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_t = np.where(near, 1.0, np.sin(theta))
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / sin_t)
    w1 = np.where(near, u, np.sin(u * theta) / sin_t)
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def euler_zyx_to_matrix(angles):
    """``R = Rz(a) @ Ry(b) @ Rx(c)`` for ``angles = (a, b, c)`` in radians."""
    angles = np.asarray(angles, dtype=np.float64)
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    return np.stack(
        [
            np.stack([ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc], -1),
            np.stack([sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc], -1),
            np.stack([-sb, cb * sc, cb * cc], -1),
        ],
        axis=-2,
    )


def matrix_to_euler_zyx(m, gimbal_tol=1e-9):
    """Inverse of :func:`euler_zyx_to_matrix`.

    At gimbal lock (``|m[2, 0]| ~ 1``) the X angle is set to zero and the Z
    angle absorbs the remaining rotation.
    """
    m = np.asarray(m, dtype=np.float64)
    sb = np.clip(-m[..., 2, 0], -1.0, 1.0)
    b = np.arcsin(sb)
    locked = np.abs(sb) > 1.0 - gimbal_tol
    a = np.where(locked, np.arctan2(-m[..., 0, 1], m[..., 1, 1]), np.arctan2(m[..., 1, 0], m[..., 0, 0]))
    c = np.where(locked, 0.0, np.arctan2(m[..., 2, 1], m[..., 2, 2]))
    return np.stack([a, b, c], axis=-1)


def pack_pose(root, joints, translation):
    """Assemble a 135-vector ``[root 6D | 21 joint 6Ds | translation]``."""
    root = np.asarray(root, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    if root.shape != (6,):
        raise LayoutError(f"root orient must have shape (6,), got {root.shape}")
    if joints.shape != (NUM_BODY_JOINTS, 6):
        raise LayoutError(f"expected {NUM_BODY_JOINTS} joint rotations of size 6, got {joints.shape}")
    if translation.shape != (3,):
        raise LayoutError(f"translation must have shape (3,), got {translation.shape}")
    return np.concatenate([root, joints.reshape(-1), translation])


def unpack_pose(p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != POSE_DIM:
        raise LayoutError(f"pose vectors have {POSE_DIM} channels, got {p.shape[-1]}")
    rots = p[..., : NUM_JOINTS * 6].reshape(p.shape[:-1] + (NUM_JOINTS, 6))
    return rots[..., 0, :], rots[..., 1:, :], p[..., TRANSLATION_SLICE]


def pose_rotations(p):
    """All 22 rotations of a pose (or batch of poses) as 3x3 matrices."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != POSE_DIM:
        raise LayoutError(f"pose vectors have {POSE_DIM} channels, got {p.shape[-1]}")
    rots = p[..., : NUM_JOINTS * 6].reshape(p.shape[:-1] + (NUM_JOINTS, 6))
    return rot6d_to_matrix(rots)


def pose_from_matrices(mats, translation):
    mats = np.asarray(mats, dtype=np.float64)
    six = matrix_to_rot6d(mats).reshape(mats.shape[:-3] + (NUM_JOINTS * 6,))
    return np.concatenate([six, np.asarray(translation, dtype=np.float64)], axis=-1)


def slerp_pose(p0, p1, u):
    """Interpolate two poses: rotations along the geodesic, translation linearly.

    ``u`` may be a scalar or an array broadcasting against the leading
    dimensions of the poses. Exact endpoints are returned unchanged.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    u_arr = np.asarray(u, dtype=np.float64)
    if u_arr.ndim == 0:
        if u_arr == 0.0:
            return p0.copy()
        if u_arr == 1.0:
            return p1.copy()
    q0 = matrix_to_quaternion(pose_rotations(p0))
    q1 = matrix_to_quaternion(pose_rotations(p1))
    uj = u_arr[..., None] if u_arr.ndim else u_arr
    q = quaternion_slerp(q0, q1, uj)
    ut = u_arr[..., None] if u_arr.ndim else u_arr
    trans = (1.0 - ut) * p0[..., TRANSLATION_SLICE] + ut * p1[..., TRANSLATION_SLICE]
    out = pose_from_matrices(quaternion_to_matrix(q), trans)
    if u_arr.ndim:
        out = np.where((u_arr == 0.0)[..., None], p0, out)
        out = np.where((u_arr == 1.0)[..., None], p1, out)
    return out


def identity_pose():
    return np.concatenate([np.tile(IDENTITY_6D, NUM_JOINTS), np.zeros(3)])


def random_rotations(rng, n):
    """Uniformly distributed rotation matrices (via normalized Gaussian quaternions)."""
    q = rng.standard_normal((n, 4))
    return quaternion_to_matrix(q)
