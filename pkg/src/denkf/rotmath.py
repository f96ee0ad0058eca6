"""Quaternion and 6D rotation algebra.

Conventions used throughout the package:

* quaternions are Hamilton, scalar first ``[w, x, y, z]`` and canonicalized
  to ``w >= 0``;
* the global frame is right-handed with +Y up and +Z body-forward at
  calibration;
* a 6D rotation is the first two columns of the rotation matrix, stored
  column-major as ``[a1, a2, a3, b1, b2, b3]``.

Every function accepts arrays with arbitrary leading batch dimensions.
"""
import numpy as np

from .errors import DegenerateSixD, GimbalDegenerate

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
IDENTITY_SIXD = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
UP = np.array([0.0, 1.0, 0.0])
FORWARD = np.array([0.0, 0.0, 1.0])

_SIXD_EPS = 1e-8
_GIMBAL_EPS = 1e-6


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q):
    """Flip sign so that w >= 0 (removes the double-cover ambiguity)."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_mul(p, q):
    """Hamilton product ``p ⊗ q``, renormalized."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    out = np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)
    return quat_normalize(out)


def quat_inverse(q):
    return np.asarray(q, dtype=float) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    # v' = v + 2w (u x v) + 2 u x (u x v)
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to canonical unit quaternion (branch on the largest
    of w, x, y, z for numerical stability)."""
    m = np.asarray(m, dtype=float)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    trace = m00 + m11 + m22
    cands = np.stack([
        np.stack([1 + trace, m[..., 2, 1] - m[..., 1, 2],
                  m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
        np.stack([m[..., 2, 1] - m[..., 1, 2], 1 + m00 - m11 - m22,
                  m[..., 0, 1] + m[..., 1, 0], m[..., 0, 2] + m[..., 2, 0]], -1),
        np.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 0, 1] + m[..., 1, 0],
                  1 - m00 + m11 - m22, m[..., 1, 2] + m[..., 2, 1]], -1),
        np.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0],
                  m[..., 1, 2] + m[..., 2, 1], 1 - m00 - m11 + m22], -1),
    ], axis=-2)
    pick = np.argmax(np.stack([trace, m00, m11, m22], -1), axis=-1)
    q = np.take_along_axis(cands, pick[..., None, None], axis=-2)[..., 0, :]
    return canonicalize(quat_normalize(q))


def quat_to_sixd(q):
    m = quat_to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def sixd_to_matrix(d):
    """Gram-Schmidt: normalize the first column, orthogonalize the second
    against it, complete with the cross product.

    Raises DegenerateSixD for a (near) zero first column or (near) parallel
    columns.
    """
    d = np.asarray(d, dtype=float)
    a, b = d[..., :3], d[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= _SIXD_EPS):
        raise DegenerateSixD("first 6D column has (near) zero norm")
    c0 = a / na
    b_perp = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    scale = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1.0)
    if np.any(nb <= _SIXD_EPS * scale):
        raise DegenerateSixD("6D columns are (near) parallel")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def sixd_to_quat(d):
    return matrix_to_quat(sixd_to_matrix(d))


def orthonormalize_sixd(d):
    m = sixd_to_matrix(d)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def calibrate(initial, current):
    """Express ``current`` relative to the orientation captured at start-up."""
    return quat_mul(quat_inverse(initial), current)


def up_axis_yaw(q):
    """Heading about the +Y axis as ``[sin psi, cos psi]``.

    psi is the azimuth of the rotated forward (+Z) vector in the horizontal
    plane; for a yaw-then-tilt rotation this is exactly the twist about +Y.
    """
    f = quat_rotate(q, FORWARD)
    horiz = np.stack([f[..., 0], f[..., 2]], axis=-1)
    n = np.linalg.norm(horiz, axis=-1, keepdims=True)
    if np.any(n < _GIMBAL_EPS):
        raise GimbalDegenerate("forward axis is aligned with the up axis; yaw undefined")
    return horiz / n


def yaw_quat(angle):
    return quat_from_axis_angle(UP, angle)


def yaw_matrix(r_h):
    """Rotation about +Y from a ``[sin, cos]`` pair."""
    r_h = np.asarray(r_h, dtype=float)
    s, c = r_h[..., 0], r_h[..., 1]
    zero, one = np.zeros_like(s), np.ones_like(s)
    m = np.stack([c, zero, s, zero, one, zero, -s, zero, c], axis=-1)
    return m.reshape(s.shape + (3, 3))


def yaw_to_angle(r_h):
    r_h = np.asarray(r_h, dtype=float)
    return np.arctan2(r_h[..., 0], r_h[..., 1])


def rotate_yaw_sincos(r_h, delta):
    """Add ``delta`` radians to the heading encoded by ``r_h``."""
    r_h = np.asarray(r_h, dtype=float)
    s, c = r_h[..., 0], r_h[..., 1]
    sd, cd = np.sin(delta), np.cos(delta)
    return np.stack([s * cd + c * sd, c * cd - s * sd], axis=-1)


def wrap_angle(a):
    """Wrap radians into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
