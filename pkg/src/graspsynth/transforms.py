"""Rigid transform and rotation helpers.

Quaternions are float64 arrays in (w, x, y, z) order and are kept unit
norm. Rotation increments use the axis-angle exponential map; the two
Rodrigues coefficients are evaluated through series expansions near zero
so they (and their derivatives) stay finite at the identity.
"""

from __future__ import annotations

import numpy as np

_EPS_SQ = 1e-8  # switch point for the series branches, argument is angle^2
_EPS_DERIV = 1e-5  # wider switch for derivative forms, which divide by s^2


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle vector -> unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    s = float(v @ v)
    # w = cos(t/2), xyz = sinc(t/2)/2 * v  with t = |v|
    if s < _EPS_SQ:
        w = 1.0 - s / 8.0 + s * s / 384.0
        k = 0.5 - s / 48.0 + s * s / 3840.0
    else:
        t = np.sqrt(s)
        w = np.cos(0.5 * t)
        k = np.sin(0.5 * t) / t
    return quat_normalize(np.array([w, k * v[0], k * v[1], k * v[2]]))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_coeff_a(s):
    """sin(t)/t as a function of s = t^2; series below the switch point."""
    s = np.asarray(s, dtype=np.float64)
    small = s < _EPS_SQ
    safe = np.where(small, 1.0, s)
    t = np.sqrt(safe)
    closed = np.sin(t) / t
    series = 1.0 - s / 6.0 + s * s / 120.0
    return np.where(small, series, closed)


def so3_coeff_a_deriv(s):
    """d/ds of sin(sqrt(s))/sqrt(s)."""
    s = np.asarray(s, dtype=np.float64)
    # the closed form divides a cancellation by s^2, so the series switch
    # sits far above the one used for the coefficient itself
    small = s < _EPS_DERIV
    safe = np.where(small, 1.0, s)
    t = np.sqrt(safe)
    closed = (t * np.cos(t) - np.sin(t)) / (2.0 * safe * t)
    series = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
    return np.where(small, series, closed)


def so3_coeff_b(s):
    """(1 - cos(t))/t^2 as a function of s = t^2."""
    s = np.asarray(s, dtype=np.float64)
    small = s < _EPS_SQ
    safe = np.where(small, 1.0, s)
    t = np.sqrt(safe)
    # half-angle form keeps the numerator cancellation-free
    half = np.sin(t / 2.0)
    closed = 2.0 * half * half / safe
    series = 0.5 - s / 24.0 + s * s / 720.0
    return np.where(small, series, closed)


def so3_coeff_b_deriv(s):
    """d/ds of (1 - cos(sqrt(s)))/s."""
    s = np.asarray(s, dtype=np.float64)
    small = s < _EPS_DERIV
    safe = np.where(small, 1.0, s)
    t = np.sqrt(safe)
    half = np.sin(t / 2.0)
    closed = (half * (t * np.cos(t / 2.0) - 2.0 * half)) / (safe * safe)
    series = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    return np.where(small, series, closed)


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series-safe at the identity."""
    v = np.asarray(v, dtype=np.float64)
    s = float(v @ v)
    k = skew(v)
    return np.eye(3) + float(so3_coeff_a(s)) * k + float(so3_coeff_b(s)) * (k @ k)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        axis = axis / np.linalg.norm(axis)
        return rotvec_to_matrix(np.pi * axis)
    w = np.cross(a, b)
    k = skew(w)
    return np.eye(3) + k + k @ k / (1.0 + c)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, sign fixed to w >= 0.

    Branches on the largest of trace and diagonal entries so the square
    root argument stays away from zero for every input rotation.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 rotation matrix")
    t = np.trace(m)
    if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([
            0.5 * r,
            (m[2, 1] - m[1, 2]) * s,
            (m[0, 2] - m[2, 0]) * s,
            (m[1, 0] - m[0, 1]) * s,
        ])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def make_transform(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    t = np.eye(4)
    t[:3, :3] = rotation
    t[:3, 3] = translation
    return t


def transform_points(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ t[:3, :3].T + t[:3, 3]


def transform_inverse(t: np.ndarray) -> np.ndarray:
    r = t[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t[:3, 3]
    return out
