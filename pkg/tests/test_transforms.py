import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from graspsynth import transforms as tf


def test_quat_to_matrix_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        ours = tf.quat_to_matrix(q)
        # scipy uses (x, y, z, w)
        theirs = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        assert np.allclose(ours, theirs, atol=1e-12)


def test_quat_multiply_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.normal(size=4)
        a /= np.linalg.norm(a)
        b = rng.normal(size=4)
        b /= np.linalg.norm(b)
        ours = tf.quat_to_matrix(tf.quat_multiply(a, b))
        theirs = tf.quat_to_matrix(a) @ tf.quat_to_matrix(b)
        assert np.allclose(ours, theirs, atol=1e-12)


def test_quat_from_rotvec_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = rng.normal(size=3) * rng.uniform(0, np.pi)
        ours = tf.quat_to_matrix(tf.quat_from_rotvec(v))
        theirs = Rotation.from_rotvec(v).as_matrix()
        assert np.allclose(ours, theirs, atol=1e-10)
    # tiny rotations go through the series branch
    assert np.allclose(tf.quat_from_rotvec(np.zeros(3)), [1, 0, 0, 0])
    v = np.array([1e-6, -2e-6, 5e-7])
    assert np.allclose(
        tf.quat_to_matrix(tf.quat_from_rotvec(v)),
        Rotation.from_rotvec(v).as_matrix(),
        atol=1e-14,
    )


def test_rotvec_to_matrix_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.normal(size=3) * rng.uniform(0, 3)
        assert np.allclose(tf.rotvec_to_matrix(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-10)
    assert np.allclose(tf.rotvec_to_matrix(np.zeros(3)), np.eye(3))


def test_so3_coeff_series_continuity():
    # above the switch point the closed form is well conditioned; compare there
    for s in [2e-8, 1e-7, 1e-4, 0.01]:
        t = np.sqrt(s)
        assert abs(tf.so3_coeff_a(s) - np.sin(t) / t) < 1e-12
        assert abs(tf.so3_coeff_b(s) - (1 - np.cos(t)) / s) < 1e-7
    # below it the series is the accurate branch; check the s -> 0 limits
    for s in [0.0, 1e-12, 1e-10, 1e-9]:
        assert abs(tf.so3_coeff_a(s) - 1.0) < 1e-9
        assert abs(tf.so3_coeff_b(s) - 0.5) < 1e-9


def test_so3_coeff_derivatives_match_fd():
    # central differences are only a trustworthy oracle where s +/- h stays
    # inside the well-conditioned closed-form branch
    for s in [1e-4, 0.01, 1.0, 4.0]:
        h = max(s * 1e-4, 1e-6)
        fd_a = (tf.so3_coeff_a(s + h) - tf.so3_coeff_a(s - h)) / (2 * h)
        fd_b = (tf.so3_coeff_b(s + h) - tf.so3_coeff_b(s - h)) / (2 * h)
        assert abs(tf.so3_coeff_a_deriv(s) - fd_a) < 1e-5
        assert abs(tf.so3_coeff_b_deriv(s) - fd_b) < 1e-5
    # near zero, check against the Taylor expansions
    # a'(s) = -1/6 + s/60 + O(s^2), b'(s) = -1/24 + s/360 + O(s^2)
    for s in [0.0, 1e-9, 1e-7, 9e-6]:
        assert abs(tf.so3_coeff_a_deriv(s) - (-1 / 6 + s / 60)) < 1e-10
        assert abs(tf.so3_coeff_b_deriv(s) - (-1 / 24 + s / 360)) < 1e-10
    # just above the branch switch the closed form must line up too
    for s in [2e-5, 1e-4]:
        assert abs(tf.so3_coeff_a_deriv(s) - (-1 / 6 + s / 60 - s * s / 1680)) < 1e-9
        assert abs(tf.so3_coeff_b_deriv(s) - (-1 / 24 + s / 360 - s * s / 13440)) < 1e-9


def test_rotation_between():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = rng.normal(size=3)
        b /= np.linalg.norm(b)
        r = tf.rotation_between(a, b)
        assert np.allclose(r @ a, b, atol=1e-10)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-10)
    # antiparallel case
    r = tf.rotation_between(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]))
    assert np.allclose(r @ [0, 0, 1], [0, 0, -1], atol=1e-10)


def test_transform_roundtrip():
    rng = np.random.default_rng(5)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    t = tf.make_transform(tf.quat_to_matrix(q), rng.normal(size=3))
    pts = rng.normal(size=(10, 3))
    back = tf.transform_points(tf.transform_inverse(t), tf.transform_points(t, pts))
    assert np.allclose(back, pts, atol=1e-12)


def test_quat_normalize_rejects_zero():
    with pytest.raises(ValueError):
        tf.quat_normalize(np.zeros(4))


def test_matrix_to_quat_roundtrip():
    rng = np.random.default_rng(11)
    for _ in range(200):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        back = tf.matrix_to_quat(tf.quat_to_matrix(q))
        assert np.allclose(back, q, atol=1e-12)


def test_matrix_to_quat_near_pi_branches():
    # trace near -1 forces the largest-diagonal branches
    axes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [1, -2, 3]], dtype=float)
    for axis in axes:
        axis = axis / np.linalg.norm(axis)
        m = tf.rotvec_to_matrix(axis * (np.pi - 1e-7))
        q = tf.matrix_to_quat(m)
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        assert np.allclose(tf.quat_to_matrix(q), m, atol=1e-9)


def test_matrix_to_quat_rejects_bad_shape():
    with pytest.raises(ValueError, match="3x3"):
        tf.matrix_to_quat(np.eye(4))
