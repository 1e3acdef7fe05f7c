import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from ndtslam.geometry import (Point3, Pose6D, apply, compose, compose_arrays, edge_error,
                              euler_to_matrix, invert, invert_arrays, matrix_to_euler,
                              transform_points, wrap_angle)

from conftest import random_pose_array


def close_pose(a, b, tol=1e-9):
    d = a.as_array() - b.as_array()
    d[3:] = wrap_angle(d[3:])
    return np.max(np.abs(d)) < tol


def test_rotation_matches_independent_library(rng):
    # intrinsic z-y-x == scipy's "ZYX" with angles (rz, ry, rx)
    e = random_pose_array(rng, 200)[:, 3:]
    ours = euler_to_matrix(e)
    ref = Rotation.from_euler("ZYX", e[:, ::-1]).as_matrix()
    assert np.allclose(ours, ref, atol=1e-12)


def test_matrix_to_euler_roundtrip(rng):
    e = random_pose_array(rng, 500)[:, 3:]
    back = matrix_to_euler(euler_to_matrix(e))
    assert np.allclose(euler_to_matrix(back), euler_to_matrix(e), atol=1e-12)
    assert np.all(np.abs(back[:, 1]) <= math.pi / 2 + 1e-12)


def test_gimbal_lock_branch():
    R = euler_to_matrix(np.array([0.3, math.pi / 2, 0.2]))
    e = matrix_to_euler(R)
    assert e[0] == 0.0
    assert np.allclose(euler_to_matrix(e), R, atol=1e-9)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    a = np.linspace(-20, 20, 10001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.sin(w), np.sin(a)) and np.allclose(np.cos(w), np.cos(a))


def test_pose_angles_canonical():
    p = Pose6D(0, 0, 0, 0.1, 2.0, 0.3)  # pitch beyond pi/2 folds back
    assert abs(p.ry) <= math.pi / 2
    assert np.allclose(p.rotation, euler_to_matrix(np.array([0.1, 2.0, 0.3])), atol=1e-12)
    q = Pose6D(0, 0, 0, 7.0, 0, -7.0)
    assert -math.pi < q.rx <= math.pi and -math.pi < q.rz <= math.pi


def test_compose_examples():
    p = Pose6D(1, 2, 3, 0.1, -0.2, 0.3)
    assert compose(Pose6D(), p) == p
    assert close_pose(compose(p, Pose6D()), p, 1e-12)
    assert close_pose(compose(p, invert(p)), Pose6D())
    assert compose(Pose6D(1, 0, 0), Pose6D(2, 0, 0)) == Pose6D(3, 0, 0)


def test_invert_examples(rng):
    assert invert(Pose6D()) == Pose6D()
    assert invert(Pose6D(1, 2, 3)) == Pose6D(-1, -2, -3)
    for v in random_pose_array(rng, 50):
        p = Pose6D.from_array(v)
        assert close_pose(invert(invert(p)), p)


def test_apply_examples():
    assert apply(Pose6D(), Point3(1, 2, 3)).as_array().tolist() == [1, 2, 3]
    q = apply(Pose6D(0, 0, 0, 0, 0, math.pi / 2), Point3(1, 0, 0)).as_array()
    assert np.allclose(q, [0, 1, 0], atol=1e-9)
    assert apply(Pose6D(5, 0, 0), Point3(1, 2, 3)).as_array().tolist() == [6, 2, 3]


def test_point3_rejects_nonfinite():
    with pytest.raises(ValueError):
        Point3(math.nan, 0, 0)


def test_compose_matches_homogeneous_matrices(rng):
    a = random_pose_array(rng, 100)
    b = random_pose_array(rng, 100)
    c = compose_arrays(a, b)
    for k in range(100):
        Ta = Pose6D.from_array(a[k]).matrix()
        Tb = Pose6D.from_array(b[k]).matrix()
        assert np.allclose(Pose6D.from_array(c[k]).matrix(), Ta @ Tb, atol=1e-9)


def test_roundtrip_1000_random(rng):
    p = random_pose_array(rng, 1000)
    ident = compose_arrays(p, invert_arrays(p))
    assert np.max(np.abs(ident[:, :3])) < 1e-9
    assert np.max(np.abs(wrap_angle(ident[:, 3:]))) < 1e-9
    back = invert_arrays(invert_arrays(p))
    assert np.allclose(Pose6D.from_array(back[0]).matrix(), Pose6D.from_array(p[0]).matrix())
    assert np.max(np.abs(back[:, :3] - p[:, :3])) < 1e-9


def test_associativity(rng):
    a, b, c = (random_pose_array(rng, 200) for _ in range(3))
    left = compose_arrays(compose_arrays(a, b), c)
    right = compose_arrays(a, compose_arrays(b, c))
    assert np.max(np.abs(left[:, :3] - right[:, :3])) < 1e-9
    R1 = euler_to_matrix(left[:, 3:])
    R2 = euler_to_matrix(right[:, 3:])
    assert np.allclose(R1, R2, atol=1e-9)


def test_edge_error_examples(rng):
    z = Pose6D(1, 2, 0, 0, 0, 0.5)
    assert np.allclose(edge_error(Pose6D(), z, z), 0)
    e = edge_error(Pose6D(), Pose6D(2, 0, 0), Pose6D(1, 0, 0))
    assert np.allclose(e, [1, 0, 0, 0, 0, 0])
    xi = random_pose_array(rng, 200)
    zz = random_pose_array(rng, 200)
    for a, b in zip(xi, zz):
        pa, pb = Pose6D.from_array(a), Pose6D.from_array(b)
        assert np.linalg.norm(edge_error(pa, compose(pa, pb), pb)) < 1e-9


def test_edge_error_wraps_rotation():
    e = edge_error(Pose6D(0, 0, 0, 0, 0, 3.1), Pose6D(0, 0, 0, 0, 0, -3.1), Pose6D())
    assert abs(e[5]) == pytest.approx(2 * math.pi - 6.2, abs=1e-9)


angles = st.floats(-math.pi, math.pi, allow_nan=False)
pitches = st.floats(-1.5, 1.5, allow_nan=False)
coords = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(coords, coords, coords, angles, pitches, angles, coords, coords, coords, coords, coords, coords)
def test_apply_preserves_distances(tx, ty, tz, rx, ry, rz, ax, ay, az, bx, by, bz):
    p = Pose6D(tx, ty, tz, rx, ry, rz)
    a, b = Point3(ax, ay, az), Point3(bx, by, bz)
    d0 = np.linalg.norm(a.as_array() - b.as_array())
    d1 = np.linalg.norm(apply(p, a).as_array() - apply(p, b).as_array())
    assert abs(d1 - d0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(coords, coords, coords, angles, pitches, angles)
def test_identity_composition_leaves_fields(tx, ty, tz, rx, ry, rz):
    p = Pose6D(tx, ty, tz, rx, ry, rz)
    q = compose(Pose6D(), p)
    assert np.max(np.abs(q.as_array()[:3] - p.as_array()[:3])) < 1e-12
    assert np.max(np.abs(wrap_angle(q.as_array()[3:] - p.as_array()[3:]))) < 1e-12


def test_transform_points_matches_apply(rng):
    p = Pose6D.from_array(random_pose_array(rng, 1)[0])
    pts = rng.normal(size=(20, 3))
    out = transform_points(p, pts)
    for a, b in zip(pts, out):
        assert np.allclose(apply(p, a).as_array(), b)
