import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from panocalib.errors import BehindCamera, DegenerateConfiguration, FrameMismatch, GimbalLockWarning
from panocalib.geometry import (
    CameraIntrinsics,
    Plane,
    Pose,
    bearings,
    compose,
    distort,
    euler_xyz,
    fit_plane_lsq,
    from_euler_xyz,
    invert,
    nearest_rotation,
    project,
    project_points,
    projection_jacobian,
    random_rotation,
    rigid_fit,
    rot_x,
    rotation_distance_deg,
    so3_exp,
    so3_log,
    triangulate_stereo,
    undistort_normalized,
)


def test_compose_identity_and_inverse(rng):
    T = random_pose(rng, src="a", dst="b")
    assert np.allclose(compose(T, Pose.identity("a", "a")).matrix(), T.matrix(), atol=0)
    I = compose(T, invert(T))
    assert I.from_frame == I.to_frame == "b"
    assert np.abs(I.matrix() - np.eye(4)).max() < 1e-12


def test_compose_matches_homogeneous_product(rng):
    for _ in range(20):
        a = random_pose(rng, src="m", dst="w")
        b = random_pose(rng, src="s", dst="m")
        c = compose(a, b)
        assert (c.from_frame, c.to_frame) == ("s", "w")
        assert np.abs(c.matrix() - a.matrix() @ b.matrix()).max() < 1e-12


def test_compose_rejects_mismatched_frames(rng):
    with pytest.raises(FrameMismatch):
        compose(random_pose(rng, src="a", dst="b"), random_pose(rng, src="c", dst="d"))


def test_pose_rejects_improper_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rotation_stays_orthonormal_under_long_chains(seed):
    rng = np.random.default_rng(seed)
    T = Pose.identity("f", "f")
    for _ in range(50):
        T = compose(Pose(random_rotation(rng), rng.normal(size=3), "f", "f"), T)
    R = T.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_project_principal_point(K):
    assert np.allclose(project(K, [0.0, 0.0, 1.0]), [K.cx, K.cy])


def test_project_hand_evaluated():
    K = CameraIntrinsics(1746.0, 1746.0, 640.0, 512.0, 1280, 1024)
    assert np.allclose(project(K, [0.1, 0.0, 1.0]), [814.6, 512.0], atol=1e-9)


def test_project_behind_camera(K):
    T = Pose(np.eye(3), [0.0, 0.0, -2.0], "world", "cam")
    with pytest.raises(BehindCamera):
        project(K, [0.0, 0.0, 1.0], T)


def test_projection_jacobian_matches_finite_differences(rng):
    K = CameraIntrinsics(800.0, 790.0, 320.0, 240.0, 640, 480, (-0.2, 0.05, 1e-3, -2e-3))
    X = np.column_stack([rng.uniform(-0.5, 0.5, (10, 2)), rng.uniform(1.0, 3.0, 10)])
    J = projection_jacobian(K, X)
    h = 1e-6
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        fd = (project_points(K, X + d)[0] - project_points(K, X - d)[0]) / (2 * h)
        assert np.allclose(J[:, :, j], fd, rtol=1e-6, atol=1e-4)


def test_undistort_inverts_distort(rng):
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480, (-0.25, 0.07, 1e-3, -5e-4))
    xy = rng.uniform(-0.35, 0.35, (50, 2))
    d = distort(K, xy)
    pix = d * [K.fx, K.fy] + [K.cx, K.cy]
    assert np.abs(undistort_normalized(K, pix) - xy).max() < 1e-9


def test_bearings_are_unit_and_reproject(K, rng):
    X = np.column_stack([rng.uniform(-1, 1, (20, 2)), rng.uniform(1.0, 4.0, 20)])
    f = bearings(K, project_points(K, X)[0])
    assert np.allclose(np.linalg.norm(f, axis=1), 1.0)
    assert np.allclose(f, X / np.linalg.norm(X, axis=1, keepdims=True), atol=1e-12)


def test_so3_exp_log_roundtrip(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-10)


def test_euler_roundtrip_and_gimbal_warning(rng):
    for _ in range(50):
        e = rng.uniform([-179, -89, -179], [179, 89, 179])
        assert np.allclose(euler_xyz(from_euler_xyz(*e)), e, atol=1e-9)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        e = euler_xyz(from_euler_xyz(10.0, 90.0, 0.0))
    assert any(issubclass(x.category, GimbalLockWarning) for x in w)
    assert abs(e[1] - 90.0) < 1e-9


def test_rotation_distance_of_one_degree():
    assert math.isclose(rotation_distance_deg(rot_x(1.0), np.eye(3)), 1.0, rel_tol=1e-9)


def test_nearest_rotation_projects(rng):
    R = random_rotation(rng)
    M = R + 1e-4 * rng.normal(size=(3, 3))
    Q = nearest_rotation(M)
    assert np.abs(Q.T @ Q - np.eye(3)).max() < 1e-12 and np.linalg.det(Q) > 0


def test_rigid_fit_identity(rng):
    P = rng.normal(size=(10, 3))
    T = rigid_fit(P, P)
    assert np.abs(T.matrix() - np.eye(4)).max() < 1e-12


def test_rigid_fit_exact_recovery(rng):
    for _ in range(50):
        T = random_pose(rng, 2.0)
        src = rng.normal(size=(rng.integers(3, 30), 3))
        est = rigid_fit(src, T.apply(src))
        assert np.abs(est.rotation - T.rotation).max() < 1e-10
        assert np.abs(est.translation - T.translation).max() < 1e-10


def test_rigid_fit_noisy_translation_within_1mm():
    rng = np.random.default_rng(7)
    T = random_pose(rng, 1.0)
    src = rng.uniform(-1, 1, (100, 3))
    dst = T.apply(src) + rng.normal(0, 0.001, (100, 3))
    est = rigid_fit(src, dst)
    assert np.linalg.norm(est.translation - T.translation) < 0.001


def test_rigid_fit_rejects_collinear():
    src = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        rigid_fit(src, src + 1.0)


def test_rigid_fit_never_reflects(rng):
    src = rng.normal(size=(8, 3))
    dst = src * [1.0, 1.0, -1.0]  # mirror image
    assert np.linalg.det(rigid_fit(src, dst).rotation) > 0


def test_triangulate_stereo_recovers_points(K, rng):
    T_rl = Pose(np.eye(3), [-0.12, 0.0, 0.0], "left", "right")
    X = np.column_stack([rng.uniform(-0.5, 0.5, (20, 2)), rng.uniform(1.0, 3.0, 20)])
    xl = project_points(K, X)[0]
    xr = project_points(K, X, T_rl)[0]
    P = np.array([triangulate_stereo(a, b, K, K, T_rl) for a, b in zip(xl, xr)])
    assert np.abs(P - X).max() < 1e-8


def test_plane_lsq_and_distance(rng):
    n = np.array([0.0, 0.6, 0.8])
    a = rng.normal(size=(30, 2))
    u, v = np.array([1.0, 0, 0]), np.cross(n, [1.0, 0, 0])
    pts = a[:, :1] * u + a[:, 1:] * v + 2.0 * n
    nn, d = fit_plane_lsq(pts)
    pl = Plane(nn, d)
    assert np.abs(pl.distance(pts)).max() < 1e-12
    assert np.isclose(abs(nn @ n), 1.0)


def test_double_inverse(rng):
    T = random_pose(rng)
    assert np.abs(invert(invert(T)).matrix() - T.matrix()).max() < 1e-12


def test_backproject_roundtrip(rng):
    from panocalib.geometry import backproject

    K0 = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    Kd = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480, (-0.2, 0.05, 1e-3, -1e-3))
    pix = rng.uniform([50, 50], [590, 430], (30, 2))
    depth = rng.uniform(0.5, 5.0, 30)
    assert np.abs(project_points(K0, backproject(K0, pix, depth))[0] - pix).max() < 1e-9
    assert np.abs(project_points(Kd, backproject(Kd, pix, depth))[0] - pix).max() < 1e-6


def test_rigid_fit_equivariance(rng):
    src = rng.normal(size=(12, 3))
    dst = random_pose(rng).apply(src) + 0.01 * rng.normal(size=(12, 3))
    A = random_pose(rng, src="dst", dst="dst")
    lhs = rigid_fit(A.apply(src), A.apply(dst))
    rhs = A.matrix() @ rigid_fit(src, dst).matrix() @ np.linalg.inv(A.matrix())
    assert np.abs(lhs.matrix() - rhs).max() < 1e-10


def test_nearest_rotation_cases(rng):
    from panocalib.errors import SingularInput

    R = random_rotation(rng)
    assert np.abs(nearest_rotation(R) - R).max() < 1e-12
    E = rng.normal(size=(3, 3))
    M = R + 1e-3 * E / np.linalg.norm(E)
    Q = nearest_rotation(M)
    assert np.abs(Q.T @ Q - np.eye(3)).max() < 1e-12
    assert np.linalg.norm(Q - M) < 2e-3
    F = R @ np.diag([1.0, 1.0, -1.0])
    assert np.linalg.det(nearest_rotation(F)) > 0
    with pytest.raises(SingularInput):
        nearest_rotation(np.zeros((3, 3)))


def test_euler_table_values_and_many_roundtrips():
    assert np.allclose(euler_xyz(np.eye(3)), 0.0)
    assert np.allclose(euler_xyz(from_euler_xyz(90, -45, 0)), (90, -45, 0), atol=1e-9)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        R = random_rotation(rng)
        e = euler_xyz(R)
        if abs(e[1]) >= 89.0:
            continue
        worst = max(worst, np.abs(from_euler_xyz(*e) - R).max())
    assert worst < 1e-9


def test_triangulate_degenerate_and_noise(K):
    from panocalib.errors import DivergentRays, EpipolarViolation

    with pytest.raises(DivergentRays):
        triangulate_stereo([600.0, 500.0], [600.0, 500.0], K, K, Pose.identity("left", "right"))
    T_rl = Pose(np.eye(3), [-0.12, 0.0, 0.0], "left", "right")
    with pytest.raises(EpipolarViolation):
        triangulate_stereo([600.0, 500.0], [500.0, 520.0], K, K, T_rl)
    rng = np.random.default_rng(3)
    X = np.array([0.1, -0.05, 2.0])
    xl, xr = project(K, X), project(K, X, T_rl)
    err = [triangulate_stereo(xl + rng.normal(0, 0.2, 2), xr + rng.normal(0, 0.2, 2), K, K, T_rl)[2] - 2.0
           for _ in range(500)]
    # first-order depth sigma: z^2 * sqrt(2) * 0.2 px / (f * b) = 5.4 mm
    sigma = 4.0 * np.sqrt(2) * 0.2 / (K.fx * 0.12)
    rms = float(np.sqrt(np.mean(np.square(err))))
    assert rms < 0.01
    assert abs(rms - sigma) < 0.25 * sigma
