from itertools import combinations, permutations

import numpy as np
import pytest
from scipy.spatial import Delaunay

from panocalib.camloc import (
    LocParams,
    delaunay_2d,
    enumerate_3d_triangles,
    greedy_inliers,
    localize_camera,
    triangle_pnp,
)
from panocalib.errors import DegenerateConfiguration, DegenerateInput, LocalizationFailure, NoSolution
from panocalib.geometry import CameraIntrinsics, Pose, project_points, rot_y, rotation_distance_deg
from panocalib.p3p import ap3p
from panocalib.sim import look_pose, render_detections


# --------------------------------------------------------------------------
# Triangulations


@pytest.mark.parametrize("seed", range(5))
def test_delaunay_empty_circumcircle(seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 1000, (100, 2))
    tris = delaunay_2d(P, shape_filter=False)
    assert len(tris) == len(Delaunay(P).simplices)
    for t in tris:
        a, b, c = P[list(t.vertices)]
        # circumcenter
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        center = np.array([ux, uy])
        r = np.linalg.norm(a - center)
        others = np.delete(P, list(t.vertices), axis=0)
        assert np.all(np.linalg.norm(others - center, axis=1) >= r * (1 - 1e-9))


def test_delaunay_shape_filter():
    rng = np.random.default_rng(7)
    P = rng.uniform(0, 1000, (100, 2))
    for t in delaunay_2d(P, min_angle_deg=20.0, max_ratio=5.0):
        e = np.array(t.edges)
        assert e.max() / e.min() < 5.0
        a, b, c = e
        cos = [(b * b + c * c - a * a) / (2 * b * c), (a * a + c * c - b * b) / (2 * a * c),
               (a * a + b * b - c * c) / (2 * a * b)]
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).min() > 20.0


def test_delaunay_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        delaunay_2d([[0, 0], [1, 1]])
    with pytest.raises(DegenerateInput):
        delaunay_2d([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_enumerate_3d_triangles_matches_brute_force():
    rng = np.random.default_rng(3)
    P = rng.uniform(0, 2, (40, 3))
    got = {t.vertices for t in enumerate_3d_triangles(P, max_edge=1.0)}
    want = set()
    for i, j, k in combinations(range(len(P)), 3):
        if max(np.linalg.norm(P[i] - P[j]), np.linalg.norm(P[i] - P[k]), np.linalg.norm(P[j] - P[k])) <= 1.0:
            want.add((i, j, k))
    assert got == want
    for t in enumerate_3d_triangles(P, max_edge=1.0):
        assert list(t.edges) == sorted(t.edges)


# --------------------------------------------------------------------------
# Scoring


def test_greedy_inliers_one_to_one():
    dets = np.array([[0.0, 0.0], [10.0, 0.0]])
    pix = np.array([[0.5, 0.0], [0.2, 0.0], [9.0, 0.0]])
    out = greedy_inliers(pix, np.ones(3, bool), dets, 2.0)
    assert out == [(0, 1), (1, 2)]


# --------------------------------------------------------------------------
# Exhaustive search oracle


def _oracle_score(R, t, P, dets, K, tol):
    pix, z = project_points(K, P, Pose(R, t, "world", "camera"))
    cand = []
    for m in range(len(P)):
        if z[m] <= 1e-9:
            continue
        for d in range(len(dets)):
            dist = float(np.hypot(*(dets[d] - pix[m])))
            if dist <= tol:
                cand.append((dist, d, m))
    cand.sort()
    used_d, used_m, n = set(), set(), 0
    for _, d, m in cand:
        if d not in used_d and m not in used_m:
            used_d.add(d)
            used_m.add(m)
            n += 1
    return n


def exhaustive_best(dets, d2, P, K, tol, max_edge):
    best = 0
    for tri in d2:
        pix3 = dets[list(tri.vertices)]
        for trip in combinations(range(len(P)), 3):
            X = P[list(trip)]
            if max(np.linalg.norm(X[0] - X[1]), np.linalg.norm(X[0] - X[2]), np.linalg.norm(X[1] - X[2])) > max_edge:
                continue
            for perm in permutations(range(3)):
                try:
                    poses = ap3p(pix3, X[list(perm)], K, tol_px=1e-3)
                except (DegenerateConfiguration, NoSolution):
                    continue
                for pose in poses:
                    best = max(best, _oracle_score(pose.rotation, pose.translation, P, dets, K, tol))
    return best


@pytest.mark.parametrize("seed", range(4))
def test_triangle_pnp_equals_exhaustive_search(seed):
    rng = np.random.default_rng(200 + seed)
    K = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)
    n = int(rng.integers(7, 11))
    P = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-0.8, 0.8, n), rng.uniform(3, 4, n)])
    T = Pose(rot_y(rng.uniform(-10, 10)), rng.normal(0, 0.1, 3), "world", "camera")
    pix, _ = project_points(K, P, T)
    keep = rng.permutation(n)[: n - 2]
    dets = np.vstack([pix[keep] + rng.normal(0, 0.5, (len(keep), 2)), rng.uniform([0, 0], [640, 480], (2, 2))])
    params = LocParams(prefilter=False, refine=False, patience=None, map_tol=0.0, min_inlier_ratio=0.0,
                       min_inliers=3, early_exit=2.0, n_rounds=10**6)
    d2 = delaunay_2d(dets)
    d3 = enumerate_3d_triangles(P, max_edge=1.0)
    res = triangle_pnp(dets, d2, d3, P, K, params)
    want = exhaustive_best(dets, d2, P, K, params.threshold(K), 1.0)
    assert res.ransac_inliers == want
    assert res.inlier_count == want


# --------------------------------------------------------------------------
# Localization in the room


@pytest.fixture(scope="module")
def view(room):
    K = CameraIntrinsics(1746.0, 1744.0, 640.0, 512.0, 1280, 1024)
    T = look_pose([1.5, 1.0, 1.3], 60.0, 5.0).inverse().relabel("rig", "camera")
    return K, T


def test_localize_noiseless(room, view):
    K, T = view
    det = render_detections(room, K, T, 0.0, 0)
    res = localize_camera(det.pixels, room.markers, K)
    assert res.inlier_count == len(det.pixels)
    assert rotation_distance_deg(res.pose.rotation, T.rotation) < 1e-6
    assert np.linalg.norm(res.pose.translation - T.translation) < 1e-6
    for d, m in res.inliers:
        assert det.truth_ids[d] == m


def test_localize_noisy_map_and_outliers(room, view):
    K, T = view
    rng = np.random.default_rng(9)
    det = render_detections(room, K, T, 0.2, 1)
    dets = np.vstack([det.pixels, rng.uniform([0, 0], [1280, 1024], (5, 2))])
    noisy = room.markers + rng.normal(0, 0.005, room.markers.shape)
    res = localize_camera(dets, noisy, K)
    assert rotation_distance_deg(res.pose.rotation, T.rotation) < 1.0
    # one wall of markers at ~2 m: the center absorbs part of the map noise
    center = -res.pose.rotation.T @ res.pose.translation
    assert np.linalg.norm(center - (-T.rotation.T @ T.translation)) < 0.04
    assert res.inlier_count >= 0.9 * len(det.pixels)


def test_localize_deterministic(room, view):
    K, T = view
    det = render_detections(room, K, T, 0.2, 2)
    a = localize_camera(det.pixels, room.markers, K)
    b = localize_camera(det.pixels, room.markers, K)
    assert np.array_equal(a.pose.matrix(), b.pose.matrix()) and a.inliers == b.inliers


def test_localize_failures(room, view):
    K, _ = view
    with pytest.raises(LocalizationFailure):
        localize_camera(np.zeros((2, 2)), room.markers, K)
    # five correct detections cannot reach the minimum inlier count
    det = render_detections(room, K, view[1], 0.0, 0)
    with pytest.raises(LocalizationFailure):
        localize_camera(det.pixels[:5], room.markers, K)
