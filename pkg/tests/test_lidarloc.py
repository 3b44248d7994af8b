import numpy as np
import pytest

from conftest import random_pose
from panocalib.errors import ImproperRotation, LocalizationFailure
from panocalib.geometry import Plane, Pose, euler_xyz, from_euler_xyz, rotation_distance_deg, so3_exp
from panocalib.lidarloc import (
    Corner,
    IcpParams,
    IcpReport,
    LidarScan,
    coarse_pose,
    densify_reference,
    extract_corner,
    icp_refine,
    localize_lidar,
    room_corners,
    solve_pose_from_corner,
)
from panocalib.planes import fit_planes
from panocalib.recon.mapping import MarkerMap
from panocalib.sim import LidarSpec, render_lidar


def _axis_planes(c):
    return [Plane(np.eye(3)[i], float(c[i])) for i in range(3)]


def test_corner_of_axis_planes():
    cn = extract_corner(_axis_planes([1.0, 2.0, 3.0]), interior=[2.0, 3.0, 4.0])
    assert np.allclose(cn.c, [1, 2, 3], atol=1e-12)
    assert np.allclose(cn.S, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_corner_pose_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    T = random_pose(rng, 1.0, "lidar", "world")
    c = rng.normal(size=3)
    interior = c + 1.0
    cw = extract_corner(_axis_planes(c), interior)
    cl = cw.transformed(T.inverse())
    est = solve_pose_from_corner(cw, cl)
    assert np.abs(est.matrix() - T.matrix()).max() < 1e-12


def test_opposite_handedness_rejected():
    cw = Corner(np.zeros(3), np.eye(3))
    cl = Corner(np.zeros(3), np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ImproperRotation):
        solve_pose_from_corner(cw, cl)


def test_room_corners_count(room, truth_map):
    corners = room_corners(truth_map.planes, room.center)
    # floor plus four walls: four floor corners
    assert len(corners) == 4
    for cn in corners:
        assert abs(np.linalg.det(cn.S) - 1.0) < 1e-12


def test_coarse_pose_closest_to_prior(room, truth_map):
    mc = room_corners(truth_map.planes, room.center)
    T = Pose(from_euler_xyz(3.0, -2.0, 40.0), room.center, "lidar", "world")
    sc = [c.transformed(T.inverse()) for c in mc]
    est, dist = coarse_pose(sc, mc, from_euler_xyz(0.0, 0.0, 20.0))
    assert rotation_distance_deg(est.rotation, T.rotation) < 1e-9
    assert np.linalg.norm(est.translation - T.translation) < 1e-9
    assert dist == pytest.approx(rotation_distance_deg(T.rotation, from_euler_xyz(0, 0, 20)))


# --------------------------------------------------------------------------
# ICP


@pytest.fixture(scope="module")
def truth_map(room):
    return MarkerMap.from_points(room.markers, fit_planes(room.markers, 0.02, 10))


@pytest.fixture(scope="module")
def reference(truth_map):
    return densify_reference(truth_map)


def _scan(room, T_world_lidar, sigma, seed=0):
    spec = LidarSpec("lidar", Pose.identity("rig", "lidar"), v_fov=(-45.0, 15.0), v_res=1.0, h_res=0.5)
    return LidarScan(render_lidar(room, T_world_lidar.inverse(), spec, sigma, seed).points, "lidar")


def test_icp_recovers_small_perturbation(room, reference):
    T = Pose(from_euler_xyz(1.0, -2.0, 30.0), room.center + [0.2, -0.1, 0.1], "lidar", "world")
    scan = _scan(room, T, 0.0)
    rng = np.random.default_rng(0)
    w = rng.normal(size=3)
    init = Pose(so3_exp(np.radians(2.0) * w / np.linalg.norm(w)) @ T.rotation, T.translation + [0.03, -0.02, 0.02],
                "lidar", "world")
    rep = IcpReport([], 0, False)
    est, rms = icp_refine(scan, reference, init, IcpParams(), rep)
    assert rotation_distance_deg(est.rotation, T.rotation) < 0.01
    assert np.linalg.norm(est.translation - T.translation) < 1e-3
    assert rms < 1e-3
    h = rep.rms_history
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(h, h[1:]))


def test_icp_history_monotone_under_noise(room, reference):
    T = Pose(from_euler_xyz(0.0, 0.0, -50.0), room.center, "lidar", "world")
    scan = _scan(room, T, 0.02, 3)
    init = Pose(so3_exp([0.02, -0.01, 0.03]) @ T.rotation, T.translation + [0.04, 0.0, -0.03], "lidar", "world")
    rep = IcpReport([], 0, False)
    est, rms = icp_refine(scan, reference, init, IcpParams(), rep)
    h = rep.rms_history
    assert len(h) >= 2
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(h, h[1:]))
    assert rms == pytest.approx(min(h))
    assert abs(rms - 0.02) < 0.005


# --------------------------------------------------------------------------
# Full localization


def test_localize_lidar_accuracy(room, truth_map, reference):
    T = Pose(from_euler_xyz(2.0, -1.0, 75.0), room.center + [-0.3, 0.4, 0.2], "lidar", "world")
    scan = _scan(room, T, 0.02, 5)
    prior = np.array(euler_xyz(T.rotation)) + [10.0, -10.0, 25.0]  # coarse prior only
    res = localize_lidar(scan, truth_map, prior, reference=reference)
    assert rotation_distance_deg(res.pose.rotation, T.rotation) < 0.2
    assert np.linalg.norm(res.pose.translation - T.translation) < 0.01
    assert res.n_planes >= 3


def test_localize_lidar_without_corner_fails(room, truth_map):
    # a scan of one flat patch has a single plane and therefore no corner
    rng = np.random.default_rng(0)
    flat = np.column_stack([rng.uniform(-1, 1, 2000), rng.uniform(-1, 1, 2000), np.full(2000, -1.0)])
    with pytest.raises(LocalizationFailure):
        localize_lidar(LidarScan(flat, "lidar"), truth_map, (0.0, 0.0, 0.0))
