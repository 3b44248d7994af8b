from itertools import combinations, permutations

import numpy as np
import pytest

from conftest import random_pose
from panocalib.errors import NoConsensus, TrackingLost
from panocalib.geometry import CameraIntrinsics, Pose, compose, project_points, random_rotation, rotation_distance_deg, so3_exp
from panocalib.presets import stereo_rig
from panocalib.recon.ba import BAProblem, apply_update, huber_cost, jacobian, residuals, solve, _variable_layout
from panocalib.recon.evaluate import evaluate_reconstruction
from panocalib.recon.mapping import MarkerMap, merge_points
from panocalib.recon.run import reconstruct
from panocalib.recon.tracking import build_stereo_frame, detect_loop_closure, track_frames, track_sequence
from panocalib.recon.triangles import match_triangles
from panocalib.sim import make_stereo_trajectory, render_detections


# --------------------------------------------------------------------------
# Triangle matching


def test_match_exact_transform():
    rng = np.random.default_rng(0)
    A = rng.uniform(-1, 1, (20, 3))
    T = random_pose(rng, 0.5, "k", "k1")
    est, pairs = match_triangles(A, T.apply(A))
    assert len(pairs) == 20
    assert np.abs(est.matrix() - T.matrix()).max() < 1e-9


def test_match_no_compatible_triangles():
    A = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]], dtype=float)
    B = np.array([[0, 0, 0], [0.5, 0, 0], [0, 0.9, 0]], dtype=float)
    with pytest.raises(NoConsensus):
        match_triangles(A, B)


def test_match_with_half_outliers():
    rng = np.random.default_rng(1)
    A = rng.uniform(-1, 1, (20, 3))
    T = random_pose(rng, 0.5, "k", "k1")
    B = T.apply(A)
    B[10:] = rng.uniform(-1, 1, (10, 3))  # half of the partners replaced
    est, pairs = match_triangles(np.vstack([A, rng.uniform(-1, 1, (10, 3))]), B)
    assert np.linalg.norm(est.translation - T.translation) < 1e-3
    assert rotation_distance_deg(est.rotation, T.rotation) < 0.05


def _kabsch(src, dst):
    cs, cd = src.mean(0), dst.mean(0)
    U, _, Vt = np.linalg.svd((dst - cd).T @ (src - cs))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, cd - R @ cs


def _mutual_nn_count(R, t, A, B, tol):
    moved = A @ R.T + t
    d = np.linalg.norm(moved[:, None] - B[None], axis=2)
    count = 0
    for i in range(len(A)):
        j = int(np.argmin(d[i]))
        if int(np.argmin(d[:, j])) == i and d[i, j] < tol:
            count += 1
    return count


def exhaustive_best_count(A, B, edge_tol, inlier_tol, max_edge):
    """Max mutual-NN inliers over every edge-compatible triangle correspondence."""
    def edges(P, tri):
        a, b, c = (P[i] for i in tri)
        return np.array([np.linalg.norm(b - c), np.linalg.norm(a - c), np.linalg.norm(a - b)])

    best = -1
    for ta in combinations(range(len(A)), 3):
        ea = edges(A, ta)
        if ea.max() > max_edge:
            continue
        for tb in combinations(range(len(B)), 3):
            eb = edges(B, tb)
            if eb.max() > max_edge:
                continue
            for p in permutations(range(3)):
                if np.all(np.abs(ea - eb[list(p)]) < edge_tol):
                    R, t = _kabsch(A[list(ta)], B[[tb[i] for i in p]])
                    best = max(best, _mutual_nn_count(R, t, A, B, inlier_tol))
    return best


@pytest.mark.parametrize("seed", range(6))
def test_match_equals_exhaustive_search(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(6, 13))
    A = rng.uniform(-0.6, 0.6, (n, 3))
    T = random_pose(rng, 0.5)
    B = T.apply(A) + rng.normal(0, 0.004, (n, 3))
    k = int(rng.integers(0, n // 2))
    B[:k] = rng.uniform(-0.6, 0.6, (k, 3))  # corrupt some partners
    _, pairs = match_triangles(A, B, edge_tol=0.02, inlier_tol=0.03, max_edge=1.5, refine=False)
    assert len(pairs) == exhaustive_best_count(A, B, 0.02, 0.03, 1.5)


# --------------------------------------------------------------------------
# Tracking and loop closure


def _frames(room, traj, sigma=0.0):
    rig = stereo_rig()
    K = rig.cameras[0].intrinsics
    T_rl = rig.cameras[1].T_sensor_rig
    out = []
    for k, T in enumerate(traj):
        Tl = T.inverse()
        Tr = compose(T_rl.relabel("dst", "right"), Tl.relabel("world", "dst"))
        dl = render_detections(room, K, Tl, sigma, 2 * k).pixels
        dr = render_detections(room, K, Tr, sigma, 2 * k + 1).pixels
        out.append(build_stereo_frame(k, dl, dr, K, K, T_rl))
    return out, K, T_rl


@pytest.fixture(scope="module")
def trajectory(room):
    return make_stereo_trajectory(room, 60, 0)


def test_noiseless_tracking_matches_truth(room, trajectory):
    frames, _, _ = _frames(room, trajectory)
    poses = track_sequence(frames)
    assert np.array_equal(poses[0].matrix(), np.eye(4))
    T0inv = trajectory[0].inverse()
    for est, T in zip(poses, trajectory):
        truth = compose(T0inv.relabel("world", "dst"), T.relabel("rig", "world"))
        assert np.linalg.norm(est.translation - truth.translation) < 1e-6
        assert rotation_distance_deg(est.rotation, truth.rotation) < 1e-4


def test_identity_motion_pair(room, trajectory):
    frames, _, _ = _frames(room, [trajectory[0], trajectory[0]])
    p = track_sequence(frames)[1]
    assert np.abs(p.matrix() - np.eye(4)).max() < 1e-9


def test_tracking_lost_reports_frame(room, trajectory):
    frames, _, _ = _frames(room, trajectory[:10])
    from dataclasses import replace

    # two points cannot form a triangle, so frame 7 has nothing to match
    f7 = frames[7]
    broken = frames[:7] + [replace(f7, local_points=f7.local_points[:2], pairs=f7.pairs[:2])] + frames[8:]
    with pytest.raises(TrackingLost) as e:
        track_frames(broken)
    assert e.value.frame == 7


def test_loop_closure_found_and_absent(room, trajectory):
    frames, K, _ = _frames(room, trajectory)
    poses = track_sequence(frames)
    frames = [f.with_pose(p) for f, p in zip(frames, poses)]
    hits = {k: detect_loop_closure(frames[k], frames[:k], K, min_gap=10) for k in range(10, len(frames))}
    found = {k: h for k, h in hits.items() if h is not None}
    assert found, "the 360 degree sweep must revisit an earlier view"
    for k, (idx, pairs) in found.items():
        assert idx <= k - 10 and len(pairs) >= 6
    # open trajectory: the first 15 frames never revisit
    short = frames[:15]
    assert detect_loop_closure(short[-1], short[:-1], K, min_gap=10) is None
    k = next(iter(found))
    assert detect_loop_closure(frames[k], frames[:k], K, min_gap=len(frames) + 1) is None


# --------------------------------------------------------------------------
# Merging


def test_merge_two_close_points():
    m = MarkerMap(np.array([[0, 0, 0], [0.01, 0, 0]], dtype=float), [[(0, 0, 0)], [(1, 0, 3)]])
    out = merge_points(m, 0.02)
    assert len(out) == 1
    assert np.allclose(out.points[0], [0.005, 0, 0])
    assert out.tracks[0] == [(0, 0, 0), (1, 0, 3)]


def test_merge_noop_and_idempotent():
    rng = np.random.default_rng(2)
    P = rng.uniform(0, 1, (200, 3))
    m = MarkerMap.from_points(P)
    once = merge_points(m, 0.02)
    twice = merge_points(once, 0.02)
    assert np.array_equal(once.points, twice.points)
    from scipy.spatial.distance import pdist

    assert pdist(once.points).min() >= 0.02
    far = MarkerMap.from_points(np.arange(30, dtype=float)[:, None] * [0.05, 0, 0])
    assert merge_points(far, 0.02) is far


def test_noiseless_reconstruction_has_one_point_per_seen_marker(room, trajectory):
    frames, K, T_rl = _frames(room, trajectory)
    # markers triangulated in at least one stereo frame
    seen = set()
    for f, T in zip(frames, trajectory):
        W = T.apply(f.local_points)
        d = np.linalg.norm(room.markers[:, None] - W[None], axis=2)
        seen |= set(np.argmin(d, axis=0).tolist())
    dets = [(f.detections_left, f.detections_right) for f in frames]
    _, m = reconstruct(dets, K, K, T_rl)
    assert len(m) == len(seen)
    mean_err, plane_err = evaluate_reconstruction(m, room, trajectory[0].relabel("rig", "world"))
    assert mean_err < 1e-6 and plane_err < 1e-6


# --------------------------------------------------------------------------
# Bundle adjustment


def _random_problem(rng, n_frames=4, n_points=12):
    K = CameraIntrinsics(700.0, 690.0, 320.0, 240.0, 640, 480, (-0.1, 0.02, 1e-3, -1e-3))
    eyes = [(K, Pose.identity("rig", "left")), (K, Pose(np.eye(3), [-0.12, 0, 0], "rig", "right"))]
    X = np.column_stack([rng.uniform(-0.5, 0.5, (n_points, 2)), rng.uniform(2.0, 3.0, n_points)])
    R = np.stack([so3_exp(rng.normal(0, 0.05, 3)) for _ in range(n_frames)])
    t = rng.normal(0, 0.05, (n_frames, 3))
    of, oe, op = [], [], []
    for f in range(n_frames):
        for p in range(n_points):
            for e in range(2):
                of.append(f)
                oe.append(e)
                op.append(p)
    prob = BAProblem(np.array(of), np.array(oe), np.array(op), np.zeros((len(of), 2)), eyes)
    uv = residuals(prob, R, t, X)  # exact projections (obs_uv = 0)
    prob = BAProblem(prob.obs_frame, prob.obs_eye, prob.obs_point, uv, eyes)
    return prob, R, t, X


def test_ba_jacobian_matches_central_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        prob, R, t, X = _random_problem(rng, int(rng.integers(2, 5)), int(rng.integers(4, 10)))
        R = np.stack([so3_exp(rng.normal(0, 0.02, 3)) @ r for r in R])
        X = X + rng.normal(0, 0.02, X.shape)
        pose_col, point_base, n = _variable_layout(prob, len(R), len(X))
        J = jacobian(prob, R, t, X).toarray()
        h = 1e-6
        Jfd = np.zeros_like(J)
        for j in range(n):
            d = np.zeros(n)
            d[j] = h
            rp = residuals(prob, *apply_update(R, t, X, d, pose_col, point_base)).ravel()
            rm = residuals(prob, *apply_update(R, t, X, -d, pose_col, point_base)).ravel()
            Jfd[:, j] = (rp - rm) / (2 * h)
        worst = max(worst, np.linalg.norm(J - Jfd) / np.linalg.norm(Jfd))
    assert worst < 1e-4


def test_ba_fixed_point_at_truth():
    prob, R, t, X = _random_problem(np.random.default_rng(3))
    R2, t2, X2, rep = solve(prob, R, t, X)
    assert huber_cost(residuals(prob, R, t, X), 2.0) == 0.0
    assert np.array_equal(R2, R) and np.array_equal(t2, t) and np.array_equal(X2, X)
    assert rep.iterations == 0


def test_ba_recovers_from_perturbation():
    rng = np.random.default_rng(4)
    prob, R, t, X = _random_problem(rng, 4, 15)
    Rp = R.copy()
    tp = t.copy()
    for k in range(1, len(R)):  # frame 0 is the gauge
        w = rng.normal(size=3)
        Rp[k] = so3_exp(np.radians(1.0) * w / np.linalg.norm(w)) @ R[k]
        v = rng.normal(size=3)
        tp[k] = t[k] + 0.01 * v / np.linalg.norm(v)
    Xp = X + 0.01 * rng.normal(size=X.shape) / np.sqrt(3)
    R2, t2, X2, rep = solve(prob, Rp, tp, Xp, max_iters=100)
    for k in range(len(R)):
        assert rotation_distance_deg(R2[k], R[k]) < 1e-4
        assert np.linalg.norm(t2[k] - t[k]) < 1e-6
    assert np.abs(X2 - X).max() < 1e-6
    h = rep.cost_history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_ba_noise_floor_and_monotone_cost():
    rng = np.random.default_rng(5)
    prob, R, t, X = _random_problem(rng, 6, 40)
    noisy = BAProblem(prob.obs_frame, prob.obs_eye, prob.obs_point,
                      prob.obs_uv + rng.normal(0, 0.2, prob.obs_uv.shape), prob.eyes)
    _, _, _, rep = solve(noisy, R, t, X + rng.normal(0, 0.005, X.shape))
    h = rep.cost_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    # unbiased per-component residual sigma with parameters removed
    n_res = 2 * len(prob.obs_frame)
    n_par = 6 * (len(R) - 1) + 3 * len(X)
    sigma = rep.rms_px * np.sqrt(n_res / (n_res - n_par))
    assert abs(sigma - 0.2) < 0.3 * 0.2


def test_ba_gauge_invariance():
    rng = np.random.default_rng(6)
    prob, R, t, X = _random_problem(rng)
    X = X + rng.normal(0, 0.01, X.shape)
    A = random_rotation(rng)
    a = rng.normal(size=3)
    X2 = X @ A.T + a
    R2 = np.einsum("kij,jl->kil", R, A.T)
    t2 = t - np.einsum("kij,j->ki", R2, a)
    assert np.abs(residuals(prob, R, t, X) - residuals(prob, R2, t2, X2)).max() < 1e-10


# --------------------------------------------------------------------------
# Evaluation


def test_evaluate_truth_is_zero(room):
    from panocalib.planes import fit_planes

    m = MarkerMap.from_points(room.markers, fit_planes(room.markers, 0.02, 10))
    mean_err, plane_err = evaluate_reconstruction(m, room, Pose.identity("src", "dst"))
    assert mean_err < 1e-12 and plane_err < 1e-12


def test_evaluate_noisy_map_mean_error(room):
    rng = np.random.default_rng(8)
    m = MarkerMap.from_points(room.markers + rng.normal(0, 0.01, room.markers.shape))
    mean_err, _ = evaluate_reconstruction(m, room, Pose.identity("src", "dst"))
    # mean norm of an isotropic 3D Gaussian: 2 * sqrt(2 / pi) * sigma = 1.60 cm
    assert abs(mean_err - 0.016) < 0.0015
