"""Global bundle adjustment of stereo rig poses and marker points.

Each rig pose is parametrized as ``T_rig_world`` with a left perturbation
``exp(w) R, exp(w) t + v``; both eyes project through the fixed stereo
extrinsic. Frame 0 is held fixed. The robust cost is the Huber loss of the
2D reprojection-residual norm, minimized with Levenberg-Marquardt on the
iteratively reweighted normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ..geometry import CameraIntrinsics, Pose, project_points, projection_jacobian, skew, so3_exp
from .mapping import MarkerMap
from .tracking import StereoFrame


@dataclass
class BAProblem:
    """Flat observation arrays.

    ``obs_frame``, ``obs_eye``, ``obs_point`` index into the pose list, the eye
    list and the point array; ``obs_uv`` are the measured pixels.
    """

    obs_frame: np.ndarray
    obs_eye: np.ndarray
    obs_point: np.ndarray
    obs_uv: np.ndarray
    eyes: list[tuple[CameraIntrinsics, Pose]]  # (K, T_eye_rig)
    fixed_frames: tuple[int, ...] = (0,)


def residuals(prob: BAProblem, R: np.ndarray, t: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Reprojection residuals (O, 2) for rig poses ``R, t`` (rig<-world) and points ``X``."""
    Xr = np.einsum("oij,oj->oi", R[prob.obs_frame], X[prob.obs_point]) + t[prob.obs_frame]
    out = np.zeros((len(Xr), 2))
    for e, (K, T) in enumerate(prob.eyes):
        sel = prob.obs_eye == e
        if np.any(sel):
            pix, _ = project_points(K, T.apply(Xr[sel]))
            out[sel] = pix - prob.obs_uv[sel]
    return out


def _variable_layout(prob: BAProblem, n_frames: int, n_points: int):
    free = [k for k in range(n_frames) if k not in prob.fixed_frames]
    pose_col = np.full(n_frames, -1)
    pose_col[free] = 6 * np.arange(len(free))
    return pose_col, 6 * len(free), 6 * len(free) + 3 * n_points


def jacobian(prob: BAProblem, R: np.ndarray, t: np.ndarray, X: np.ndarray) -> sp.csr_matrix:
    """Sparse d(residual)/d(pose perturbations, points), shape (2 O, 6 F_free + 3 P)."""
    n_obs = len(prob.obs_frame)
    pose_col, point_base, n_vars = _variable_layout(prob, len(R), len(X))
    Rk = R[prob.obs_frame]
    Xr = np.einsum("oij,oj->oi", Rk, X[prob.obs_point]) + t[prob.obs_frame]
    Jx = np.zeros((n_obs, 2, 3))  # d pix / d Xr
    for e, (K, T) in enumerate(prob.eyes):
        sel = prob.obs_eye == e
        if np.any(sel):
            Jx[sel] = projection_jacobian(K, T.apply(Xr[sel])) @ T.rotation
    J_pose = np.concatenate([Jx @ -skew(Xr), Jx], axis=2)  # (O, 2, 6)
    J_pt = Jx @ Rk  # (O, 2, 3)

    rows, cols, vals = [], [], []
    r_idx = 2 * np.arange(n_obs)
    has_pose = pose_col[prob.obs_frame] >= 0
    o = np.flatnonzero(has_pose)
    for a in range(2):
        for b in range(6):
            rows.append(r_idx[o] + a)
            cols.append(pose_col[prob.obs_frame[o]] + b)
            vals.append(J_pose[o, a, b])
        for b in range(3):
            rows.append(r_idx + a)
            cols.append(point_base + 3 * prob.obs_point + b)
            vals.append(J_pt[:, a, b])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * n_obs, n_vars)
    )


def huber_cost(r: np.ndarray, delta: float) -> float:
    s = np.linalg.norm(r, axis=1)
    return float(np.sum(np.where(s <= delta, 0.5 * s * s, delta * (s - 0.5 * delta))))


def apply_update(R, t, X, dx, pose_col, point_base):
    R2, t2 = R.copy(), t.copy()
    for k, c in enumerate(pose_col):
        if c < 0:
            continue
        w, v = dx[c:c + 3], dx[c + 3:c + 6]
        Q = so3_exp(w)
        R2[k] = Q @ R[k]
        t2[k] = Q @ t[k] + v
    X2 = X + dx[point_base:].reshape(-1, 3)
    return R2, t2, X2


@dataclass
class LMReport:
    cost_history: list[float]
    iterations: int
    converged: bool
    rms_px: float


def solve(prob: BAProblem, R, t, X, huber_px: float = 2.0, max_iters: int = 50,
          tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray, LMReport]:
    """Levenberg-Marquardt; the cost history contains only accepted iterates."""
    R, t, X = np.array(R, dtype=np.float64), np.array(t, dtype=np.float64), np.array(X, dtype=np.float64)
    pose_col, point_base, n_vars = _variable_layout(prob, len(R), len(X))
    r = residuals(prob, R, t, X)
    cost = huber_cost(r, huber_px)
    history = [cost]
    lam = 1e-4
    converged = cost == 0.0
    it = 0
    while not converged and it < max_iters:
        it += 1
        s = np.linalg.norm(r, axis=1)
        w = np.where(s <= huber_px, 1.0, huber_px / np.maximum(s, 1e-300))
        J = jacobian(prob, R, t, X)
        W = sp.diags(np.repeat(w, 2))
        H = (J.T @ W @ J).tocsc()
        g = J.T @ (np.repeat(w, 2) * r.reshape(-1))
        diag = H.diagonal()
        diag = np.where(diag > 0, diag, 1.0)
        accepted = False
        for _ in range(10):
            A = H + sp.diags(lam * diag)
            dx = spsolve(A.tocsc(), -g)
            if not np.all(np.isfinite(dx)):
                lam *= 10
                continue
            R2, t2, X2 = apply_update(R, t, X, dx, pose_col, point_base)
            r2 = residuals(prob, R2, t2, X2)
            cost2 = huber_cost(r2, huber_px)
            if cost2 <= cost:
                accepted = True
                step = np.abs(dx).max()
                decrease = cost - cost2
                R, t, X, r, cost = R2, t2, X2, r2, cost2
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                if decrease <= tol * max(cost, 1e-300) or step < 1e-13 or cost == 0.0:
                    converged = True
                break
            lam *= 5.0
        if not accepted:
            # no descent direction left: at a (numerical) minimum
            converged = True
    rms = float(np.sqrt(np.mean(r ** 2))) if len(r) else 0.0
    return R, t, X, LMReport(history, it, converged, rms)


def global_ba(
    frames: list[StereoFrame],
    marker_map: MarkerMap,
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    T_right_left: Pose,
    huber_px: float = 2.0,
    max_iters: int = 50,
) -> tuple[list[StereoFrame], MarkerMap, float]:
    """Refine all rig poses and multi-frame points; frame 0 stays fixed.

    Points observed in a single frame are left out of the optimization and
    re-expressed through their frame's refined pose. The LM report is stored in
    ``map.metadata["ba"]``.
    """
    n_frames = len(frames)
    multi = np.array([len(marker_map.frames_of(i)) >= 2 for i in range(len(marker_map))], dtype=bool)
    ba_idx = np.flatnonzero(multi)
    remap = np.full(len(marker_map), -1)
    remap[ba_idx] = np.arange(len(ba_idx))
    of, oe, op, uv = [], [], [], []
    for i in ba_idx:
        for f, e, d in marker_map.tracks[i]:
            det = frames[f].detections_left if e == 0 else frames[f].detections_right
            of.append(f)
            oe.append(e)
            op.append(remap[i])
            uv.append(det[d])
    prob = BAProblem(
        np.asarray(of, dtype=int), np.asarray(oe, dtype=int), np.asarray(op, dtype=int),
        np.asarray(uv, dtype=np.float64).reshape(-1, 2),
        [(K_l, Pose.identity("rig", "left")), (K_r, T_right_left.relabel("rig", "right"))],
    )
    inv = [f.pose_world.inverse() for f in frames]
    R0 = np.stack([p.rotation for p in inv])
    t0 = np.stack([p.translation for p in inv])
    R, t, X, report = solve(prob, R0, t0, marker_map.points[ba_idx], huber_px, max_iters)
    new_frames = [
        f.with_pose(Pose(R[k], t[k], "world", "rig").inverse()) for k, f in enumerate(frames)
    ]
    pts = marker_map.points.copy()
    pts[ba_idx] = X
    for i in np.flatnonzero(~multi):
        f, _, d = next(o for o in marker_map.tracks[i] if o[1] == 0)
        fr = new_frames[f]
        j = int(np.flatnonzero(fr.pairs[:, 0] == d)[0])
        pts[i] = fr.pose_world.apply(fr.local_points[j])
    meta = dict(marker_map.metadata)
    meta["ba"] = {
        "converged": report.converged, "iterations": report.iterations,
        "rms_px": report.rms_px, "initial_cost": report.cost_history[0],
        "final_cost": report.cost_history[-1], "n_frames": n_frames,
    }
    new_map = MarkerMap(pts, marker_map.tracks, marker_map.planes, meta)
    return new_frames, new_map, report.rms_px
