"""Algebraic perspective-three-point solver (AP3P), batched over problems.

The formulation follows the algebraic P3P of Ke and Roumeliotis: the rotation
is factored into two frames built from the data and two unknown rotations
about known axes, which reduces the problem to a single quartic in the cosine
of one angle. Each admissible real root yields one pose.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration, NoSolution
from .geometry import CameraIntrinsics, Pose, bearings, nearest_rotation, project_points


def _quartic_roots(coeffs: np.ndarray) -> np.ndarray:
    """Roots of a4 s^4 + ... + a0 for (B, 5) coefficient rows; non-real -> nan.

    Companion-matrix eigenvalues followed by two Newton polishing steps.
    """
    B = len(coeffs)
    out = np.full((B, 4), np.nan)
    a4 = coeffs[:, 0]
    ok = np.abs(a4) > 1e-300
    if not np.any(ok):
        return out
    c = coeffs[ok] / a4[ok, None]
    comp = np.zeros((len(c), 4, 4))
    comp[:, 0, :] = -c[:, 1:]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    scale = np.maximum(1.0, np.abs(roots))
    real = np.abs(roots.imag) < 1e-3 * scale
    s = np.where(real, roots.real, np.nan)
    for _ in range(2):
        p = (((s + c[:, 1, None]) * s + c[:, 2, None]) * s + c[:, 3, None]) * s + c[:, 4, None]
        dp = ((4 * s + 3 * c[:, 1, None]) * s + 2 * c[:, 2, None]) * s + c[:, 3, None]
        step = np.where(np.abs(dp) > 1e-14, p / np.where(dp == 0, 1.0, dp), 0.0)
        s = s - step
    out[ok] = s
    return out


def ap3p_bearings(f: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve batched P3P problems.

    ``f``: unit bearing vectors, shape (B, 3, 3) (problem, point, xyz).
    ``X``: world points, shape (B, 3, 3).

    Returns ``(R, t, valid)`` with shapes (B, 4, 3, 3), (B, 4, 3), (B, 4) where
    ``x_cam = R @ X + t``. Invalid slots are filled with nan.
    """
    f = np.asarray(f, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    B = f.shape[0]
    b1, b2, b3 = f[:, 0], f[:, 1], f[:, 2]
    w1, w2, w3 = X[:, 0], X[:, 1], X[:, 2]

    def dot(a, b):
        return np.sum(a * b, axis=-1)

    def unit(a):
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return a / np.where(n == 0, 1.0, n), n[..., 0]

    with np.errstate(invalid="ignore", divide="ignore"):
        k1, nu0 = unit(w1 - w2)
        k3, nk3 = unit(np.cross(b1, b2))
        tz = np.cross(b1, k3)
        v1 = np.cross(b1, b3)
        v2 = np.cross(b2, b3)
        u1 = w1 - w3
        u1k1 = dot(u1, k1)
        k3b3 = dot(k3, b3)
        f11 = k3b3
        f13 = dot(k3, v1)
        f15 = -u1k1 * f11
        nl, delta = unit(np.cross(u1, k1))
        f11 = f11 * delta
        f13 = f13 * delta
        u2k1 = u1k1 - nu0
        f21 = dot(tz, v2)
        f22 = nk3 * k3b3
        f23 = dot(k3, v2)
        f24 = u2k1 * f22
        f25 = -u2k1 * f21
        f21 = f21 * delta
        f22 = f22 * delta
        f23 = f23 * delta
        g1 = f13 * f22
        g2 = f13 * f25 - f15 * f23
        g3 = f11 * f23 - f13 * f21
        g4 = -f13 * f24
        g5 = f11 * f22
        g6 = f11 * f25 - f15 * f21
        g7 = -f15 * f24
        coeffs = np.stack(
            [
                g5 * g5 + g1 * g1 + g3 * g3,
                2 * (g5 * g6 + g1 * g2 + g3 * g4),
                g6 * g6 + 2 * g5 * g7 + g2 * g2 + g4 * g4 - g1 * g1 - g3 * g3,
                2 * (g6 * g7 - g1 * g2 - g3 * g4),
                g7 * g7 - g2 * g2 - g4 * g4,
            ],
            axis=1,
        )
        finite = np.all(np.isfinite(coeffs), axis=1)
        coeffs = np.where(finite[:, None], coeffs, 0.0)
        s = _quartic_roots(coeffs)  # cos(theta1') candidates

        # frames: C_k1nl (columns k1, nl, k1 x nl) and C_b1k3tz (rows b1, k3, tz)
        Ck1nl = np.stack([k1, nl, np.cross(k1, nl)], axis=2)
        Cb1k3tzT = np.stack([b1, k3, tz], axis=1)
        b3p = b3 * (delta / k3b3)[:, None]

        c1 = s
        s1 = np.sqrt(np.clip(1.0 - c1 * c1, 0.0, None))
        s1 = np.where((k3b3 > 0)[:, None], s1, -s1)
        ct3 = g1[:, None] * c1 + g2[:, None]
        st3 = g3[:, None] * c1 + g4[:, None]
        n3 = s1 / ((g5[:, None] * c1 + g6[:, None]) * c1 + g7[:, None])
        ct3 = ct3 * n3
        st3 = st3 * n3
        # spurious roots violate cos^2 + sin^2 = 1; normalize the rest so R is exact
        h3 = np.hypot(ct3, st3)
        unit3 = np.abs(h3 - 1.0) < 1e-4
        ct3 = ct3 / h3
        st3 = st3 / h3

        C13 = np.zeros((B, 4, 3, 3))
        C13[..., 0, 0] = ct3
        C13[..., 0, 2] = -st3
        C13[..., 1, 0] = s1 * st3
        C13[..., 1, 1] = c1
        C13[..., 1, 2] = s1 * ct3
        C13[..., 2, 0] = c1 * st3
        C13[..., 2, 1] = -s1
        C13[..., 2, 2] = c1 * ct3
        Rwc = Ck1nl[:, None] @ C13 @ Cb1k3tzT[:, None]  # camera -> world
        R = np.swapaxes(Rwc, -1, -2)
        t = s1[..., None] * b3p[:, None, :] - np.einsum("bkij,bj->bki", R, w3)

    valid = finite[:, None] & np.isfinite(s) & (np.abs(s) <= 1.0 + 1e-6)
    valid &= unit3
    valid &= np.all(np.isfinite(R), axis=(-1, -2)) & np.all(np.isfinite(t), axis=-1)
    R = np.where(valid[..., None, None], R, np.nan)
    t = np.where(valid[..., None], t, np.nan)
    return R, t, valid


def polish_pose(R: np.ndarray, t: np.ndarray, f: np.ndarray, X: np.ndarray, iters: int = 4):
    """Gauss-Newton on the angular residuals of three (or more) bearings."""
    from .geometry import nearest_rotation, skew, so3_exp

    for _ in range(iters):
        Xc = X @ R.T + t
        z = Xc[:, 2:3]
        if np.any(z <= 0):
            break
        r = (Xc[:, :2] / z - f[:, :2] / f[:, 2:3]).reshape(-1)
        dn = np.zeros((len(X), 2, 3))
        dn[:, 0, 0] = dn[:, 1, 1] = 1.0 / z[:, 0]
        dn[:, 0, 2] = -Xc[:, 0] / z[:, 0] ** 2
        dn[:, 1, 2] = -Xc[:, 1] / z[:, 0] ** 2
        # left perturbation: Xc' = exp(w) Xc + dt
        J = np.concatenate([dn @ -skew(Xc), dn], axis=2).reshape(-1, 6)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        Rd = so3_exp(delta[:3])
        R = nearest_rotation(Rd @ R)
        t = Rd @ t + delta[3:]
        if np.abs(delta).max() < 1e-15:
            break
    return R, t


def _check_inputs(pix: np.ndarray, pts: np.ndarray) -> None:
    if pix.shape != (3, 2) or pts.shape != (3, 3):
        raise ValueError("ap3p needs exactly three pixels and three 3D points")
    if min(np.linalg.norm(pix[i] - pix[j]) for i, j in ((0, 1), (0, 2), (1, 2))) < 1e-9:
        raise DegenerateConfiguration("pixels are not distinct")
    area = np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
    scale = max(np.linalg.norm(pts[1] - pts[0]), np.linalg.norm(pts[2] - pts[0]), 1e-300)
    if area <= 1e-9 * scale:
        raise DegenerateConfiguration("3D points are collinear")


def ap3p(pix, pts, K: CameraIntrinsics, tol_px: float = 1e-6, world_frame: str = "world",
         camera_frame: str = "camera") -> list[Pose]:
    """All poses ``T_camera_world`` (at most four) that reproject ``pts`` onto ``pix``.

    Returned poses reproject all three points within ``tol_px`` and place them
    in front of the camera.
    """
    pix = np.asarray(pix, dtype=np.float64).reshape(3, 2)
    pts = np.asarray(pts, dtype=np.float64).reshape(3, 3)
    _check_inputs(pix, pts)
    f = bearings(K, pix)
    R, t, valid = ap3p_bearings(f[None], pts[None])
    poses = []
    for k in np.flatnonzero(valid[0]):
        Rk, tk = R[0, k], t[0, k]
        if abs(np.linalg.det(Rk) - 1.0) > 1e-3:
            continue
        Rk, tk = polish_pose(nearest_rotation(Rk), tk, f, pts)
        Xc = pts @ Rk.T + tk
        if np.any(Xc[:, 2] <= 1e-9):
            continue
        pose = Pose(Rk, tk, world_frame, camera_frame)
        reproj, _ = project_points(K, pts, pose)
        if np.abs(reproj - pix).max() > tol_px:
            continue
        if any(np.allclose(pose.matrix(), q.matrix(), atol=1e-9) for q in poses):
            continue
        poses.append(pose)
    if not poses:
        raise NoSolution("no admissible P3P solution")
    return poses
