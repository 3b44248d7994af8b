"""Rigid-body algebra, the pinhole + radial-tangential camera, and small solvers.

Conventions
-----------
A :class:`Pose` named ``T_a_b`` has ``from_frame == "b"`` and ``to_frame == "a"``
and maps a point expressed in frame ``b`` into frame ``a``::

    p_a = T_a_b.rotation @ p_b + T_a_b.translation

Cameras look down +z with x to the right and y down. All quantities are
float64; lengths are meters, image coordinates are pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    DivergentRays,
    EpipolarViolation,
    FrameMismatch,
    GimbalLockWarning,
    SingularInput,
)

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str = "src"
    to_frame: str = "dst"

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"rotation is not a proper rotation (orthogonality error {err:.2e})")
        if err > ORTHO_TOL:
            R = _frozen(nearest_rotation(R), (3, 3))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, from_frame: str = "src", to_frame: str = "dst") -> "Pose":
        return cls(np.eye(3), np.zeros(3), from_frame, to_frame)

    @classmethod
    def from_matrix(cls, T, from_frame: str = "src", to_frame: str = "dst") -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3], from_frame, to_frame)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Map points of shape (3,) or (N, 3) from ``from_frame`` to ``to_frame``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.to_frame, self.from_frame)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def relabel(self, from_frame: str | None = None, to_frame: str | None = None) -> "Pose":
        return Pose(
            self.rotation,
            self.translation,
            self.from_frame if from_frame is None else from_frame,
            self.to_frame if to_frame is None else to_frame,
        )

    def to_dict(self) -> dict:
        return {
            "from": self.from_frame,
            "to": self.to_frame,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["rotation"], d["translation"], d.get("from", "src"), d.get("to", "dst"))


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a ∘ b``, mapping ``b.from_frame`` to ``a.to_frame``."""
    if a.from_frame != b.to_frame:
        raise FrameMismatch(
            f"cannot compose {a.to_frame}<-{a.from_frame} with {b.to_frame}<-{b.from_frame}"
        )
    R = a.rotation @ b.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
        R = nearest_rotation(R)
    return Pose(R, a.rotation @ b.translation + a.translation, b.from_frame, a.to_frame)


def invert(T: Pose) -> Pose:
    return T.inverse()


# --------------------------------------------------------------------------
# SO(3) helpers


def skew(v) -> np.ndarray:
    """Cross-product matrix; accepts (3,) or (N, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, vectorized over leading dimensions."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if s < 1e-12:
        if c > 0:
            return v
        # rotation by pi: axis from the symmetric part
        M = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(M), 0, None))
        i = int(np.argmax(axis))
        axis = M[:, i] / math.sqrt(M[i, i])
        return math.pi * axis / np.linalg.norm(axis)
    return theta * v / s


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation in radians, stable near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * math.sqrt(
        (R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2
    )
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


def rotation_distance_deg(Ra, Rb) -> float:
    return math.degrees(rotation_angle(np.asarray(Ra).T @ np.asarray(Rb)))


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in Frobenius norm (polar factor with det +1)."""
    M = np.asarray(M, dtype=np.float64)
    scale = max(np.abs(M).max(), 1e-300)
    if abs(np.linalg.det(M / scale)) < 1e-12:
        raise SingularInput("matrix is singular")
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def from_euler_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """R = Rx(rx) @ Ry(ry) @ Rz(rz), angles in degrees."""
    return rot_x(rx) @ rot_y(ry) @ rot_z(rz)


def euler_xyz(R) -> tuple[float, float, float]:
    """Inverse of :func:`from_euler_xyz` on the principal branch ``ry in [-90, 90]``.

    At gimbal lock (``|ry|`` within 1e-6 deg of 90) a :class:`GimbalLockWarning`
    is issued and ``rz`` is reported as 0.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = float(np.clip(R[0, 2], -1.0, 1.0))
    cy = math.hypot(R[0, 0], R[0, 1])
    ry = math.atan2(sy, cy)
    if abs(abs(math.degrees(ry)) - 90.0) < 1e-6:
        warnings.warn("euler_xyz at gimbal lock; rz set to 0", GimbalLockWarning, stacklevel=2)
        rz = 0.0
        # with rz = 0: R[1,0] = sin(rx + sign*rz), R[1,1] = cos(...)
        rx = math.atan2(R[2, 1], R[1, 1])
    else:
        rz = math.atan2(-R[0, 1], R[0, 0])
        rx = math.atan2(-R[1, 2], R[2, 2])
    return (math.degrees(rx), math.degrees(ry), math.degrees(rz))


# --------------------------------------------------------------------------
# Camera model


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        dist = tuple(float(d) for d in self.distortion)
        if len(dist) != 4:
            raise ValueError("distortion must be (k1, k2, p1, p2)")
        object.__setattr__(self, "distortion", dist)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.distortion)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def in_image(self, pix) -> np.ndarray:
        pix = np.atleast_2d(pix)
        return (
            (pix[:, 0] >= 0) & (pix[:, 0] < self.width) & (pix[:, 1] >= 0) & (pix[:, 1] < self.height)
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "distortion": list(self.distortion),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), tuple(d.get("distortion", (0, 0, 0, 0))),
        )


def distort(K: CameraIntrinsics, xy) -> np.ndarray:
    """Apply radial-tangential distortion to normalized coordinates (N, 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    k1, k2, p1, p2 = K.distortion
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distortion_jacobian(K: CameraIntrinsics, xy) -> np.ndarray:
    """d(distorted)/d(normalized), shape (N, 2, 2)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    k1, k2, p1, p2 = K.distortion
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dr = k1 + 2 * k2 * r2  # d(radial)/d(r2)
    J = np.empty((len(x), 2, 2))
    J[:, 0, 0] = radial + 2 * x * x * dr + 2 * p1 * y + 6 * p2 * x
    J[:, 0, 1] = 2 * x * y * dr + 2 * p1 * x + 2 * p2 * y
    J[:, 1, 0] = J[:, 0, 1]
    J[:, 1, 1] = radial + 2 * y * y * dr + 6 * p1 * y + 2 * p2 * x
    return J


def undistort_normalized(K: CameraIntrinsics, pix, iterations: int = 10, tol_px: float = 1e-8):
    """Pixels (N, 2) -> undistorted normalized image coordinates (N, 2).

    Fixed-point iteration on the distortion model; a few Newton steps follow if
    the fixed point has not reached ``tol_px`` (strong distortion).
    """
    pix = np.atleast_2d(np.asarray(pix, dtype=np.float64))
    xd = np.stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy], axis=1)
    if not K.has_distortion:
        return xd
    k1, k2, p1, p2 = K.distortion
    xy = xd.copy()
    tol = tol_px / max(K.fx, K.fy)
    for _ in range(iterations):
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        xy = np.stack([(xd[:, 0] - dx) / radial, (xd[:, 1] - dy) / radial], axis=1)
        if np.abs(distort(K, xy) - xd).max() < tol:
            return xy
    for _ in range(5):
        res = distort(K, xy) - xd
        if np.abs(res).max() < tol:
            break
        J = distortion_jacobian(K, xy)
        xy = xy - np.linalg.solve(J, res[:, :, None])[:, :, 0]
    return xy


def project_points(K: CameraIntrinsics, points, T_cam_world: Pose | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (N, 2), depth (N,)); no depth check."""
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    Xc = P if T_cam_world is None else T_cam_world.apply(P)
    z = Xc[:, 2]
    safe = np.where(np.abs(z) < MIN_DEPTH, MIN_DEPTH, z)
    xy = Xc[:, :2] / safe[:, None]
    if K.has_distortion:
        xy = distort(K, xy)
    pix = np.stack([K.fx * xy[:, 0] + K.cx, K.fy * xy[:, 1] + K.cy], axis=1)
    return pix, z


def project(K: CameraIntrinsics, P, T_cam_world: Pose | None = None) -> np.ndarray:
    """Project one world point to a pixel; raises BehindCamera for depth <= 1e-9 m."""
    pix, z = project_points(K, np.asarray(P, dtype=np.float64).reshape(1, 3), T_cam_world)
    if z[0] <= MIN_DEPTH:
        raise BehindCamera(f"point depth {z[0]:.3g} m is not in front of the camera")
    return pix[0]


def projection_jacobian(K: CameraIntrinsics, Xc) -> np.ndarray:
    """d(pixel)/d(camera-frame point), shape (N, 2, 3)."""
    Xc = np.atleast_2d(np.asarray(Xc, dtype=np.float64))
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    dn = np.zeros((len(Z), 2, 3))
    dn[:, 0, 0] = iz
    dn[:, 0, 2] = -X * iz * iz
    dn[:, 1, 1] = iz
    dn[:, 1, 2] = -Y * iz * iz
    if K.has_distortion:
        dn = distortion_jacobian(K, Xc[:, :2] * iz[:, None]) @ dn
    dn[:, 0, :] *= K.fx
    dn[:, 1, :] *= K.fy
    return dn


def backproject(K: CameraIntrinsics, pix, depth) -> np.ndarray:
    """Pixels (N, 2) with z-depths (N,) -> camera-frame points (N, 3)."""
    xy = undistort_normalized(K, pix)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(xy),))
    return np.column_stack([xy * depth[:, None], depth])


def bearings(K: CameraIntrinsics, pix) -> np.ndarray:
    """Unit viewing rays in the camera frame for pixels (N, 2)."""
    xy = undistort_normalized(K, pix)
    rays = np.column_stack([xy, np.ones(len(xy))])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Solvers


def rigid_fit(src, dst, from_frame: str = "src", to_frame: str = "dst") -> Pose:
    """Least-squares rotation + translation with ``dst ≈ R @ src + t`` (SVD, det +1)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise DegenerateConfiguration("rigid_fit needs >= 3 paired points")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    A, B = src - mu_s, dst - mu_d
    for pts in (A, B):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[1] <= 1e-9 * max(1.0, s[0]):
            raise DegenerateConfiguration("points are collinear")
    U, _, Vt = np.linalg.svd(A.T @ B)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, mu_d - R @ mu_s, from_frame, to_frame)


def rigid_fit_batch(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Unchecked batch version of :func:`rigid_fit` for (B, n, 3) inputs."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(1), dst.mean(1)
    H = np.einsum("bni,bnj->bij", src - mu_s[:, None], dst - mu_d[:, None])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.swapaxes(U, 1, 2)
    t = mu_d - np.einsum("bij,bj->bi", R, mu_s)
    return R, t


def epipolar_distance_px(xl, xr, T_right_left: Pose, K_r: CameraIntrinsics) -> np.ndarray:
    """Distance (px) of right normalized points from the epipolar lines of left points.

    ``xl`` and ``xr`` are undistorted normalized coordinates of shape (N, 2) or
    broadcastable pairs.
    """
    E = skew(T_right_left.translation) @ T_right_left.rotation
    hl = np.concatenate([xl, np.ones(xl.shape[:-1] + (1,))], axis=-1)
    hr = np.concatenate([xr, np.ones(xr.shape[:-1] + (1,))], axis=-1)
    lines = hl @ E.T
    num = np.abs(np.sum(lines * hr, axis=-1))
    den = np.hypot(lines[..., 0], lines[..., 1])
    return num / np.maximum(den, 1e-300) * 0.5 * (K_r.fx + K_r.fy)


def triangulate_normalized(xl, xr, T_right_left: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint triangulation of normalized rays, vectorized.

    Returns (points in the left frame (N, 3), depth_left (N,), depth_right (N,)).
    """
    xl = np.atleast_2d(xl)
    xr = np.atleast_2d(xr)
    dl = np.column_stack([xl, np.ones(len(xl))])
    dr_r = np.column_stack([xr, np.ones(len(xr))])
    R, t = T_right_left.rotation, T_right_left.translation
    # right camera center and ray direction in the left frame
    c_r = -R.T @ t
    dr = dr_r @ R
    # minimize |a*dl - (c_r + b*dr)|
    a11 = np.sum(dl * dl, 1)
    a12 = -np.sum(dl * dr, 1)
    a22 = np.sum(dr * dr, 1)
    b1 = dl @ c_r
    b2 = -(dr @ c_r)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    a = (a22 * b1 - a12 * b2) / det
    b = (a11 * b2 - a12 * b1) / det
    P = 0.5 * (a[:, None] * dl + c_r + b[:, None] * dr)
    z_r = (P @ R.T + t)[:, 2]
    return P, P[:, 2], z_r


def ray_angle_deg(xl, xr, T_right_left: Pose) -> np.ndarray:
    dl = np.column_stack([np.atleast_2d(xl), np.ones(len(np.atleast_2d(xl)))])
    dr = np.column_stack([np.atleast_2d(xr), np.ones(len(np.atleast_2d(xr)))]) @ T_right_left.rotation
    cosang = np.sum(dl * dr, 1) / (np.linalg.norm(dl, axis=1) * np.linalg.norm(dr, axis=1))
    return np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))


def triangulate_stereo(
    p_l,
    p_r,
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    T_right_left: Pose,
    epipolar_tol_px: float = 2.0,
    min_ray_angle_deg: float = 0.05,
) -> np.ndarray:
    """Triangulate one stereo correspondence into the left-camera frame."""
    xl = undistort_normalized(K_l, np.reshape(p_l, (1, 2)))
    xr = undistort_normalized(K_r, np.reshape(p_r, (1, 2)))
    if ray_angle_deg(xl, xr, T_right_left)[0] < min_ray_angle_deg:
        raise DivergentRays("rays are nearly parallel")
    err = epipolar_distance_px(xl, xr, T_right_left, K_r)[0]
    if err > epipolar_tol_px:
        raise EpipolarViolation(f"epipolar error {err:.2f} px exceeds {epipolar_tol_px} px")
    P, zl, zr = triangulate_normalized(xl, xr, T_right_left)
    if zl[0] <= MIN_DEPTH or zr[0] <= MIN_DEPTH:
        raise BehindCamera("triangulated point is behind one of the cameras")
    return P[0]


def as_points(pts: Sequence) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite coordinates")
    return arr


@dataclass(frozen=True)
class Plane:
    """Plane ``normal · p = offset`` with the point indices that support it."""

    normal: np.ndarray
    offset: float
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        object.__setattr__(self, "normal", _frozen(n / norm, (3,)))
        object.__setattr__(self, "offset", float(self.offset) / norm)
        sup = np.asarray(self.support, dtype=int).reshape(-1)
        sup.setflags(write=False)
        object.__setattr__(self, "support", sup)

    def distance(self, points) -> np.ndarray:
        """Signed distances of (N, 3) points."""
        return np.atleast_2d(points) @ self.normal - self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset, self.support)

    def oriented_toward(self, point) -> "Plane":
        """Flip so that ``point`` lies on the positive side."""
        return self if float(self.distance(point)[0]) >= 0 else self.flipped()

    def transformed(self, T: Pose) -> "Plane":
        n = T.rotation @ self.normal
        return Plane(n, self.offset + n @ T.translation, self.support)

    def to_dict(self) -> dict:
        return {"normal": self.normal.tolist(), "offset": self.offset, "support": self.support.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(d["normal"], d["offset"], d.get("support", []))


def fit_plane_lsq(points) -> tuple[np.ndarray, float]:
    """Total least-squares plane through (N >= 3, 3) points."""
    P = np.asarray(points, dtype=np.float64)
    c = P.mean(0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    n = Vt[2]
    return n, float(n @ c)
