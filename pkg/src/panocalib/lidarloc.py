"""Single-shot LiDAR localization against the marker map.

Planes are extracted from the scan, room corners are formed from plane
triples, and a corner correspondence (chosen with a coarse orientation prior)
gives a closed-form pose, which point-to-plane ICP against a densified copy of
the map planes then refines.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .errors import IcpDiverged, ImproperRotation, LocalizationFailure, NearParallelPlanes, NoPlanes
from .geometry import Plane, Pose, from_euler_xyz, nearest_rotation, rotation_distance_deg, so3_exp
from .planes import fit_planes as _fit_planes


@dataclass(frozen=True)
class LidarScan:
    points: np.ndarray  # (N, 3) in the LiDAR frame
    sensor: str = "lidar"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0 or not np.all(np.isfinite(pts)):
            raise ValueError("scan must be non-empty and finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Corner:
    """Corner point ``c`` and direction triad ``S = [s0 s1 s2]`` (columns)."""

    c: np.ndarray
    S: np.ndarray
    planes: tuple[int, int, int] = (0, 1, 2)

    def transformed(self, T: Pose) -> "Corner":
        return Corner(T.apply(self.c), T.rotation @ self.S, self.planes)


def fit_planes(scan, dist_tol: float = 0.06, min_support: int = 200, seed: int = 0, **kw) -> list[Plane]:
    """RANSAC planes of a scan, normals facing the sensor origin."""
    pts = scan.points if isinstance(scan, LidarScan) else np.asarray(scan, dtype=np.float64)
    kw.setdefault("orient_toward", np.zeros(3))
    return _fit_planes(pts, dist_tol, min_support, seed, **kw)


def extract_corner(planes, interior=None, max_cond: float = 1e3) -> Corner:
    """Intersection point and edge directions of three planes.

    ``s_i`` runs along the intersection of the two planes other than plane
    ``i`` and points into the room (to the side of plane ``i`` containing
    ``interior``; defaults to each normal's positive side). The triad is
    orthogonalized to the nearest rotation, swapping ``s1`` and ``s2`` when
    needed to make it right-handed.
    """
    planes = list(planes)
    if len(planes) != 3:
        raise ValueError("need exactly three planes")
    if interior is not None:
        planes = [p.oriented_toward(interior) for p in planes]
    N = np.stack([p.normal for p in planes])
    d = np.array([p.offset for p in planes])
    if np.linalg.cond(N) > max_cond:
        raise NearParallelPlanes("plane normals are nearly dependent")
    c = np.linalg.solve(N, d)
    s = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        v = np.cross(N[j], N[k])
        v /= np.linalg.norm(v)
        s.append(v if v @ N[i] > 0 else -v)
    S = np.column_stack(s)
    order = (0, 1, 2)
    if np.linalg.det(S) < 0:
        S = S[:, [0, 2, 1]]
        order = (0, 2, 1)
    return Corner(c, nearest_rotation(S), order)


def solve_pose_from_corner(corner_W: Corner, corner_L: Corner) -> Pose:
    """``T_world_lidar`` with ``S_W = R S_L`` and ``c_W = R c_L + t``."""
    M = corner_W.S @ corner_L.S.T
    if np.linalg.det(M) < 0:
        raise ImproperRotation("direction triads have opposite handedness")
    R = nearest_rotation(M)
    return Pose(R, corner_W.c - R @ corner_L.c, "lidar", "world")


def room_corners(planes: list[Plane], interior, min_angle_deg: float = 20.0) -> list[Corner]:
    """Corners of every plane triple whose normals are pairwise > ``min_angle_deg`` apart."""
    out = []
    cos_max = np.cos(np.radians(min_angle_deg))
    for idx in combinations(range(len(planes)), 3):
        tri = [planes[i] for i in idx]
        if any(abs(a.normal @ b.normal) > cos_max for a, b in combinations(tri, 2)):
            continue
        try:
            cn = extract_corner(tri, interior)
        except NearParallelPlanes:
            continue
        out.append(Corner(cn.c, cn.S, tuple(idx[o] for o in cn.planes)))
    return out


CYCLIC = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def coarse_pose(scan_corners: list[Corner], map_corners: list[Corner], prior_R: np.ndarray) -> tuple[Pose, float]:
    """The corner pairing and cyclic direction assignment closest to the prior.

    Returns the pose and its rotation distance (degrees) to ``prior_R``.
    """
    best = (np.inf, None)
    for cw in map_corners:
        for cl in scan_corners:
            for perm in CYCLIC:
                cl_p = Corner(cl.c, cl.S[:, list(perm)])
                T = solve_pose_from_corner(cw, cl_p)
                dist = rotation_distance_deg(T.rotation, prior_R)
                if dist < best[0] - 1e-12:
                    best = (dist, T)
    if best[1] is None:
        raise LocalizationFailure("no corner in the scan or in the map")
    return best[1], best[0]


# --------------------------------------------------------------------------
# Dense reference and ICP


@dataclass(frozen=True)
class DenseReference:
    points: np.ndarray
    normals: np.ndarray
    plane_index: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def plane_basis(normal: np.ndarray, support_points: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane axes; aligned with the support's principal axes if given."""
    n = np.asarray(normal, dtype=np.float64)
    if support_points is not None and len(support_points) >= 2:
        Q = support_points - support_points.mean(0)
        Q = Q - np.outer(Q @ n, n)
        _, _, Vt = np.linalg.svd(Q, full_matrices=False)
        u = Vt[0] - (Vt[0] @ n) * n
    else:
        u = np.cross(n, np.eye(3)[int(np.argmin(np.abs(n)))])
    u /= np.linalg.norm(u)
    if u[int(np.argmax(np.abs(u)))] < 0:
        u = -u
    v = np.cross(n, u)
    return u, v


def densify_reference(marker_map, spacing: float = 0.01, pad: float = 0.10) -> DenseReference:
    """Grid-sample each map plane over the bounding rectangle of all map points
    projected onto it, in the plane's principal in-plane axes, padded by ``pad``.

    Using every map point (not just the plane's support) lets each grid reach
    the neighbouring planes, so scan points near room edges find their own plane.
    """
    planes = marker_map.planes
    if not planes:
        raise NoPlanes("map has no planes")
    P = marker_map.points
    pts, nrm, idx = [], [], []
    for k, pl in enumerate(planes):
        sup = P[pl.support] if len(pl.support) else np.zeros((0, 3))
        if len(sup) == 0:
            continue
        u, v = plane_basis(pl.normal, sup)
        a, b = P @ u, P @ v
        ga = np.arange(a.min() - pad, a.max() + pad + 0.5 * spacing, spacing)
        gb = np.arange(b.min() - pad, b.max() + pad + 0.5 * spacing, spacing)
        A, B = np.meshgrid(ga, gb, indexing="ij")
        grid = pl.offset * pl.normal + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
        # remove the residual offset so every sample satisfies n.p = d to rounding
        grid += np.outer(pl.offset - grid @ pl.normal, pl.normal)
        pts.append(grid)
        nrm.append(np.broadcast_to(pl.normal, grid.shape))
        idx.append(np.full(len(grid), k))
    return DenseReference(np.concatenate(pts), np.concatenate(nrm).copy(), np.concatenate(idx))


@dataclass(frozen=True)
class IcpParams:
    max_corr: float = 0.10
    max_iters: int = 50
    tol: float = 1e-6
    voxel: float | None = 0.02
    max_points: int = 50000


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """First point (in input order) of every occupied voxel."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


@dataclass
class IcpReport:
    rms_history: list[float]
    iterations: int
    converged: bool


def _plane_trees(ref: DenseReference):
    out = []
    for k in np.unique(ref.plane_index):
        idx = np.flatnonzero(ref.plane_index == k)
        out.append((idx, cKDTree(ref.points[idx])))
    return out


def _associate(trees, ref: DenseReference, q: np.ndarray, params: IcpParams):
    """Per scan point, the dense sample of the plane with the smallest point-to-plane
    distance among planes that have a sample within ``max_corr``."""
    best_r = np.full(len(q), np.inf)
    sel = np.zeros(len(q), dtype=int)
    for idx, tree in trees:
        d, j = tree.query(q, distance_upper_bound=params.max_corr)
        found = np.isfinite(d)
        jj = idx[np.where(found, j, 0)]
        r = np.abs(np.einsum("ij,ij->i", ref.normals[jj], q - ref.points[jj]))
        better = found & (r < best_r)
        best_r[better] = r[better]
        sel[better] = jj[better]
    return np.isfinite(best_r), sel


def icp_refine(scan, ref: DenseReference, init: Pose, params: IcpParams = IcpParams(),
               report: IcpReport | None = None) -> tuple[Pose, float]:
    """Point-to-plane ICP of the scan onto the dense reference.

    Returns the refined ``T_world_lidar`` and the final point-to-plane RMS
    (meters). The returned pose is the lowest-RMS iterate.
    """
    pts = scan.points if isinstance(scan, LidarScan) else np.asarray(scan, dtype=np.float64)
    if params.voxel and len(pts) > params.max_points:
        pts = voxel_downsample(pts, params.voxel)
    tree = _plane_trees(ref)
    R, t = init.rotation.copy(), init.translation.copy()
    history: list[float] = []
    best = (np.inf, R, t)
    rises = 0
    converged = False
    it = 0
    for it in range(1, params.max_iters + 1):
        q = pts @ R.T + t
        ok, sel = _associate(tree, ref, q, params)
        if ok.sum() < 6:
            raise IcpDiverged("too few correspondences within max_corr")
        n = ref.normals[sel[ok]]
        qi = q[ok]
        r = np.einsum("ij,ij->i", n, qi - ref.points[sel[ok]])
        rms = float(np.sqrt(np.mean(r * r)))
        if rms <= best[0] * (1 + 1e-9) + 1e-12:
            if rms < best[0]:
                best = (rms, R.copy(), t.copy())
            history.append(rms)
            rises = 0
        else:
            rises += 1
            if rises >= 3:
                raise IcpDiverged("point-to-plane RMS increased three times in a row")
        J = np.concatenate([np.cross(qi, n), n], axis=1)
        H = J.T @ J
        g = J.T @ r
        try:
            dx = np.linalg.solve(H + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            raise IcpDiverged("degenerate point-to-plane system") from None
        Q = so3_exp(dx[:3])
        R, t = Q @ R, Q @ t + dx[3:]
        if np.abs(dx).max() < params.tol:
            converged = True
            break
    # evaluate the final iterate too
    q = pts @ R.T + t
    ok, sel = _associate(tree, ref, q, params)
    if ok.sum() >= 6:
        r = np.einsum("ij,ij->i", ref.normals[sel[ok]], q[ok] - ref.points[sel[ok]])
        rms = float(np.sqrt(np.mean(r * r)))
        if rms <= best[0]:
            best = (rms, R, t)
            history.append(rms)
    if report is not None:
        report.rms_history[:] = history
        report.iterations = it
        report.converged = converged
    return Pose(best[1], best[2], init.from_frame, init.to_frame), best[0]


# --------------------------------------------------------------------------
# Full localization


@dataclass(frozen=True)
class LidarLocParams:
    plane_tol: float = 0.06
    min_support: int = 200
    seed: int = 0
    spacing: float = 0.01
    pad: float = 0.10
    icp: IcpParams = IcpParams()


@dataclass(frozen=True)
class LidarLocalizationResult:
    pose: Pose  # world <- lidar
    coarse_pose: Pose
    rms_m: float
    prior_distance_deg: float
    n_planes: int

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "coarse_pose": self.coarse_pose.to_dict(),
            "rms_m": self.rms_m,
            "prior_distance_deg": self.prior_distance_deg,
            "n_planes": self.n_planes,
        }


def prior_rotation(prior_deg) -> np.ndarray:
    return from_euler_xyz(*prior_deg)


def localize_lidar(
    scan: LidarScan,
    marker_map,
    prior_deg,
    params: LidarLocParams = LidarLocParams(),
    reference: DenseReference | None = None,
) -> LidarLocalizationResult:
    """Corner-based coarse pose followed by point-to-plane ICP."""
    name = scan.sensor
    try:
        scan_planes = fit_planes(scan, params.plane_tol, params.min_support, params.seed)
    except NoPlanes as e:
        raise LocalizationFailure(str(e), name) from None
    if not marker_map.planes:
        raise LocalizationFailure("map has no planes", name)
    centroid = marker_map.points.mean(0)
    sc = room_corners(scan_planes, np.zeros(3))
    mc = room_corners(list(marker_map.planes), centroid)
    if not sc:
        raise LocalizationFailure(f"no corner among {len(scan_planes)} scan planes", name)
    if not mc:
        raise LocalizationFailure("no corner among the map planes", name)
    T0, dist = coarse_pose(sc, mc, prior_rotation(prior_deg))
    ref = reference if reference is not None else densify_reference(marker_map, params.spacing, params.pad)
    try:
        T, rms = icp_refine(scan, ref, T0.relabel(name, "world"), params.icp)
    except IcpDiverged as e:
        raise LocalizationFailure(f"ICP failed: {e}", name) from None
    return LidarLocalizationResult(T, T0.relabel(name, "world"), rms, dist, len(scan_planes))
