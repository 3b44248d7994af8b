"""Single-shot camera localization against the marker map.

Detections are triangulated in the image (Delaunay, shape filtered); each
image triangle is tried against every map triangle under all six vertex
orders with a minimal P3P solve, and hypotheses are scored by how many map
points reproject onto a distinct detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import DegenerateInput, LocalizationFailure
from .geometry import CameraIntrinsics, Pose, bearings, project_points, projection_jacobian, skew, so3_exp
from .p3p import ap3p_bearings
from .recon.triangles import triangles_within

PERMS = np.array(list(permutations(range(3))))


@dataclass(frozen=True)
class Triangle2D:
    vertices: tuple[int, int, int]
    edges: tuple[float, float, float]  # opposite each vertex, pixels


@dataclass(frozen=True)
class Triangle3D:
    vertices: tuple[int, int, int]
    edges: tuple[float, float, float]  # sorted ascending, meters


@dataclass(frozen=True)
class LocParams:
    n_rounds: int = 20
    inlier_px: float = 3.0
    min_inliers: int = 8
    early_exit: float = 0.6
    min_inlier_ratio: float = 0.5
    map_tol: float = 0.025  # metric slack (m) for map error, added at each point's depth
    patience: int | None = 5  # stop after this many rounds without improvement
    confirm_rounds: int = 2  # rounds without improvement required before an early exit
    lo_candidates: int = 5  # hypotheses per round refined before ranking
    seed: int = 0
    prefilter: bool = True
    refine: bool = True
    max_refine_iters: int = 10
    gate_schedule: tuple = (3.0, 2.0, 1.5)
    lo_restarts: int = 3  # gate-schedule restarts from the refined pose while inliers grow
    chunk: int = 20000

    def threshold(self, K: CameraIntrinsics) -> float:
        """Inlier radius; grows with the image diagonal beyond 2000 px."""
        return self.inlier_px * max(1.0, K.diagonal / 2000.0)



@dataclass(frozen=True)
class LocalizationResult:
    pose: Pose  # camera <- world
    inliers: list[tuple[int, int]]  # (detection index, map point index)
    rms_px: float
    detections: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 2)))
    ransac_inliers: int = 0
    converged: bool = True

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "inliers": [list(p) for p in self.inliers],
            "inlier_count": self.inlier_count,
            "rms_px": self.rms_px,
            "ransac_inliers": self.ransac_inliers,
            "converged": self.converged,
        }


# --------------------------------------------------------------------------
# Triangles


def _angles_and_ratio(P: np.ndarray, tris: np.ndarray):
    A, B, C = P[tris[:, 0]], P[tris[:, 1]], P[tris[:, 2]]
    a = np.linalg.norm(B - C, axis=1)
    b = np.linalg.norm(A - C, axis=1)
    c = np.linalg.norm(A - B, axis=1)
    e = np.column_stack([a, b, c])
    with np.errstate(invalid="ignore", divide="ignore"):
        cosA = (b * b + c * c - a * a) / (2 * b * c)
        cosB = (a * a + c * c - b * b) / (2 * a * c)
        cosC = (a * a + b * b - c * c) / (2 * a * b)
        ang = np.degrees(np.arccos(np.clip(np.column_stack([cosA, cosB, cosC]), -1, 1)))
        ratio = e.max(1) / e.min(1)
    return e, ang.min(1), ratio


def delaunay_2d(detections, min_angle_deg: float = 20.0, max_ratio: float = 5.0,
                shape_filter: bool = True) -> list[Triangle2D]:
    """Delaunay triangles of the detections, minus slivers.

    Triangles whose smallest angle is ``<= min_angle_deg`` or whose longest to
    shortest edge ratio is ``>= max_ratio`` are removed.
    """
    P = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(P) < 3:
        raise DegenerateInput("need at least three detections")
    s = np.linalg.svd(P - P.mean(0), compute_uv=False)
    if s[1] <= 1e-9 * max(1.0, s[0]):
        raise DegenerateInput("detections are collinear")
    try:
        tri = Delaunay(P)
    except QhullError as e:
        raise DegenerateInput(str(e)) from None
    simp = np.sort(tri.simplices, axis=1)
    simp = simp[np.lexsort((simp[:, 2], simp[:, 1], simp[:, 0]))]
    edges, min_ang, ratio = _angles_and_ratio(P, simp)
    keep = np.ones(len(simp), dtype=bool)
    if shape_filter:
        keep = (min_ang > min_angle_deg) & (ratio < max_ratio)
    return [Triangle2D(tuple(int(v) for v in t), tuple(float(x) for x in e))
            for t, e in zip(simp[keep], edges[keep])]


def enumerate_3d_triangles(points, max_edge: float = 1.0) -> list[Triangle3D]:
    """Every vertex triple of the map whose three edges are ``<= max_edge``."""
    P = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    tris = triangles_within(P, max_edge)
    if len(tris) == 0:
        return []
    e, _, _ = _angles_and_ratio(P, tris)
    e = np.sort(e, axis=1)
    return [Triangle3D(tuple(int(v) for v in t), tuple(float(x) for x in ee)) for t, ee in zip(tris, e)]


# --------------------------------------------------------------------------
# Scoring


def greedy_inliers(pix: np.ndarray, valid: np.ndarray, detections: np.ndarray, tol,
                   det_tree: cKDTree | None = None) -> list[tuple[int, int]]:
    """One-to-one (detection, map point) pairs within ``tol``, nearest first.

    ``tol`` is a scalar or one radius per projected point. Ties in distance
    are broken by detection index, then map index.
    """
    idx = np.flatnonzero(valid)
    if len(idx) == 0 or len(detections) == 0:
        return []
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), (len(pix),))
    tree = det_tree if det_tree is not None else cKDTree(detections)
    lists = tree.query_ball_point(pix[idx], r=tol[idx])
    cand = [(float(np.hypot(*(detections[d] - pix[m]))), d, int(m))
            for m, ds in zip(idx, lists) for d in ds]
    cand = [c for c in cand if c[0] <= tol[c[2]]]
    cand.sort()
    used_d, used_m, out = set(), set(), []
    for _, d, m in cand:
        if d in used_d or m in used_m:
            continue
        used_d.add(d)
        used_m.add(m)
        out.append((d, m))
    out.sort()
    return out


def score_pose(pose: Pose, points: np.ndarray, detections: np.ndarray, K: CameraIntrinsics,
               tol: float, det_tree: cKDTree | None = None, map_tol: float = 0.0) -> list[tuple[int, int]]:
    """Greedy inliers of ``pose``; the radius is ``tol`` px plus ``map_tol`` m at each point's depth."""
    pix, z = project_points(K, points, pose)
    valid = (z > 1e-9) & np.isfinite(pix).all(1)
    radius = tol + 0.5 * (K.fx + K.fy) * map_tol / np.maximum(z, 1e-9) if map_tol > 0 else tol
    return greedy_inliers(pix, valid, detections, radius, det_tree)


def _rms(pose, points, detections, K, inliers) -> float:
    if not inliers:
        return float("nan")
    d = np.array([i for i, _ in inliers])
    m = np.array([j for _, j in inliers])
    pix, _ = project_points(K, points[m], pose)
    return float(np.sqrt(np.mean((pix - detections[d]) ** 2)))


# --------------------------------------------------------------------------
# Pose-only Levenberg-Marquardt


def refine_pose(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics,
                max_iters: int = 30) -> tuple[Pose, bool]:
    """Minimize the squared reprojection error over a fixed 2D-3D pairing."""
    R, t = pose.rotation.copy(), pose.translation.copy()

    def resid(R, t):
        pix, _ = project_points(K, points @ R.T + t)
        return (pix - pixels).reshape(-1)

    r = resid(R, t)
    cost = float(r @ r)
    lam = 1e-3
    converged = cost == 0.0
    for _ in range(max_iters):
        if converged:
            break
        Xc = points @ R.T + t
        Jp = projection_jacobian(K, Xc)
        J = np.concatenate([Jp @ -skew(Xc), Jp], axis=2).reshape(-1, 6)
        H, g = J.T @ J, J.T @ r
        accepted = False
        for _ in range(10):
            dx = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            Q = so3_exp(dx[:3])
            R2, t2 = Q @ R, Q @ t + dx[3:]
            r2 = resid(R2, t2)
            c2 = float(r2 @ r2)
            if c2 <= cost:
                accepted = True
                small = cost - c2 <= 1e-14 * max(cost, 1e-300) or np.abs(dx).max() < 1e-14
                R, t, r, cost = R2, t2, r2, c2
                lam = max(lam / 3, 1e-12)
                converged = small or cost == 0.0
                break
            lam *= 5
        if not accepted:
            converged = True
    return Pose(R, t, pose.from_frame, pose.to_frame), converged


def _lo_pass(pose, inl, P, dets, K, tol, tree, params):
    """One widened-to-nominal gate schedule; returns the best (pose, inliers, converged)."""
    best = (len(inl), pose, inl)
    converged = True
    gates = [g for g in params.gate_schedule if g > 1.0] + [1.0] * params.max_refine_iters
    for g in gates:
        cur = score_pose(pose, P, dets, K, tol * g, tree, params.map_tol * g) if g > 1.0 else inl
        if len(cur) < 3:
            break
        d = np.array([i for i, _ in cur])
        m = np.array([j for _, j in cur])
        new_pose, converged = refine_pose(pose, P[m], dets[d], K)
        new_inl = score_pose(new_pose, P, dets, K, tol, tree, params.map_tol)
        if g == 1.0 and len(new_inl) < len(inl):
            break
        changed = new_inl != inl
        pose, inl = new_pose, new_inl
        if len(inl) >= best[0]:
            best = (len(inl), pose, inl)
        if g == 1.0 and not changed:
            break
    return best[1], best[2], converged


def refine_camera(result: LocalizationResult, points, K: CameraIntrinsics,
                  params: LocParams = LocParams()) -> LocalizationResult:
    """LM refinement alternating with re-association of projections to detections.

    Association starts with a widened gate that shrinks to the nominal one, so a
    hypothesis a few degrees off can still be pulled into the right basin. The
    schedule restarts from the refined pose while that gains inliers, which
    frees poses that slid along the rotation-translation valley of a single
    wall. The result never has fewer inliers than ``result``.
    """
    P = np.asarray(getattr(points, "points", points), dtype=np.float64)
    dets = result.detections
    tol = params.threshold(K)
    tree = cKDTree(dets) if len(dets) else None
    pose, inl = result.pose, list(result.inliers)
    converged = True
    for _ in range(1 + params.lo_restarts):
        new_pose, new_inl, conv = _lo_pass(pose, inl, P, dets, K, tol, tree, params)
        gained = len(new_inl) > len(inl)
        if len(new_inl) >= len(inl):
            pose, inl, converged = new_pose, new_inl, conv
        if not gained:
            break
    return LocalizationResult(pose, inl, _rms(pose, P, dets, K, inl), dets, result.ransac_inliers, converged)


def refine_multi_camera(results: list[LocalizationResult], points, Ks: list[CameraIntrinsics],
                        params: LocParams = LocParams()) -> list[Pose]:
    """Refine every camera's world pose; cameras share only the fixed map."""
    return [refine_camera(r, points, K, params).pose for r, K in zip(results, Ks)]


# --------------------------------------------------------------------------
# Triangle PnP


def _support_points(P: np.ndarray, tri3: np.ndarray, k: int = 4) -> np.ndarray:
    """For each 3D triangle the ``k`` map points nearest its centroid (excluding vertices)."""
    kk = min(len(P), k + 3)
    _, nn = cKDTree(P).query(P[tri3].mean(1), k=kk)
    nn = nn.reshape(len(tri3), kk)
    ok = np.all(nn[:, :, None] != tri3[:, None, :], axis=2)
    # stable partition: valid neighbours first, in distance order
    order = np.argsort(~ok, axis=1, kind="stable")
    nn = np.take_along_axis(nn, order, 1)
    ok = np.take_along_axis(ok, order, 1)
    out = np.full((len(tri3), k), -1)
    m = min(k, kk)
    out[:, :m] = np.where(ok[:, :m], nn[:, :m], -1)
    return out


def _hypotheses(f: np.ndarray, X3: np.ndarray, K: CameraIntrinsics, pix3: np.ndarray):
    """All P3P poses for one image triangle against a batch of (ordered) 3D triangles."""
    B = len(X3)
    R, t, valid = ap3p_bearings(np.broadcast_to(f, (B, 3, 3)), X3)
    R, t = R.reshape(-1, 3, 3), t.reshape(-1, 3)
    src = np.repeat(np.arange(B), 4)
    ok = valid.reshape(-1)
    R, t, src = R[ok], t[ok], src[ok]
    Xc = np.einsum("hij,hnj->hni", R, X3[src]) + t[:, None, :]
    ok = np.all(Xc[..., 2] > 1e-9, axis=1)
    R, t, src, Xc = R[ok], t[ok], src[ok], Xc[ok]
    # reprojection of the three vertices (guards against spurious roots)
    pix, _ = project_points(K, Xc.reshape(-1, 3))
    err = np.abs(pix.reshape(-1, 3, 2) - pix3[None]).max(axis=(1, 2))
    ok = err < 1e-3
    return R[ok], t[ok], src[ok]


def triangle_pnp(
    detections,
    d2: list[Triangle2D],
    d3: list[Triangle3D],
    points,
    K: CameraIntrinsics,
    params: LocParams = LocParams(),
) -> LocalizationResult:
    """Localize one camera from featureless detections and the marker map.

    Image triangles are visited in a seeded random order (up to
    ``params.n_rounds``). Against each, every map triangle is tried under all
    six vertex orders; each P3P pose is scored by greedy one-to-one inliers.
    The search stops early once the inlier ratio reaches ``params.early_exit``.
    With ``params.prefilter`` a pose is scored only if at least two of four map
    points near its triangle reproject onto some detection.
    """
    dets = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    P = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if not d2 or not d3:
        raise LocalizationFailure("no triangles to match")
    tol = params.threshold(K)
    tree = cKDTree(dets)
    tri3 = np.array([t.vertices for t in d3], dtype=int)
    # row 6*i + p: map vertex matched to image vertex v is tri3[i, PERMS[p, v]]
    ordered = tri3[:, PERMS].reshape(-1, 3)
    support = _support_points(P, tri3)[np.repeat(np.arange(len(tri3)), 6)] if params.prefilter else None

    rng = np.random.default_rng(params.seed)
    order = rng.permutation(len(d2))[: params.n_rounds]
    best: LocalizationResult | None = None
    best_raw = 0
    stale = 0
    for r in order:
        improved = False
        tri = d2[int(r)].vertices
        pix3 = dets[list(tri)]
        f = bearings(K, pix3)
        cand = np.arange(len(ordered))
        if params.prefilter:
            cand = cand[_scale_compatible(pix3, P[ordered], K)]
        scored = []  # (-inlier count, hypothesis index, pose, inliers)
        n_lo = max(1, params.lo_candidates) if params.refine else 1
        n_hyp = 0
        for s in range(0, len(cand), params.chunk):
            c = cand[s:s + params.chunk]
            R, t, src = _hypotheses(f, P[ordered[c]], K, pix3)
            if len(R) == 0:
                continue
            hyp_tri = c[src]
            if params.prefilter:
                keep = _support_check(R, t, P, support[hyp_tri], K, tree, tol, params.map_tol)
                R, t, hyp_tri = R[keep], t[keep], hyp_tri[keep]
            # the nearest-detection count bounds the one-to-one count from above,
            # so exact scoring can stop once the bound falls below the kept set
            bound = _inlier_bound(R, t, P, K, tree, tol, params.map_tol)
            for h in np.argsort(-bound, kind="stable"):
                floor = max(3, -scored[n_lo - 1][0]) if len(scored) >= n_lo else 3
                if bound[h] < floor:
                    break
                pose = Pose(R[h], t[h], "world", "camera")
                inl = score_pose(pose, P, dets, K, tol, tree, params.map_tol)
                if len(inl) >= 3:
                    scored.append((-len(inl), n_hyp + int(h), pose, inl))
                    scored.sort(key=lambda e: (e[0], e[1]))
                    del scored[n_lo:]
            n_hyp += len(R)
        scored.sort(key=lambda e: (e[0], e[1]))
        # local optimization of the strongest hypotheses; rank by refined support
        for neg, _, pose, inl in scored[: max(1, params.lo_candidates) if params.refine else 1]:
            best_raw = max(best_raw, -neg)
            res = LocalizationResult(pose, inl, 0.0, dets, -neg)
            if params.refine:
                res = refine_camera(res, P, K, params)
            if best is None or res.inlier_count > best.inlier_count:
                best = res
                improved = True
        n_best = 0 if best is None else best.inlier_count
        if n_best == len(dets):
            break  # every detection explained; nothing can improve
        stale = 0 if improved else stale + 1
        if n_best >= params.early_exit * len(dets) and stale >= params.confirm_rounds:
            break
        # give up early only with an answer that would be accepted
        acceptable = n_best >= max(params.min_inliers, params.min_inlier_ratio * len(dets))
        if params.patience is not None and stale >= params.patience and acceptable:
            break
    n_best = 0 if best is None else best.inlier_count
    if n_best < params.min_inliers:
        raise LocalizationFailure(f"best hypothesis has {n_best} inliers (< {params.min_inliers})")
    result = LocalizationResult(best.pose, best.inliers, _rms(best.pose, P, dets, K, best.inliers),
                                dets, best_raw, best.converged)
    need = params.min_inlier_ratio * len(dets)
    if result.inlier_count < need:
        raise LocalizationFailure(
            f"{result.inlier_count} of {len(dets)} detections are inliers (ratio < {params.min_inlier_ratio})"
        )
    return result


def _inlier_bound(R, t, P, K, tree, tol, map_tol, batch: int = 2048) -> np.ndarray:
    """Per pose, the number of map points whose nearest detection lies within the gate."""
    out = np.zeros(len(R), dtype=int)
    fbar = 0.5 * (K.fx + K.fy)
    for s in range(0, len(R), batch):
        Xc = np.einsum("hij,nj->hni", R[s:s + batch], P) + t[s:s + batch, None, :]
        pix, z = project_points(K, Xc.reshape(-1, 3))
        radius = tol + fbar * map_tol / np.maximum(z, 1e-9)
        ok = (z > 1e-9) & np.isfinite(pix).all(1)
        d = np.full(len(z), np.inf)
        d[ok], _ = tree.query(pix[ok])
        out[s:s + batch] = (d <= radius).reshape(-1, len(P)).sum(1)
    return out


def _scale_compatible(pix3, X3, K, z_min: float = 0.3, slack: float = 2.0) -> np.ndarray:
    """Whether each 3D triangle could appear as large as the image triangle.

    An edge of length ``L`` seen no closer than ``z_min`` spans at most about
    ``f * L / z_min`` pixels; ``slack`` covers off-axis magnification.
    """
    e2 = np.max(np.linalg.norm(pix3[[1, 2, 0]] - pix3, axis=1))
    L = np.max(np.linalg.norm(X3[:, [1, 2, 0]] - X3, axis=2), axis=1)
    return slack * max(K.fx, K.fy) * L / z_min >= e2


def _support_check(R, t, P, support, K, tree, tol, map_tol: float = 0.0, need: int = 2) -> np.ndarray:
    S = support.copy()
    missing = S < 0
    S[missing] = 0
    Xc = np.einsum("hij,hnj->hni", R, P[S]) + t[:, None, :]
    pix, z = project_points(K, Xc.reshape(-1, 3))
    d, _ = tree.query(pix)
    radius = tol + 0.5 * (K.fx + K.fy) * map_tol / np.maximum(z, 1e-9)
    hit = ((d < radius) & (z > 1e-9)).reshape(S.shape) & ~missing
    return hit.sum(1) >= np.minimum(need, (~missing).sum(1))


def localize_camera(detections, marker_map, K: CameraIntrinsics, params: LocParams = LocParams(),
                    triangles_3d: list[Triangle3D] | None = None) -> LocalizationResult:
    """Delaunay on the detections, triangle PnP against the map, then refinement."""
    dets = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(dets) < 3:
        raise LocalizationFailure(f"{len(dets)} detections (< 3)")
    try:
        d2 = delaunay_2d(dets)
    except DegenerateInput as e:
        raise LocalizationFailure(str(e)) from None
    d3 = triangles_3d if triangles_3d is not None else enumerate_3d_triangles(marker_map)
    return triangle_pnp(dets, d2, d3, marker_map, K, params)
