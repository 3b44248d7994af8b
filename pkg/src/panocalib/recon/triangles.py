"""Triangle enumeration and triangle-based 3D-3D point-set matching."""

from __future__ import annotations

from itertools import permutations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DegenerateConfiguration, NoConsensus
from ..geometry import Pose, rigid_fit, rigid_fit_batch

PERMS = np.array(list(permutations(range(3))))


def triangles_within(points: np.ndarray, max_edge: float) -> np.ndarray:
    """All index triples ``i < j < k`` whose three edges are ``<= max_edge``."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    if n < 3:
        return np.zeros((0, 3), dtype=int)
    pairs = cKDTree(P).query_pairs(max_edge, output_type="ndarray")
    nbr: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs:
        nbr[min(i, j)].append(max(i, j))
    adj = [set(x) for x in nbr]
    out = []
    for i in range(n):
        nb = sorted(nbr[i])
        for a in range(len(nb)):
            j = nb[a]
            aj = adj[j]
            for k in nb[a + 1:]:
                if k in aj:
                    out.append((i, j, k))
    return np.asarray(out, dtype=int).reshape(-1, 3)


def opposite_edges(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Edge lengths opposite each vertex, shape (T, 3)."""
    A, B, C = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    return np.column_stack(
        [np.linalg.norm(B - C, axis=1), np.linalg.norm(A - C, axis=1), np.linalg.norm(A - B, axis=1)]
    )


def consensus(R: np.ndarray, t: np.ndarray, src: np.ndarray, dst: np.ndarray, tol: float):
    """Mutual-nearest-neighbour inliers of ``R @ src + t`` against ``dst``.

    ``R`` (C, 3, 3) and ``t`` (C, 3) are hypotheses. Returns ``(counts (C,),
    partner (C, n))`` where ``partner[c, i]`` is the matched dst index or -1.
    """
    moved = np.einsum("cij,nj->cni", R, src) + t[:, None, :]
    d = np.linalg.norm(moved[:, :, None, :] - dst[None, None, :, :], axis=-1)
    nn_of_src = np.argmin(d, axis=2)
    nn_of_dst = np.argmin(d, axis=1)
    n = len(src)
    back = np.take_along_axis(nn_of_dst, nn_of_src, axis=1)
    dmin = np.take_along_axis(d, nn_of_src[:, :, None], axis=2)[:, :, 0]
    ok = (back == np.arange(n)[None, :]) & (dmin < tol)
    partner = np.where(ok, nn_of_src, -1)
    return ok.sum(1), partner


def _candidate_pairs(edges_a, edges_b, edge_tol):
    """(a, b, perm) such that vertex ``v`` of a maps to vertex ``perm[v]`` of b."""
    if len(edges_a) == 0 or len(edges_b) == 0:
        return np.zeros((0, 3), dtype=int)
    sig_a = np.sort(edges_a, axis=1)
    sig_b = np.sort(edges_b, axis=1)
    tree = cKDTree(sig_b)
    hits = tree.query_ball_point(sig_a, r=edge_tol, p=np.inf)
    ia = np.repeat(np.arange(len(sig_a)), [len(h) for h in hits])
    if len(ia) == 0:
        return np.zeros((0, 3), dtype=int)
    ib = np.concatenate([np.asarray(sorted(h), dtype=int) for h in hits if h])
    out = []
    for p_idx, perm in enumerate(PERMS):
        ok = np.all(np.abs(edges_a[ia] - edges_b[ib][:, perm]) < edge_tol, axis=1)
        out.append(np.column_stack([ia[ok], ib[ok], np.full(ok.sum(), p_idx)]))
    cand = np.concatenate(out)
    order = np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0]))
    return cand[order]


def _hypotheses(A, B, ta, tb, c):
    src = A[ta[c[:, 0]]]
    dst = np.take_along_axis(B[tb[c[:, 1]]], PERMS[c[:, 2]][:, :, None], axis=1)
    return rigid_fit_batch(src, dst)


def _prescreen(A, B, ta, tb, cand, tol, n_sample, keep=64):
    idx = np.linspace(0, len(A) - 1, min(n_sample, len(A))).astype(int)
    tree = cKDTree(B)
    scores = np.zeros(len(cand), dtype=int)
    for s in range(0, len(cand), 8192):
        c = cand[s:s + 8192]
        R, t = _hypotheses(A, B, ta, tb, c)
        moved = np.einsum("cij,nj->cni", R, A[idx]) + t[:, None, :]
        d, _ = tree.query(moved.reshape(-1, 3))
        scores[s:s + len(c)] = (d.reshape(len(c), -1) < tol).sum(1)
    top = np.sort(np.argsort(-scores, kind="stable")[:keep])
    return cand[top]


def match_triangles(
    pts_k,
    pts_k1,
    edge_tol: float = 0.01,
    inlier_tol: float = 0.03,
    max_edge: float = 1.5,
    refine: bool = True,
    chunk: int = 4096,
    prescore: int | None = None,
) -> tuple[Pose, list[tuple[int, int]]]:
    """Register two point sets without correspondences via triangle signatures.

    Every triangle of ``pts_k`` (edges up to ``max_edge``) is paired with the
    triangles of ``pts_k1`` whose edge lengths agree within ``edge_tol``; each
    pairing gives a rigid transform, scored by mutual-nearest-neighbour inliers
    within ``inlier_tol``. Returns the transform mapping ``pts_k`` into the
    frame of ``pts_k1`` and the inlier pairs ``(idx_k, idx_k1)``. With
    ``refine`` the transform is re-fitted on its inliers when that does not
    lose any. For large sets ``prescore`` ranks hypotheses by how many of that
    many sampled points land near any target point and fully scores only the
    best 64; the default scores every hypothesis.
    """
    A = np.asarray(pts_k, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(pts_k1, dtype=np.float64).reshape(-1, 3)
    if len(A) < 3 or len(B) < 3:
        raise NoConsensus("need at least three points in each set")
    ta = triangles_within(A, max_edge)
    tb = triangles_within(B, max_edge)
    cand = _candidate_pairs(opposite_edges(A, ta), opposite_edges(B, tb), edge_tol)
    if prescore is not None and len(cand) > 64:
        cand = _prescreen(A, B, ta, tb, cand, inlier_tol, prescore)
    best = (-1, None, None, None)
    # bound the (chunk, |A|, |B|) distance tensor to ~2e7 entries
    chunk = max(1, min(chunk, int(2e7 // (len(A) * len(B)))))
    for s in range(0, len(cand), chunk):
        c = cand[s:s + chunk]
        R, t = _hypotheses(A, B, ta, tb, c)
        counts, partner = consensus(R, t, A, B, inlier_tol)
        i = int(np.argmax(counts))
        if counts[i] > best[0]:
            best = (int(counts[i]), R[i], t[i], partner[i])
    count, R, t, partner = best
    if count < 3:
        raise NoConsensus(f"best triangle hypothesis has {max(count, 0)} inliers")
    if refine:
        idx = np.flatnonzero(partner >= 0)
        try:
            T = rigid_fit(A[idx], B[partner[idx]])
            c2, p2 = consensus(T.rotation[None], T.translation[None], A, B, inlier_tol)
            if c2[0] >= count:
                R, t, partner = T.rotation, T.translation, p2[0]
        except DegenerateConfiguration:
            pass
    pairs = [(int(i), int(partner[i])) for i in np.flatnonzero(partner >= 0)]
    return Pose(R, t, "k", "k1"), pairs
