"""Reconstruction accuracy against simulator ground truth."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import AlignmentFailure, DegenerateConfiguration, NoConsensus
from ..geometry import Pose, rigid_fit
from ..planes import fit_planes, plane_fit_error
from .mapping import MarkerMap
from .triangles import match_triangles


def align_points(
    src,
    dst,
    init: Pose | None = None,
    gate: float = 0.05,
    max_iters: int = 100,
    min_consensus: float = 0.5,
) -> tuple[Pose, np.ndarray]:
    """Rigidly align ``src`` onto ``dst`` without known correspondences.

    Without ``init`` a coarse alignment comes from triangle matching. It is
    then refined by iterating nearest-neighbour pairing (pairs closer than
    ``gate``) and least-squares rigid fitting. Returns the pose ``dst<-src``
    and the nearest-neighbour distances of all aligned ``src`` points.
    """
    A = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if init is None:
        try:
            init, _ = match_triangles(
                A, B, edge_tol=0.015, inlier_tol=0.04, max_edge=0.5, prescore=40
            )
        except NoConsensus as e:
            raise AlignmentFailure(f"no coarse alignment: {e}") from None
    T = init.relabel("src", "dst")
    tree = cKDTree(B)
    for _ in range(max_iters):
        d, j = tree.query(T.apply(A))
        ok = d < gate
        if ok.sum() < max(3, min_consensus * len(A)):
            raise AlignmentFailure(f"only {ok.sum()} of {len(A)} points have a partner")
        try:
            T_new = rigid_fit(A[ok], B[j[ok]], "src", "dst")
        except DegenerateConfiguration as e:
            raise AlignmentFailure(str(e)) from None
        step = np.abs(T_new.matrix() - T.matrix()).max()
        T = T_new
        if step < 1e-12:
            break
    d, _ = tree.query(T.apply(A))
    if np.mean(d < gate) < min_consensus:
        raise AlignmentFailure("nearest-neighbour consensus below 50%")
    return T, d


def evaluate_reconstruction(marker_map: MarkerMap, truth, init: Pose | None = None) -> tuple[float, float]:
    """(mean distance to the nearest true marker center, mean plane-fit residual), meters."""
    if len(marker_map) < 4:
        raise ValueError("need at least four map points")
    _, d = align_points(marker_map.points, truth.markers, init)
    planes = marker_map.planes
    if not planes:
        planes = fit_planes(marker_map.points, dist_tol=0.03, min_support=10, seed=0)
    return float(np.mean(d)), plane_fit_error(planes, marker_map.points)


__all__ = ["align_points", "evaluate_reconstruction"]
