"""Sequential RANSAC plane extraction."""

from __future__ import annotations

import numpy as np

from .errors import NoPlanes
from .geometry import Plane, fit_plane_lsq


def fit_planes(
    points,
    dist_tol: float = 0.05,
    min_support: int = 50,
    seed: int = 0,
    iterations: int = 256,
    max_planes: int = 12,
    orient_toward=None,
) -> list[Plane]:
    """Extract planes one at a time, largest consensus first.

    Each round draws ``iterations`` random triples, keeps the plane with the
    most points within ``dist_tol``, refines it by least squares on those
    points, and removes them. Stops once the best support falls below
    ``min_support``. ``Plane.support`` holds indices into ``points``. If
    ``orient_toward`` is given every normal is flipped to face that point.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(P) < max(3, min_support):
        raise NoPlanes(f"{len(P)} points is below min_support={min_support}")
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(P))
    planes: list[Plane] = []
    batch = 64
    while len(remaining) >= max(3, min_support) and len(planes) < max_planes:
        Q = P[remaining]
        best_n, best_d, best_count = None, 0.0, -1
        for s in range(0, iterations, batch):
            m = min(batch, iterations - s)
            tri = np.stack([rng.choice(len(Q), 3, replace=False) for _ in range(m)])
            a, b, c = Q[tri[:, 0]], Q[tri[:, 1]], Q[tri[:, 2]]
            n = np.cross(b - a, c - a)
            norm = np.linalg.norm(n, axis=1)
            ok = norm > 1e-12
            if not np.any(ok):
                continue
            n = n[ok] / norm[ok, None]
            d = np.sum(n * a[ok], axis=1)
            counts = np.sum(np.abs(Q @ n.T - d) < dist_tol, axis=0)
            i = int(np.argmax(counts))
            if counts[i] > best_count:
                best_n, best_d, best_count = n[i], d[i], int(counts[i])
        if best_count < min_support:
            break
        inl = np.abs(Q @ best_n - best_d) < dist_tol
        for _ in range(2):
            n, d = fit_plane_lsq(Q[inl])
            new = np.abs(Q @ n - d) < dist_tol
            if new.sum() < 3:
                break
            inl = new
        n, d = fit_plane_lsq(Q[inl])
        # final fit on the tight core so points of adjacent planes near the
        # intersection do not tilt the estimate
        r = np.abs(Q @ n - d)
        sigma = 1.4826 * np.median(r[inl])
        core = inl & (r <= max(3.0 * sigma, 1e-6))
        if core.sum() >= 3:
            n, d = fit_plane_lsq(Q[core])
        plane = Plane(n, d, remaining[inl])
        if orient_toward is not None:
            plane = plane.oriented_toward(orient_toward)
        planes.append(plane)
        remaining = remaining[~inl]
    if not planes:
        raise NoPlanes("no plane reached the minimum support")
    return planes


def plane_fit_error(planes: list[Plane], points) -> float:
    """Mean absolute distance of each plane's support points to that plane."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = [np.abs(pl.distance(P[pl.support])) for pl in planes if len(pl.support)]
    if not res:
        return float("nan")
    return float(np.mean(np.concatenate(res)))
