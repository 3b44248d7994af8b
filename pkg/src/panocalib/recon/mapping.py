"""The marker map, track building and proximity merging."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..geometry import Plane
from .tracking import StereoFrame

# one observation: (frame index, eye 0=left 1=right, detection index)
Observation = tuple[int, int, int]


@dataclass(frozen=True)
class MarkerMap:
    points: np.ndarray
    tracks: list[list[Observation]]
    planes: list[Plane] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if len(self.tracks) != len(pts):
            raise ValueError("one track per point is required")

    def __len__(self) -> int:
        return len(self.points)

    def frames_of(self, i: int) -> set[int]:
        return {f for f, _, _ in self.tracks[i]}

    def with_points(self, points, planes=None) -> "MarkerMap":
        return replace(self, points=np.asarray(points, dtype=np.float64),
                       planes=self.planes if planes is None else planes)

    @classmethod
    def from_points(cls, points, planes=None, metadata=None) -> "MarkerMap":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts, [[] for _ in range(len(pts))], list(planes or []), dict(metadata or {}))


def _clusters(n: int, edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.arange(n)
    g = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    # relabel in order of first appearance for stable output
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[labels]


def build_map(frames: list[StereoFrame], links: dict) -> MarkerMap:
    """Chain per-frame points into map points via frame-to-frame correspondences.

    ``links[(a, b)]`` lists local-point index pairs ``(i in a, j in b)``. Each
    connected component becomes one map point at the mean of its world
    positions.
    """
    offsets = np.cumsum([0] + [len(f.local_points) for f in frames])
    n = int(offsets[-1])
    edges = []
    for (a, b), pairs in links.items():
        for i, j in pairs:
            edges.append((offsets[a] + i, offsets[b] + j))
    labels = _clusters(n, np.asarray(edges, dtype=int).reshape(-1, 2))
    world = np.concatenate([f.world_points() for f in frames]) if n else np.zeros((0, 3))
    m = int(labels.max()) + 1 if n else 0
    sums = np.zeros((m, 3))
    np.add.at(sums, labels, world)
    counts = np.bincount(labels, minlength=m)
    tracks: list[list[Observation]] = [[] for _ in range(m)]
    for k, f in enumerate(frames):
        if f.index != k:
            raise ValueError("frames must be indexed 0..n-1 in order")
        for j, (dl, dr) in enumerate(f.pairs):
            lab = labels[offsets[k] + j]
            tracks[lab].append((f.index, 0, int(dl)))
            tracks[lab].append((f.index, 1, int(dr)))
    return MarkerMap(sums / counts[:, None], [sorted(t) for t in tracks])


def merge_points(marker_map: MarkerMap, radius: float = 0.02) -> MarkerMap:
    """Collapse single-linkage clusters (links shorter than ``radius``) to centroids.

    Repeats until no two points are closer than ``radius``, so the result is a
    fixed point of this function.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts, tracks = marker_map.points, [list(t) for t in marker_map.tracks]
    while len(pts) > 1:
        pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
        if len(pairs) == 0:
            break
        labels = _clusters(len(pts), pairs)
        m = int(labels.max()) + 1
        sums = np.zeros((m, 3))
        np.add.at(sums, labels, pts)
        pts = sums / np.bincount(labels, minlength=m)[:, None]
        merged: list[list[Observation]] = [[] for _ in range(m)]
        for i, lab in enumerate(labels):
            merged[lab].extend(tracks[i])
        tracks = [sorted(set(t)) for t in merged]
    if len(pts) == len(marker_map.points):
        return marker_map
    return MarkerMap(pts, tracks, marker_map.planes, dict(marker_map.metadata))


def extend_tracks(
    frames: list[StereoFrame],
    marker_map: MarkerMap,
    eyes: list,
    px_tol: float = 3.0,
    absorb_radius: float = 0.05,
) -> MarkerMap:
    """Attach unclaimed detections that a map point reprojects onto.

    ``eyes`` is ``[(K, T_eye_rig), ...]`` indexed like the observation eye.
    A detection is attached when it and the point's projection are mutual
    nearest neighbours within ``px_tol``. A point seen in one frame only is
    absorbed into a multi-frame point that reprojects onto its detection, if
    the two are within ``absorb_radius`` of each other.
    """
    from ..geometry import project_points

    pts = marker_map.points
    tracks = [list(t) for t in marker_map.tracks]
    owner = {o: i for i, t in enumerate(tracks) for o in t}
    frames_of = [{o[0] for o in t} for t in tracks]
    absorbed: dict[int, int] = {}
    for fr in frames:
        T_rig_world = fr.pose_world.inverse()
        for e, (K, T_eye_rig) in enumerate(eyes):
            dets = fr.detections_left if e == 0 else fr.detections_right
            if len(dets) == 0:
                continue
            cand = np.array([fr.index not in frames_of[i] for i in range(len(pts))], dtype=bool)
            idx = np.flatnonzero(cand)
            if len(idx) == 0:
                continue
            pix, z = project_points(K, T_eye_rig.relabel("rig", "eye").apply(T_rig_world.apply(pts[idx])))
            vis = (z > 0.3) & K.in_image(pix)
            idx, pix = idx[vis], pix[vis]
            if len(idx) == 0:
                continue
            d_det, j_det = cKDTree(pix).query(dets)
            d_pt, j_pt = cKDTree(dets).query(pix)
            for a in range(len(idx)):
                d = j_pt[a]
                if d_pt[a] >= px_tol or j_det[d] != a:
                    continue
                i = int(idx[a])
                obs = (fr.index, e, int(d))
                q = owner.get(obs)
                if q is None:
                    tracks[i].append(obs)
                    owner[obs] = i
                elif (
                    len(frames_of[q]) == 1 and len(frames_of[i]) >= 2 and q not in absorbed
                    and np.linalg.norm(pts[q] - pts[i]) < absorb_radius
                ):
                    absorbed[q] = i
    if absorbed:
        for q, i in absorbed.items():
            tracks[i].extend(tracks[q])
        keep = [i for i in range(len(pts)) if i not in absorbed]
        pts = pts[keep]
        tracks = [tracks[i] for i in keep]
    return MarkerMap(pts, [sorted(set(t)) for t in tracks], marker_map.planes, dict(marker_map.metadata))
