"""Stereo frames, frame-to-frame tracking and loop-closure detection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import NoConsensus, TrackingLost
from ..geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    epipolar_distance_px,
    project_points,
    rotation_distance_deg,
    ray_angle_deg,
    triangulate_normalized,
    undistort_normalized,
)
from .triangles import match_triangles


@dataclass(frozen=True)
class StereoFrame:
    """One synchronized stereo capture.

    ``pairs[j] = (left detection, right detection)`` produced ``local_points[j]``
    (left-camera frame). ``pose_world`` is ``T_world_rig`` once estimated.
    """

    index: int
    detections_left: np.ndarray
    detections_right: np.ndarray
    local_points: np.ndarray
    pairs: np.ndarray
    pose_world: Pose | None = None

    def with_pose(self, pose: Pose) -> "StereoFrame":
        return replace(self, pose_world=pose)

    def world_points(self) -> np.ndarray:
        if self.pose_world is None:
            raise ValueError(f"frame {self.index} has no pose")
        return self.pose_world.apply(self.local_points)


def stereo_match(
    det_l,
    det_r,
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    T_right_left: Pose,
    epipolar_tol_px: float = 2.0,
    min_depth: float = 0.3,
    max_depth: float = 10.0,
    min_ray_angle_deg: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Unambiguous left/right correspondences of featureless detections.

    A pair is accepted when it satisfies the epipolar constraint, triangulates
    in front of both cameras within the depth range, and neither detection has
    another admissible partner. Returns ``(pairs (P, 2), points (P, 3))``.
    """
    dl = np.asarray(det_l, dtype=np.float64).reshape(-1, 2)
    dr = np.asarray(det_r, dtype=np.float64).reshape(-1, 2)
    empty = (np.zeros((0, 2), dtype=int), np.zeros((0, 3)))
    if len(dl) == 0 or len(dr) == 0:
        return empty
    xl = undistort_normalized(K_l, dl)
    xr = undistort_normalized(K_r, dr)
    epi = epipolar_distance_px(xl[:, None, :], xr[None, :, :], T_right_left, K_r)
    il, ir = np.nonzero(epi < epipolar_tol_px)
    if len(il) == 0:
        return empty
    P, zl, zr = triangulate_normalized(xl[il], xr[ir], T_right_left)
    ang = ray_angle_deg(xl[il], xr[ir], T_right_left)
    ok = (zl >= min_depth) & (zl <= max_depth) & (zr >= min_depth) & (zr <= max_depth)
    ok &= ang >= min_ray_angle_deg
    il, ir, P = il[ok], ir[ok], P[ok]
    nl = np.bincount(il, minlength=len(dl))
    nr = np.bincount(ir, minlength=len(dr))
    unique = (nl[il] == 1) & (nr[ir] == 1)
    return np.column_stack([il[unique], ir[unique]]), P[unique]


def build_stereo_frame(index, det_l, det_r, K_l, K_r, T_right_left, **kw) -> StereoFrame:
    pairs, pts = stereo_match(det_l, det_r, K_l, K_r, T_right_left, **kw)
    return StereoFrame(
        index,
        np.asarray(det_l, dtype=np.float64).reshape(-1, 2),
        np.asarray(det_r, dtype=np.float64).reshape(-1, 2),
        pts,
        pairs,
    )


@dataclass
class TrackingResult:
    poses: list[Pose]
    # (k-1, k) -> list of (local idx in k-1, local idx in k)
    links: dict[tuple[int, int], list[tuple[int, int]]] = field(default_factory=dict)


def track_frames(
    frames: list[StereoFrame],
    edge_tol: float = 0.01,
    inlier_tol: float = 0.04,
    max_edge: float = 1.5,
) -> TrackingResult:
    if len(frames) < 2:
        raise ValueError("tracking needs at least two frames")
    poses = [Pose.identity("rig", "world")]
    links = {}
    for k in range(1, len(frames)):
        try:
            T, pairs = match_triangles(
                frames[k].local_points, frames[k - 1].local_points, edge_tol, inlier_tol, max_edge
            )
        except NoConsensus as e:
            raise TrackingLost(k, f"tracking lost between frames {k - 1} and {k}: {e}") from None
        poses.append(compose(poses[-1], T.relabel("rig", "rig")))
        links[(k - 1, k)] = [(b, a) for a, b in pairs]
    return TrackingResult(poses, links)


def track_sequence(frames: list[StereoFrame], **kw) -> list[Pose]:
    """World poses ``T_world_rig`` of every frame; frame 0 defines the world."""
    return track_frames(frames, **kw).poses


def detect_loop_closure(
    current: StereoFrame,
    history: list[StereoFrame],
    K: CameraIntrinsics,
    min_gap: int = 10,
    min_covisible: int = 6,
    edge_tol: float = 0.01,
    inlier_tol: float = 0.04,
    max_edge: float = 1.5,
    max_drift_m: float = 0.3,
    max_drift_deg: float = 10.0,
) -> tuple[int, list[tuple[int, int]]] | None:
    """Most co-visible earlier frame and its point correspondences, if any.

    The current frame's points are projected into every frame at least
    ``min_gap`` frames older; the one seeing most of them (ties: lowest
    index) is matched with the triangle algorithm. Returns
    ``(history frame index, [(idx in history frame, idx in current)])``.
    """
    if current.pose_world is None or len(current.local_points) < 3:
        return None
    Pw = current.world_points()
    best_idx, best_count = None, min_covisible - 1
    for h in history:
        if h.index > current.index - min_gap or h.pose_world is None:
            continue
        pix, z = project_points(K, Pw, h.pose_world.inverse())
        count = int(np.sum((z > 0.3) & K.in_image(pix)))
        if count > best_count:
            best_idx, best_count = h, count
    if best_idx is None:
        return None
    try:
        T, pairs = match_triangles(
            current.local_points, best_idx.local_points, edge_tol, inlier_tol, max_edge
        )
    except NoConsensus:
        return None
    if len(pairs) < min_covisible:
        return None
    # the geometric match must agree with the (drifting) tracked poses
    predicted = compose(best_idx.pose_world.inverse(), current.pose_world)
    if (
        rotation_distance_deg(T.rotation, predicted.rotation) > max_drift_deg
        or np.linalg.norm(T.translation - predicted.translation) > max_drift_m
    ):
        return None
    return best_idx.index, [(b, a) for a, b in pairs]
