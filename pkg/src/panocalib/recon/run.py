"""End-to-end stereo reconstruction: tracking, loop closure, merging, BA, planes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, Pose
from ..planes import fit_planes
from .ba import global_ba
from .mapping import MarkerMap, build_map, extend_tracks, merge_points
from .tracking import StereoFrame, build_stereo_frame, detect_loop_closure, track_frames

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconParams:
    epipolar_tol_px: float = 2.0
    edge_tol: float = 0.01
    inlier_tol: float = 0.04
    max_edge: float = 1.5
    loop_min_gap: int = 10
    loop_min_covisible: int = 6
    merge_radius: float = 0.02
    huber_px: float = 2.0
    ba_iters: int = 50
    extend_rounds: int = 2
    extend_px: float = 3.0
    plane_tol: float = 0.02
    plane_min_support: int = 10


def reconstruct(
    detections: list[tuple[np.ndarray, np.ndarray]],
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    T_right_left: Pose,
    params: ReconParams = ReconParams(),
    seed: int = 0,
) -> tuple[list[StereoFrame], MarkerMap]:
    """Build the marker map from per-frame (left, right) detections."""
    frames = [
        build_stereo_frame(k, dl, dr, K_l, K_r, T_right_left, epipolar_tol_px=params.epipolar_tol_px)
        for k, (dl, dr) in enumerate(detections)
    ]
    tr = track_frames(frames, params.edge_tol, params.inlier_tol, params.max_edge)
    frames = [f.with_pose(p) for f, p in zip(frames, tr.poses)]
    links = dict(tr.links)
    n_loops = 0
    for k in range(params.loop_min_gap, len(frames)):
        hit = detect_loop_closure(
            frames[k], frames[:k], K_l, params.loop_min_gap, params.loop_min_covisible,
            params.edge_tol, params.inlier_tol, params.max_edge,
        )
        if hit is not None:
            h, pairs = hit
            links[(h, k)] = pairs
            n_loops += 1
    log.info("tracked %d frames, %d loop closures", len(frames), n_loops)
    m = merge_points(build_map(frames, links), params.merge_radius)
    frames, m, rms = global_ba(frames, m, K_l, K_r, T_right_left, params.huber_px, params.ba_iters)
    eyes = [(K_l, Pose.identity("rig", "left")), (K_r, T_right_left.relabel("rig", "right"))]
    for _ in range(params.extend_rounds):
        m = merge_points(extend_tracks(frames, m, eyes, params.extend_px), params.merge_radius)
        frames, m, rms = global_ba(frames, m, K_l, K_r, T_right_left, params.huber_px, params.ba_iters)
    m2 = m
    planes = fit_planes(m2.points, params.plane_tol, params.plane_min_support, seed=seed)
    meta = dict(m2.metadata)
    meta["loop_closures"] = n_loops
    log.info("map: %d points, %d planes, BA rms %.3f px", len(m2), len(planes), rms)
    return frames, MarkerMap(m2.points, m2.tracks, planes, meta)
