"""Stereo reconstruction of the marker map."""

from .ba import global_ba
from .evaluate import align_points, evaluate_reconstruction
from .mapping import MarkerMap, build_map, merge_points
from .tracking import (
    StereoFrame,
    build_stereo_frame,
    detect_loop_closure,
    stereo_match,
    track_frames,
    track_sequence,
)
from .triangles import match_triangles, triangles_within

__all__ = [
    "MarkerMap", "StereoFrame", "align_points", "build_map", "build_stereo_frame",
    "detect_loop_closure", "evaluate_reconstruction", "global_ba", "match_triangles",
    "merge_points", "stereo_match", "track_frames", "track_sequence", "triangles_within",
]
