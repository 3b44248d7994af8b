"""Single-shot extrinsic calibration of camera and LiDAR rigs against a panoramic marker room."""

from .calib import CalibrationResult, calibrate_sensors, derive_extrinsics, run_noise_study, score
from .camloc import LocParams, localize_camera
from .errors import CalibrationError
from .geometry import CameraIntrinsics, Pose, compose, invert
from .lidarloc import LidarLocParams, LidarScan, localize_lidar
from .recon.mapping import MarkerMap
from .recon.run import reconstruct
from .sim import RigSpec, SceneTruth, build_room

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CalibrationResult", "CameraIntrinsics", "LidarLocParams", "LidarScan",
    "LocParams", "MarkerMap", "Pose", "RigSpec", "SceneTruth", "build_room", "calibrate_sensors",
    "compose", "derive_extrinsics", "invert", "localize_camera", "localize_lidar", "reconstruct",
    "run_noise_study", "score",
]
