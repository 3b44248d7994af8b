"""Ready-made rigs and capture placements mirroring the evaluated sensor suites.

Mounting transforms are given as ``T^{sensor}_{camera0}`` (XYZ Euler degrees,
translation in centimeters), so the rig frame is the ``camera0`` frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, euler_xyz, from_euler_xyz, rot_y, rot_z
from .sim import CameraSpec, LidarSpec, RigSpec, look_pose


def mount(euler_deg, t_cm, sensor: str, rig: str = "camera0") -> Pose:
    """``T_sensor_rig`` from an Euler XYZ triple (deg) and a translation (cm)."""
    return Pose(from_euler_xyz(*euler_deg), np.asarray(t_cm, dtype=np.float64) / 100.0, rig, sensor)


def stereo_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(1746.0, 1744.0, 640.0, 512.0, 1280, 1024)


def stereo_rig(baseline: float = 0.12) -> RigSpec:
    K = stereo_intrinsics()
    return RigSpec(
        [
            CameraSpec("camera0", K, Pose.identity("camera0", "camera0")),
            CameraSpec("camera1", K, Pose(np.eye(3), [-baseline, 0.0, 0.0], "camera0", "camera1")),
        ],
        [],
        "stereo",
    )


def mobile_robot_rig() -> RigSpec:
    """Four wide-angle cameras (1280x720) in a ring and one 16-beam LiDAR."""
    K = CameraIntrinsics(640.0, 640.0, 640.0, 360.0, 1280, 720)
    cams = [
        CameraSpec("camera0", K, Pose.identity("camera0", "camera0")),
        CameraSpec("camera1", K, mount((0, 90, 0), (5.65, 0, 5.65), "camera1")),
        CameraSpec("camera2", K, mount((0, 180, 0), (0, 0, -11.29), "camera2")),
        CameraSpec("camera3", K, mount((0, -90, 0), (-5.65, 0, -5.65), "camera3")),
    ]
    lidar = LidarSpec("lidar0", mount((90, -45, 0), (0, -5.93, -5.497), "lidar0"))
    return RigSpec(cams, [lidar], "mobile_robot")


def backpack_rig() -> RigSpec:
    """Four cameras, a top LiDAR and a tilted rear LiDAR whose scans do not overlap.

    The rear LiDAR's azimuth window is limited to +-70 deg, the part of its
    ring not occluded by the carrier.
    """
    K = CameraIntrinsics(600.0, 600.0, 576.0, 960.0, 1152, 1920)
    T_l0 = mount((0, -15, 90), (61.38, 0, -3.81), "lidar0")
    T_l1_l0 = mount((0, -75, -30), (-22.55, 13.02, -34.92), "lidar1", rig="lidar0")
    cams = [
        CameraSpec("camera0", K, Pose.identity("camera0", "camera0")),
        CameraSpec("camera1", K, mount((0, -90, 0), (-3.12, 0, -2.12), "camera1")),
        CameraSpec("camera2", K, mount((0, -180, 0), (0, 0, -6.23), "camera2")),
        CameraSpec("camera3", K, mount((0, 90, 0), (3.12, 0, -3.12), "camera3")),
    ]
    lidars = [
        LidarSpec("lidar0", T_l0),
        LidarSpec("lidar1", T_l1_l0 @ T_l0, h_fov=(-70.0, 70.0)),
    ]
    return RigSpec(cams, lidars, "backpack")


def tls_rig() -> RigSpec:
    """Two high-resolution cameras and a panoramic (servo-swept) LiDAR."""
    K = CameraIntrinsics(3400.0, 3400.0, 2304.0, 1728.0, 4608, 3456)
    cams = [
        CameraSpec("camera0", K, Pose.identity("camera0", "camera0")),
        CameraSpec("camera1", K, mount((28, 0, 0), (0, 2.8, 0), "camera1")),
    ]
    lidar = LidarSpec("lidar0", mount((-14, 0, 0), (0, -1.4, 2.0), "lidar0"),
                      h_fov=(-180.0, 180.0), v_fov=(-60.0, 60.0), h_res=0.5, v_res=0.5)
    return RigSpec(cams, [lidar], "tls")


# --------------------------------------------------------------------------
# Capture placements (T_world_rig) in the default 3 x 4 x 2.5 m room


@dataclass(frozen=True)
class Capture:
    rig: RigSpec
    T_world_rig: Pose  # world <- camera0


def _from_lidar0(rig: RigSpec, T_world_lidar0: Pose) -> Pose:
    return T_world_lidar0 @ rig.T_sensor_rig("lidar0")


def stereo_capture() -> Capture:
    # near one wall looking across the room: both eyes share ~50 markers
    return Capture(stereo_rig(), look_pose([1.5, 0.3, 1.4], 90.0, -15.0, frame="camera0"))


def mobile_robot_capture() -> Capture:
    return Capture(mobile_robot_rig(), look_pose([1.4, 1.8, 0.45], 30.0, 0.0, frame="camera0"))


def backpack_capture() -> Capture:
    rig = backpack_rig()
    T_l0 = Pose(rot_z(270.0) @ rot_y(20.0), [0.8, 3.0, 1.3], "lidar0", "world")
    return Capture(rig, _from_lidar0(rig, T_l0))


def tls_capture() -> Capture:
    return Capture(tls_rig(), look_pose([1.4, 2.2, 1.2], 100.0, -15.0, frame="camera0"))


PRESETS = {
    "stereo": stereo_capture,
    "mobile_robot": mobile_robot_capture,
    "backpack": backpack_capture,
    "tls": tls_capture,
}


def preset(name: str) -> Capture:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def coarse_prior(R_map_lidar: np.ndarray, step_deg: float = 10.0) -> tuple[float, float, float]:
    """Euler XYZ of a rotation rounded to ``step_deg``: a coarse, hand-measurable prior."""
    e = np.asarray(euler_xyz(R_map_lidar))
    return tuple(float(v) for v in step_deg * np.round(e / step_deg))
