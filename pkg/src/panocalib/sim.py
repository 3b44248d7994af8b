"""Deterministic synthetic room, sensor rigs and sensor data with ground truth.

The room is an axis-aligned box ``[0, X] x [0, Y] x [0, Z]`` with the floor at
``z = 0``. Only the floor and the four walls carry markers; there is no
ceiling, so LiDAR rays going up are lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientVisibility, PackingFailure, UnknownSensor
from .geometry import CameraIntrinsics, Pose, project_points
from .lidarloc import LidarScan


@dataclass(frozen=True)
class ScenePlane:
    """Rectangle ``origin + a*u + b*v`` with ``a in [0, len_u]``, ``b in [0, len_v]``.

    ``normal`` points into the room and ``normal · p = offset`` on the plane.
    """

    name: str
    origin: tuple[float, float, float]
    u: tuple[float, float, float]
    v: tuple[float, float, float]
    len_u: float
    len_v: float

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def offset(self) -> float:
        return float(self.normal @ np.asarray(self.origin, dtype=np.float64))

    @property
    def area(self) -> float:
        return self.len_u * self.len_v

    def point(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)[..., None]
        b = np.asarray(b, dtype=np.float64)[..., None]
        return np.asarray(self.origin) + a * np.asarray(self.u) + b * np.asarray(self.v)

    def local(self, points) -> tuple[np.ndarray, np.ndarray]:
        d = np.atleast_2d(points) - np.asarray(self.origin)
        return d @ np.asarray(self.u), d @ np.asarray(self.v)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        a, b = self.local(points)
        return (a >= -tol) & (a <= self.len_u + tol) & (b >= -tol) & (b <= self.len_v + tol)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "origin": list(self.origin), "u": list(self.u), "v": list(self.v),
            "len_u": self.len_u, "len_v": self.len_v,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePlane":
        return cls(d["name"], tuple(d["origin"]), tuple(d["u"]), tuple(d["v"]),
                   float(d["len_u"]), float(d["len_v"]))


def room_planes(room_size) -> list[ScenePlane]:
    X, Y, Z = (float(s) for s in room_size)
    # u x v must point into the room
    return [
        ScenePlane("floor", (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), X, Y),
        ScenePlane("wall_x0", (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), Y, Z),
        ScenePlane("wall_x1", (X, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), Z, Y),
        ScenePlane("wall_y0", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), Z, X),
        ScenePlane("wall_y1", (0.0, Y, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), X, Z),
    ]


@dataclass(frozen=True)
class SceneTruth:
    room_size: tuple[float, float, float]
    planes: list[ScenePlane]
    markers: np.ndarray  # (M, 3) world frame
    marker_plane: np.ndarray  # (M,) owning plane index
    seed: int = 0

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.room_size, dtype=np.float64) / 2.0

    def to_dict(self) -> dict:
        return {
            "room_size": list(self.room_size),
            "seed": int(self.seed),
            "planes": [p.to_dict() for p in self.planes],
            "markers": self.markers.tolist(),
            "marker_plane": self.marker_plane.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTruth":
        return cls(
            tuple(float(s) for s in d["room_size"]),
            [ScenePlane.from_dict(p) for p in d["planes"]],
            np.asarray(d["markers"], dtype=np.float64).reshape(-1, 3),
            np.asarray(d["marker_plane"], dtype=int),
            int(d.get("seed", 0)),
        )


def build_room(
    room_size=(3.0, 4.0, 2.5),
    marker_count: int = 340,
    min_spacing: float = 0.05,
    seed: int = 42,
    margin: float = 0.05,
) -> SceneTruth:
    """Scatter ``marker_count`` markers on the floor and four walls.

    Planes are drawn with probability proportional to area and positions
    uniformly inside the plane, ``margin`` away from its edges; candidates
    closer than ``min_spacing`` to an accepted marker are rejected. When
    ``marker_count`` is at least five, every plane receives one marker first so
    that all five planes are populated.
    """
    if marker_count < 4:
        raise ValueError("marker_count must be >= 4")
    if min(room_size) <= 0:
        raise ValueError("room_size must be positive")
    rng = np.random.default_rng(seed)
    planes = room_planes(room_size)
    areas = np.array([p.area for p in planes])
    prob = areas / areas.sum()
    pts: list[np.ndarray] = []
    owner: list[int] = []
    forced = list(range(len(planes))) if marker_count >= len(planes) else []
    attempts = 0
    max_attempts = 10 * marker_count
    while len(pts) < marker_count:
        if attempts >= max_attempts:
            raise PackingFailure(
                f"placed {len(pts)} of {marker_count} markers in {max_attempts} attempts"
            )
        attempts += 1
        k = forced[len(pts)] if len(pts) < len(forced) else int(rng.choice(len(planes), p=prob))
        pl = planes[k]
        a = rng.uniform(margin, pl.len_u - margin)
        b = rng.uniform(margin, pl.len_v - margin)
        p = pl.point(a, b)
        if pts and np.min(np.linalg.norm(np.asarray(pts) - p, axis=1)) < min_spacing:
            continue
        pts.append(p)
        owner.append(k)
    return SceneTruth(
        tuple(float(s) for s in room_size), planes, np.asarray(pts), np.asarray(owner, dtype=int), seed
    )


# --------------------------------------------------------------------------
# Rig description


@dataclass(frozen=True)
class CameraSpec:
    name: str
    intrinsics: CameraIntrinsics
    T_sensor_rig: Pose

    def to_dict(self) -> dict:
        return {"name": self.name, "intrinsics": self.intrinsics.to_dict(), "T_sensor_rig": self.T_sensor_rig.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(d["name"], CameraIntrinsics.from_dict(d["intrinsics"]), Pose.from_dict(d["T_sensor_rig"]))


@dataclass(frozen=True)
class LidarSpec:
    """Scanning LiDAR; x forward, z up. Azimuth is measured from +x toward +y."""

    name: str
    T_sensor_rig: Pose
    h_fov: tuple[float, float] = (-180.0, 180.0)
    v_fov: tuple[float, float] = (-15.0, 15.0)
    h_res: float = 0.2
    v_res: float = 2.0
    range_sigma: float = 0.02
    max_range: float = 100.0
    # coarse world<-lidar orientation (XYZ Euler, degrees) in the map frame, +-45 deg
    prior_rotation_deg: tuple[float, float, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "T_sensor_rig": self.T_sensor_rig.to_dict(),
            "h_fov": list(self.h_fov), "v_fov": list(self.v_fov),
            "h_res": self.h_res, "v_res": self.v_res,
            "range_sigma": self.range_sigma, "max_range": self.max_range,
        }
        if self.prior_rotation_deg is not None:
            d["prior_rotation_deg"] = list(self.prior_rotation_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LidarSpec":
        prior = d.get("prior_rotation_deg")
        return cls(
            d["name"], Pose.from_dict(d["T_sensor_rig"]), tuple(d.get("h_fov", (-180, 180))),
            tuple(d.get("v_fov", (-15, 15))), float(d.get("h_res", 0.2)), float(d.get("v_res", 2.0)),
            float(d.get("range_sigma", 0.02)), float(d.get("max_range", 100.0)),
            None if prior is None else tuple(float(x) for x in prior),
        )


@dataclass(frozen=True)
class RigSpec:
    cameras: list[CameraSpec] = field(default_factory=list)
    lidars: list[LidarSpec] = field(default_factory=list)
    name: str = "rig"

    def __post_init__(self):
        names = self.sensor_names
        if len(set(names)) != len(names):
            raise ValueError("sensor names must be unique")

    @property
    def sensor_names(self) -> list[str]:
        return [c.name for c in self.cameras] + [l.name for l in self.lidars]

    def camera(self, name: str) -> CameraSpec:
        for c in self.cameras:
            if c.name == name:
                return c
        raise UnknownSensor(f"no camera named {name!r}")

    def lidar(self, name: str) -> LidarSpec:
        for l in self.lidars:
            if l.name == name:
                return l
        raise UnknownSensor(f"no LiDAR named {name!r}")

    def T_sensor_rig(self, name: str) -> Pose:
        for s in list(self.cameras) + list(self.lidars):
            if s.name == name:
                return s.T_sensor_rig
        raise UnknownSensor(f"no sensor named {name!r}")

    def subset(self, names) -> "RigSpec":
        """The same rig restricted to ``names``; mounts stay relative to the rig frame."""
        names = list(names)
        for n in names:
            self.T_sensor_rig(n)
        keep = set(names)
        return RigSpec([c for c in self.cameras if c.name in keep],
                       [l for l in self.lidars if l.name in keep], self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cameras": [c.to_dict() for c in self.cameras],
            "lidars": [l.to_dict() for l in self.lidars],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        return cls(
            [CameraSpec.from_dict(c) for c in d.get("cameras", [])],
            [LidarSpec.from_dict(l) for l in d.get("lidars", [])],
            d.get("name", "rig"),
        )


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.2
    range_sigma: float = 0.02
    map_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.pixel_sigma, self.range_sigma, self.map_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")


# --------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Detections:
    """Detected marker centers. ``truth_ids`` is for evaluation only."""

    pixels: np.ndarray  # (N, 2)
    truth_ids: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.pixels)


def visible_markers(
    scene: SceneTruth,
    K: CameraIntrinsics,
    T_cam_world: Pose,
    min_depth: float = 0.3,
    max_depth: float = 10.0,
    max_view_angle_deg: float = 70.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of detectable markers and their exact projections."""
    pix, z = project_points(K, scene.markers, T_cam_world)
    cam_center = T_cam_world.inverse().translation
    normals = np.array([p.normal for p in scene.planes])[scene.marker_plane]
    to_cam = cam_center - scene.markers
    cosang = np.sum(normals * to_cam, 1) / np.linalg.norm(to_cam, axis=1)
    ok = (z >= min_depth) & (z <= max_depth) & K.in_image(pix)
    ok &= cosang > math.cos(math.radians(max_view_angle_deg))
    idx = np.flatnonzero(ok)
    return idx, pix[idx]


def render_detections(
    scene: SceneTruth,
    K: CameraIntrinsics,
    T_cam_world: Pose,
    pixel_sigma: float = 0.2,
    seed: int = 0,
) -> Detections:
    """Noisy marker-center detections, sorted by image row then column."""
    rng = np.random.default_rng(seed)
    idx, pix = visible_markers(scene, K, T_cam_world)
    noisy = pix + rng.normal(0.0, pixel_sigma, size=pix.shape) if pixel_sigma > 0 else pix.copy()
    order = np.lexsort((noisy[:, 0], noisy[:, 1]))
    return Detections(noisy[order], idx[order])


# --------------------------------------------------------------------------
# LiDAR


def lidar_directions(spec: LidarSpec) -> np.ndarray:
    h0, h1 = spec.h_fov
    v0, v1 = spec.v_fov
    n_h = max(1, int(round((h1 - h0) / spec.h_res)))
    if h1 - h0 < 360.0 - 1e-9:
        n_h += 1
    az = np.radians(h0 + spec.h_res * np.arange(n_h))
    n_v = max(1, int(round((v1 - v0) / spec.v_res)) + 1)
    el = np.radians(v0 + spec.v_res * np.arange(n_v))
    A, E = np.meshgrid(az, el, indexing="xy")
    A, E = A.ravel(), E.ravel()
    return np.column_stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)])


def raycast(scene: SceneTruth, origin, directions, max_range: float = 100.0):
    """Nearest plane hit per ray. Returns (ranges with nan for misses, plane index)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    best = np.full(len(d), np.inf)
    which = np.full(len(d), -1)
    for k, pl in enumerate(scene.planes):
        n = pl.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.offset - o @ n) / denom
        cand = np.isfinite(t) & (t > 1e-6) & (t < best)
        if not np.any(cand):
            continue
        hits = o + t[cand, None] * d[cand]
        inside = pl.contains(hits, tol=1e-9)
        sel = np.flatnonzero(cand)[inside]
        best[sel] = t[sel]
        which[sel] = k
    best[(best > max_range) | ~np.isfinite(best)] = np.nan
    which[np.isnan(best)] = -1
    return best, which


def render_lidar(
    scene: SceneTruth,
    T_lidar_world: Pose,
    spec: LidarSpec,
    range_sigma: float | None = None,
    seed: int = 0,
) -> LidarScan:
    """Ray-cast the LiDAR's angular grid against the room; points in the LiDAR frame."""
    rng = np.random.default_rng(seed)
    sigma = spec.range_sigma if range_sigma is None else range_sigma
    dirs = lidar_directions(spec)
    T_world_lidar = T_lidar_world.inverse()
    r, _ = raycast(scene, T_world_lidar.translation, dirs @ T_world_lidar.rotation.T, spec.max_range)
    keep = np.isfinite(r) & (r > 0.1)
    r = r[keep]
    if sigma > 0:
        r = r + rng.normal(0.0, sigma, size=r.shape)
    return LidarScan(dirs[keep] * r[:, None], spec.name)


# --------------------------------------------------------------------------
# Poses


def look_pose(position, yaw_deg: float, pitch_deg: float, roll_deg: float = 0.0,
              frame: str = "rig") -> Pose:
    """``T_world_frame`` for a camera-convention frame (z forward, y down).

    ``yaw`` is the heading in the world xy plane measured from +x, ``pitch``
    is positive looking up.
    """
    y, p = math.radians(yaw_deg), math.radians(pitch_deg)
    f = np.array([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), math.sin(p)])
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.column_stack([r, d, f])
    if roll_deg:
        from .geometry import rot_z

        R = R @ rot_z(roll_deg)
    return Pose(R, np.asarray(position, dtype=np.float64), frame, "world")


def make_stereo_trajectory(
    scene: SceneTruth,
    n_frames: int = 60,
    seed: int = 0,
    K: CameraIntrinsics | None = None,
    min_visible: int = 12,
    radius: float = 1.0,
    height: float = 1.4,
    pitch_range: tuple[float, float] = (-45.0, 10.0),
    step_deg: float = 12.0,
) -> list[Pose]:
    """Two inward-looking laps on a horizontal circle around the room center.

    Returns ``T_world_rig`` poses (rig = left camera). Pitch blends smoothly
    from ``pitch_range[0]`` to ``pitch_range[1]`` with the yaw progress over
    720 deg, so the floor is covered on the first lap and the walls on the
    second.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if K is None:
        from .presets import stereo_intrinsics

        K = stereo_intrinsics()
    rng = np.random.default_rng(seed)
    c = scene.center
    step = min(step_deg, 720.0 / n_frames)
    poses = []
    for k in range(n_frames):
        phi = step * k
        # pitch follows yaw progress over the two laps, so short runs stay smooth
        blend = 0.5 * (1.0 - math.cos(math.pi * min(phi / 720.0, 1.0)))
        pitch = pitch_range[0] + (pitch_range[1] - pitch_range[0]) * blend
        pos = np.array([
            c[0] + radius * math.cos(math.radians(phi)),
            c[1] + radius * math.sin(math.radians(phi)),
            height,
        ]) + rng.normal(0.0, 0.01, 3)
        jitter = rng.normal(0.0, 0.5, 3)
        T = look_pose(pos, phi + 180.0 + jitter[0], pitch + jitter[1], jitter[2])
        n_vis = len(visible_markers(scene, K, T.inverse())[0])
        if n_vis < min_visible:
            raise InsufficientVisibility(f"frame {k} sees {n_vis} markers (< {min_visible})")
        poses.append(T)
    return poses
