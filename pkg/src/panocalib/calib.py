"""Extrinsics from localized sensors, scoring against a known rig, and the map-noise study."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camloc import LocParams, enumerate_3d_triangles, localize_camera
from .errors import CalibrationError, GimbalLockWarning, NoPlanes, UnknownSensor
from .geometry import Pose, compose, euler_xyz, invert, rotation_distance_deg
from .lidarloc import LidarLocParams, LidarScan, densify_reference, localize_lidar
from .planes import fit_planes
from .recon.mapping import MarkerMap
from .sim import RigSpec, SceneTruth, render_detections, render_lidar

log = logging.getLogger(__name__)


@dataclass
class CalibrationResult:
    """World poses of the localized sensors and every pairwise extrinsic.

    ``pairwise[(x, y)]`` is ``T^x_y``: it maps ``y`` coordinates into ``x``.
    """

    sensor_poses: dict[str, Pose]  # world <- sensor
    pairwise: dict[tuple[str, str], Pose]
    failures: dict[str, str] = field(default_factory=dict)
    diagnostics: dict[str, dict] = field(default_factory=dict)

    def extrinsic(self, x: str, y: str) -> Pose:
        try:
            return self.pairwise[(x, y)]
        except KeyError:
            raise UnknownSensor(f"no extrinsic for ({x}, {y})") from None

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "sensor_poses": {k: v.to_dict() for k, v in self.sensor_poses.items()},
            "pairwise": [
                {"x": x, "y": y, "T": T.to_dict(), "euler_xyz_deg": list(euler_xyz(T.rotation)),
                 "translation_cm": (100.0 * T.translation).tolist()}
                for (x, y), T in self.pairwise.items()
            ],
            "failures": dict(self.failures),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(
            {k: Pose.from_dict(v) for k, v in d["sensor_poses"].items()},
            {(e["x"], e["y"]): Pose.from_dict(e["T"]) for e in d["pairwise"]},
            dict(d.get("failures", {})),
            dict(d.get("diagnostics", {})),
        )


def derive_extrinsics(sensor_poses: dict[str, Pose], failures=None, diagnostics=None) -> CalibrationResult:
    """All ordered pairs ``T^x_y = (T_world_x)^-1 T_world_y``."""
    names = list(sensor_poses)
    pairwise = {}
    for x in names:
        for y in names:
            if x != y:
                pairwise[(x, y)] = compose(invert(sensor_poses[x]), sensor_poses[y]).relabel(y, x)
    return CalibrationResult(dict(sensor_poses), pairwise, dict(failures or {}), dict(diagnostics or {}))


# --------------------------------------------------------------------------
# Scoring


def _wrap(deg):
    return (np.asarray(deg) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class PairScore:
    x: str
    y: str
    rotation_error_deg: float
    euler_est: tuple[float, float, float]
    euler_truth: tuple[float, float, float]
    translation_est_cm: tuple[float, float, float]
    translation_truth_cm: tuple[float, float, float]
    reprojection_px: float | None = None

    @property
    def euler_delta(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in _wrap(np.subtract(self.euler_est, self.euler_truth)))

    @property
    def translation_error_cm(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in np.subtract(self.translation_est_cm, self.translation_truth_cm))

    @property
    def translation_error_norm_cm(self) -> float:
        return float(np.linalg.norm(self.translation_error_cm))

    def to_dict(self) -> dict:
        return {
            "x": self.x, "y": self.y,
            "rotation_error_deg": self.rotation_error_deg,
            "euler_est": list(self.euler_est), "euler_truth": list(self.euler_truth),
            "euler_delta": list(self.euler_delta),
            "translation_est_cm": list(self.translation_est_cm),
            "translation_truth_cm": list(self.translation_truth_cm),
            "translation_error_cm": list(self.translation_error_cm),
            "translation_error_norm_cm": self.translation_error_norm_cm,
            "reprojection_px": self.reprojection_px,
        }


def truth_extrinsic(rig: RigSpec, x: str, y: str) -> Pose:
    return compose(rig.T_sensor_rig(x), invert(rig.T_sensor_rig(y))).relabel(y, x)


def score(result: CalibrationResult, truth: RigSpec, pairs=None) -> list[PairScore]:
    """Compare estimated extrinsics with the rig's mounting transforms.

    ``pairs`` defaults to ``(later, earlier)`` for every sensor pair in rig
    order, i.e. ``T^{camera1}_{camera0}``-style rows.
    """
    known = set(truth.sensor_names)
    for name in result.sensor_poses:
        if name not in known:
            raise UnknownSensor(f"sensor {name!r} is not in the truth rig")
    if pairs is None:
        order = [n for n in truth.sensor_names if n in result.sensor_poses]
        pairs = [(order[j], order[i]) for i in range(len(order)) for j in range(i + 1, len(order))]
    cams = {c.name for c in truth.cameras}
    rows = []
    for x, y in pairs:
        if x not in known or y not in known:
            raise UnknownSensor(f"pair ({x}, {y}) names an unknown sensor")
        est = result.extrinsic(x, y)
        gt = truth_extrinsic(truth, x, y)
        reproj = None
        if x in cams and y in cams:
            dx, dy = result.diagnostics.get(x, {}), result.diagnostics.get(y, {})
            nx, ny = dx.get("inlier_count", 0), dy.get("inlier_count", 0)
            if nx + ny > 0:
                reproj = (nx * dx.get("reprojection_px", 0.0) + ny * dy.get("reprojection_px", 0.0)) / (nx + ny)
        with warnings.catch_warnings():
            # branch ambiguity near |ry| = 90 deg is covered by the geodesic error
            warnings.simplefilter("ignore", GimbalLockWarning)
            e_est, e_gt = euler_xyz(est.rotation), euler_xyz(gt.rotation)
        rows.append(PairScore(
            x, y, rotation_distance_deg(est.rotation, gt.rotation),
            e_est, e_gt,
            tuple(float(v) for v in 100.0 * est.translation),
            tuple(float(v) for v in 100.0 * gt.translation),
            reproj,
        ))
    return rows


def format_table(rows: list[PairScore]) -> str:
    """Rotation (deg) and translation (cm) triples, truth above estimate."""
    def trip(v, fmt):
        return "(" + ", ".join(fmt.format(a) for a in v) + ")"

    lines = [f"{'Object':<22} {'':<4} {'Rotation (deg)':<28} {'Translation (cm)':<28} {'dR (deg)':>8} {'|dt| (cm)':>9}"]
    for r in rows:
        obj = f"T^{r.x}_{r.y}"
        lines.append(f"{obj:<22} {'GT':<4} {trip(r.euler_truth, '{:.2f}'):<28} {trip(r.translation_truth_cm, '{:.2f}'):<28}")
        lines.append(f"{'':<22} {'ours':<4} {trip(r.euler_est, '{:.2f}'):<28} {trip(r.translation_est_cm, '{:.2f}'):<28}"
                     f" {r.rotation_error_deg:>8.3f} {r.translation_error_norm_cm:>9.3f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Single-shot calibration


@dataclass(frozen=True)
class CalibParams:
    camera: LocParams = LocParams()
    lidar: LidarLocParams = LidarLocParams()
    max_triangle_edge: float = 1.0


def calibrate_sensors(
    marker_map: MarkerMap,
    rig: RigSpec,
    captures: dict,
    params: CalibParams = CalibParams(),
) -> CalibrationResult:
    """Localize every sensor from its single capture and derive the extrinsics.

    ``captures`` maps camera names to (N, 2) detection arrays and LiDAR names
    to ``LidarScan`` objects. A sensor that cannot be localized is recorded in
    ``failures`` and the others are still reported.
    """
    poses, failures, diag = {}, {}, {}
    d3 = None
    for cam in rig.cameras:
        if cam.name not in captures:
            failures[cam.name] = "no capture"
            continue
        try:
            if d3 is None:
                d3 = enumerate_3d_triangles(marker_map, params.max_triangle_edge)
            res = localize_camera(captures[cam.name], marker_map, cam.intrinsics, params.camera, d3)
        except CalibrationError as e:
            failures[cam.name] = f"{type(e).__name__}: {e}"
            log.warning("%s: %s", cam.name, failures[cam.name])
            continue
        poses[cam.name] = res.pose.inverse().relabel(cam.name, "world")
        diag[cam.name] = {
            "inlier_count": res.inlier_count,
            "detections": int(len(res.detections)),
            "rms_px": res.rms_px,
            "reprojection_px": _mean_reprojection(res, marker_map, cam.intrinsics),
        }
    ref = None
    for lid in rig.lidars:
        if lid.name not in captures:
            failures[lid.name] = "no capture"
            continue
        if lid.prior_rotation_deg is None:
            failures[lid.name] = "no coarse orientation prior in the rig config"
            continue
        scan = captures[lid.name]
        if not isinstance(scan, LidarScan):
            scan = LidarScan(scan, lid.name)
        try:
            if ref is None:
                ref = densify_reference(marker_map, params.lidar.spacing, params.lidar.pad)
            res = localize_lidar(LidarScan(scan.points, lid.name), marker_map, lid.prior_rotation_deg,
                                 params.lidar, ref)
        except (CalibrationError, NoPlanes) as e:
            failures[lid.name] = f"{type(e).__name__}: {e}"
            log.warning("%s: %s", lid.name, failures[lid.name])
            continue
        poses[lid.name] = res.pose.relabel(lid.name, "world")
        diag[lid.name] = {
            "rms_m": res.rms_m, "n_planes": res.n_planes, "prior_distance_deg": res.prior_distance_deg,
        }
    return derive_extrinsics(poses, failures, diag)


def _mean_reprojection(res, marker_map, K) -> float:
    from .geometry import project_points

    if not res.inliers:
        return float("nan")
    d = np.array([i for i, _ in res.inliers])
    m = np.array([j for _, j in res.inliers])
    pix, _ = project_points(K, marker_map.points[m], res.pose)
    return float(np.mean(np.linalg.norm(pix - res.detections[d], axis=1)))


# --------------------------------------------------------------------------
# Map noise and the noise study


def add_map_noise(marker_map: MarkerMap, sigma: float, seed: int = 0,
                  plane_tol: float = 0.02, plane_min_support: int = 10) -> MarkerMap:
    """i.i.d. per-coordinate Gaussian noise on every map point; planes refitted.

    The plane inlier tolerance widens to ``3 sigma`` when that exceeds
    ``plane_tol``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return marker_map
    rng = np.random.default_rng(seed)
    pts = marker_map.points + rng.normal(0.0, sigma, size=marker_map.points.shape)
    planes = fit_planes(pts, max(plane_tol, 3.0 * sigma), plane_min_support, seed=seed)
    meta = dict(marker_map.metadata)
    meta["map_noise_sigma"] = sigma
    return MarkerMap(pts, [list(t) for t in marker_map.tracks], planes, meta)


def truth_map(scene: SceneTruth, plane_tol: float = 0.02, plane_min_support: int = 10) -> MarkerMap:
    """The scene's marker layout as a map in the world frame, with fitted planes."""
    planes = fit_planes(scene.markers, plane_tol, plane_min_support, seed=scene.seed)
    return MarkerMap.from_points(scene.markers, planes, {"source": "truth"})


def render_captures(scene: SceneTruth, rig: RigSpec, T_world_rig: Pose, pixel_sigma: float,
                    range_sigma: float, seed: int) -> dict:
    """Single-shot detections and scans for every sensor; one child seed per sensor."""
    seeds = np.random.SeedSequence(seed).spawn(len(rig.sensor_names))
    out = {}
    for s, cam in zip(seeds[: len(rig.cameras)], rig.cameras):
        T_cam_world = compose(cam.T_sensor_rig, T_world_rig.inverse()).relabel("world", cam.name)
        out[cam.name] = render_detections(scene, cam.intrinsics, T_cam_world, pixel_sigma,
                                          int(s.generate_state(1)[0])).pixels
    for s, lid in zip(seeds[len(rig.cameras):], rig.lidars):
        T_l_world = compose(lid.T_sensor_rig, T_world_rig.inverse()).relabel("world", lid.name)
        out[lid.name] = render_lidar(scene, T_l_world, lid, range_sigma, int(s.generate_state(1)[0]))
    return out


def with_priors(rig: RigSpec, T_map_rig: Pose, step_deg: float = 10.0) -> RigSpec:
    """Copy of ``rig`` whose LiDARs carry a coarse map-frame orientation prior."""
    from dataclasses import replace

    from .presets import coarse_prior

    lidars = []
    for lid in rig.lidars:
        R = T_map_rig.rotation @ lid.T_sensor_rig.rotation.T
        lidars.append(replace(lid, prior_rotation_deg=coarse_prior(R, step_deg)))
    return RigSpec(list(rig.cameras), lidars, rig.name)


@dataclass(frozen=True)
class TrialOutcome:
    sigma: float
    trial: int
    seed: int
    rotation_error_deg: float  # mean over scored pairs, inf on failure
    translation_error_cm: float
    reprojection_px: float
    failures: dict

    @property
    def failed(self) -> bool:
        return bool(self.failures)


@dataclass(frozen=True)
class NoiseRow:
    sigma: float
    trials: int
    failures: int
    rotation_mean_deg: float
    rotation_std_deg: float
    rotation_max_deg: float
    translation_mean_cm: float
    translation_std_cm: float
    reprojection_mean_px: float
    unacceptable: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _stats(v: np.ndarray) -> tuple[float, float]:
    if not np.all(np.isfinite(v)):
        return math.inf, math.nan
    return float(v.mean()), float(v.std())


def _noise_trial(scene, rig, T_world_rig, base, sigma, seed, pixel_sigma, range_sigma, params, trial):
    noisy = add_map_noise(base, sigma, seed)
    captures = render_captures(scene, rig, T_world_rig, pixel_sigma, range_sigma, seed + 1)
    result = calibrate_sensors(noisy, rig, captures, params)
    if result.failures:
        return TrialOutcome(sigma, trial, seed, math.inf, math.inf, math.nan, dict(result.failures))
    rows = score(result, rig)
    rep = [r.reprojection_px for r in rows if r.reprojection_px is not None]
    return TrialOutcome(
        sigma, trial, seed,
        float(np.mean([r.rotation_error_deg for r in rows])),
        float(np.mean([r.translation_error_norm_cm for r in rows])),
        float(np.mean(rep)) if rep else math.nan,
        {},
    )


def run_noise_study(
    scene: SceneTruth,
    rig: RigSpec,
    T_world_rig: Pose,
    sigmas,
    trials: int = 5,
    seed: int = 0,
    pixel_sigma: float = 0.2,
    range_sigma: float = 0.02,
    params: CalibParams = CalibParams(),
    max_rotation_deg: float = 2.0,
    threads: int = 1,
) -> tuple[list[NoiseRow], list[TrialOutcome]]:
    """Calibrate ``trials`` times per map-noise level against the truth layout.

    Trial ``i`` uses the same seed at every sigma, so the noise pattern is
    shared and only its scale changes. A failed trial counts as infinite
    error. A row is unacceptable if any trial failed or the largest mean
    rotation error exceeds ``max_rotation_deg``.
    """
    sigmas = [float(s) for s in sigmas]
    if any(b < a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigmas must be sorted ascending")
    base = truth_map(scene)
    rig = with_priors(rig, T_world_rig)
    trial_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(trials)]
    jobs = [(sig, i, trial_seeds[i]) for sig in sigmas for i in range(trials)]

    def run(job):
        sig, i, s = job
        try:
            return _noise_trial(scene, rig, T_world_rig, base, sig, s, pixel_sigma, range_sigma, params, i)
        except CalibrationError as e:  # never abort the study
            return TrialOutcome(sig, i, s, math.inf, math.inf, math.nan, {"pipeline": str(e)})

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            outcomes = list(ex.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]

    rows = []
    for sig in sigmas:
        o = [t for t in outcomes if t.sigma == sig]
        rot = np.array([t.rotation_error_deg for t in o])
        tr = np.array([t.translation_error_cm for t in o])
        rep = np.array([t.reprojection_px for t in o])
        n_fail = sum(t.failed for t in o)
        rm, rs = _stats(rot)
        tm, ts = _stats(tr)
        rows.append(NoiseRow(
            sig, len(o), n_fail, rm, rs, float(rot.max()), tm, ts,
            float(np.nanmean(rep)) if np.any(np.isfinite(rep)) else math.nan,
            n_fail > 0 or float(rot.max()) > max_rotation_deg,
        ))
        log.info("sigma %.4f: %d/%d failed, rot %.4f deg, trans %.4f cm", sig, n_fail, len(o), rm, tm)
    return rows, outcomes


def format_noise_table(rows: list[NoiseRow]) -> str:
    lines = [f"{'sigma (cm)':>10} {'fail':>5} {'rot mean':>10} {'rot std':>9} {'trans mean':>11} "
             f"{'trans std':>10} {'reproj px':>10}  status"]
    for r in rows:
        lines.append(
            f"{100 * r.sigma:>10.2f} {r.failures:>2}/{r.trials:<2} {r.rotation_mean_deg:>10.4f} {r.rotation_std_deg:>9.4f} "
            f"{r.translation_mean_cm:>11.4f} {r.translation_std_cm:>10.4f} {r.reprojection_mean_px:>10.3f}  "
            f"{'UNACCEPTABLE' if r.unacceptable else 'ok'}"
        )
    return "\n".join(lines)
