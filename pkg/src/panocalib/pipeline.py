"""Run configuration and the file-based stages behind the command line.

Stages communicate only through files in the output directory, so any
synthetic input can be replaced by real detections (CSV) and scans (PLY).

Output layout::

    scene.json            true room layout (simulated runs)
    rig.json              rig under calibration, LiDAR priors in the map frame
    stereo_rig.json       mapping stereo pair (rig frame = left camera)
    truth.json            true poses: mapping trajectory and the rig capture
    stereo/detections.csv mapping sequence, cameras "left" and "right"
    capture/detections.csv single-shot detections of the rig cameras
    capture/<lidar>.ply   single-shot scans
    map.json, map.ply     reconstructed marker map (frame of the first stereo frame)
    result.json           calibration result
    manifest.json         seeds, parameters and files of every stage run
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .calib import (
    CalibParams,
    add_map_noise,
    calibrate_sensors,
    format_noise_table,
    format_table,
    render_captures,
    run_noise_study,
    score,
    with_priors,
)
from .camloc import LocParams
from .errors import ConfigError, DataFileError
from .geometry import Pose, compose
from .lidarloc import IcpParams, LidarLocParams, LidarScan
from .planes import fit_planes
from .presets import PRESETS, preset, stereo_rig
from .recon.evaluate import evaluate_reconstruction
from .recon.mapping import MarkerMap
from .recon.run import ReconParams, reconstruct
from .sim import RigSpec, build_room, look_pose, make_stereo_trajectory, render_detections

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SceneConfig:
    room_size: tuple = (3.0, 4.0, 2.5)
    marker_count: int = 340
    min_spacing: float = 0.05
    seed: int | None = None  # derived from the run seed when None


@dataclass(frozen=True)
class TrajectoryConfig:
    n_frames: int = 60
    radius: float = 1.0
    height: float = 1.4
    baseline: float = 0.12


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 0.2
    range_sigma: float = 0.02
    map_sigma: float = 0.0


@dataclass(frozen=True)
class NoiseStudyConfig:
    sigmas: tuple = (0.0, 0.005, 0.01, 0.015, 0.02)
    trials: int = 5
    max_rotation_deg: float = 2.0
    sensors: tuple | None = None  # subset of the rig; None = all


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    rig: str = "mobile_robot"  # preset name or path to a rig JSON
    rig_pose: dict | None = None  # {"position", "yaw", "pitch", "roll"}; presets supply their own
    map_source: str = "reconstructed"  # or "truth": true layout plus map_sigma noise
    scene: SceneConfig = SceneConfig()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    noise: NoiseConfig = NoiseConfig()
    noise_study: NoiseStudyConfig = NoiseStudyConfig()
    recon: ReconParams = ReconParams()
    camera: LocParams = LocParams()
    lidar: LidarLocParams = LidarLocParams()
    max_triangle_edge: float = 1.0
    out: str = "out"
    threads: int = 1

    @property
    def calib_params(self) -> CalibParams:
        return CalibParams(self.camera, self.lidar, self.max_triangle_edge)

    def seeds(self) -> dict[str, int]:
        """Every seed used by the stages, derived from ``seed`` unless set explicitly."""
        names = ["scene", "trajectory", "stereo", "capture", "map_noise", "noise_study"]
        ss = np.random.SeedSequence(self.seed).spawn(len(names))
        out = {n: int(s.generate_state(1)[0]) for n, s in zip(names, ss)}
        if self.scene.seed is not None:
            out["scene"] = int(self.scene.seed)
        return out

    def to_dict(self) -> dict:
        return io._clean(dataclasses.asdict(self))


_NESTED = {
    "scene": SceneConfig, "trajectory": TrajectoryConfig, "noise": NoiseConfig,
    "noise_study": NoiseStudyConfig, "recon": ReconParams, "camera": LocParams,
    "lidar": LidarLocParams, "icp": IcpParams,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get(k)
        if sub is not None and dataclasses.is_dataclass(sub) and isinstance(v, dict):
            kw[k] = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> RunConfig:
    _check(isinstance(cfg.seed, int) and 0 <= cfg.seed < 2**64, "seed must be an integer in [0, 2^64)")
    _check(cfg.map_source in ("reconstructed", "truth"), "map_source must be 'reconstructed' or 'truth'")
    _check(isinstance(cfg.threads, int) and cfg.threads >= 1, "threads must be >= 1")
    s = cfg.scene
    _check(len(s.room_size) == 3 and all(float(v) > 0 for v in s.room_size), "scene.room_size must be 3 positive numbers")
    _check(int(s.marker_count) >= 4, "scene.marker_count must be >= 4")
    _check(float(s.min_spacing) >= 0, "scene.min_spacing must be >= 0")
    t = cfg.trajectory
    _check(int(t.n_frames) >= 2, "trajectory.n_frames must be >= 2")
    _check(float(t.radius) >= 0 and float(t.baseline) > 0, "trajectory.radius >= 0 and baseline > 0 required")
    n = cfg.noise
    for k in ("pixel_sigma", "range_sigma", "map_sigma"):
        _check(float(getattr(n, k)) >= 0, f"noise.{k} must be >= 0")
    ns = cfg.noise_study
    sig = [float(v) for v in ns.sigmas]
    _check(len(sig) > 0 and all(v >= 0 for v in sig), "noise_study.sigmas must be non-negative")
    _check(sig == sorted(sig), "noise_study.sigmas must be sorted ascending")
    _check(int(ns.trials) >= 1, "noise_study.trials must be >= 1")
    c = cfg.camera
    _check(c.n_rounds >= 1 and c.inlier_px > 0 and c.min_inliers >= 3, "camera: n_rounds >= 1, inlier_px > 0, min_inliers >= 3")
    _check(0 <= c.min_inlier_ratio <= 1 and 0 < c.early_exit <= 1, "camera: ratios must lie in [0, 1]")
    _check(c.map_tol >= 0, "camera.map_tol must be >= 0")
    _check(cfg.lidar.plane_tol > 0 and cfg.lidar.min_support >= 3, "lidar: plane_tol > 0 and min_support >= 3")
    _check(cfg.lidar.icp.max_corr > 0 and cfg.lidar.icp.max_iters >= 1, "lidar.icp: max_corr > 0 and max_iters >= 1")
    _check(cfg.max_triangle_edge > 0, "max_triangle_edge must be > 0")
    if cfg.rig not in PRESETS:
        p = Path(cfg.rig)
        _check(p.is_file(), f"rig {cfg.rig!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor an existing file")
        _check(cfg.rig_pose is not None, "a rig file needs rig_pose (position, yaw, pitch[, roll])")
    if cfg.rig_pose is not None:
        rp = cfg.rig_pose
        _check(isinstance(rp, dict) and "position" in rp and len(rp["position"]) == 3,
               "rig_pose needs a 3-element position")
    return cfg


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the JSON file, then non-None ``overrides`` (CLI flags)."""
    d = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            d = io.read_json(p)
        except DataFileError as e:
            raise ConfigError(str(e)) from e
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
        if "rig" in d and d["rig"] not in PRESETS and not Path(d["rig"]).is_absolute():
            d["rig"] = str((p.parent / d["rig"]))
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    cfg = _build(RunConfig, d, "config")
    try:
        return validate(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config: bad value type: {e}") from e


# --------------------------------------------------------------------------
# Helpers


def _rig_and_pose(cfg: RunConfig) -> tuple[RigSpec, Pose]:
    if cfg.rig in PRESETS:
        cap = preset(cfg.rig)
        rig, T = cap.rig, cap.T_world_rig
    else:
        rig = io.load_rig(cfg.rig)
        T = None
    if cfg.rig_pose is not None:
        rp = cfg.rig_pose
        frame = rig.cameras[0].name if rig.cameras else "rig"
        T = look_pose(rp["position"], float(rp.get("yaw", 0.0)), float(rp.get("pitch", 0.0)),
                      float(rp.get("roll", 0.0)), frame=frame)
    return rig, T


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(out: Path, stage: str, cfg: RunConfig, files: list[Path], extra: dict | None = None):
    """Record the stage in manifest.json; contents depend only on the inputs."""
    mpath = out / "manifest.json"
    man = io.read_json(mpath) if mpath.is_file() else {"format": "panocalib-run", "stages": {}}
    entry = {
        "config": cfg.to_dict(),
        "seeds": cfg.seeds(),
        "files": {str(f.relative_to(out)): _sha256(f) for f in sorted(files)},
    }
    if extra:
        entry.update(extra)
    date = io.build_date()
    if date is not None:
        entry["date"] = date
    man["stages"][stage] = entry
    io.write_json(mpath, man)


def _need(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise DataFileError(path, f"missing input (run '{stage}' first or supply the file)")
    return path


# --------------------------------------------------------------------------
# Stages


def cmd_simulate(cfg: RunConfig) -> dict:
    """Scene, mapping sequence, single-shot capture and truth files."""
    out = Path(cfg.out)
    seeds = cfg.seeds()
    sc = cfg.scene
    scene = build_room(tuple(float(v) for v in sc.room_size), int(sc.marker_count), float(sc.min_spacing), seeds["scene"])
    srig = stereo_rig(cfg.trajectory.baseline)
    K_l, K_r = srig.cameras[0].intrinsics, srig.cameras[1].intrinsics
    T_right_left = srig.cameras[1].T_sensor_rig
    tr = cfg.trajectory
    traj = make_stereo_trajectory(scene, int(tr.n_frames), seeds["trajectory"], K_l, radius=float(tr.radius),
                                  height=float(tr.height))
    rows = []
    ss = np.random.SeedSequence(seeds["stereo"]).spawn(2 * len(traj))
    for k, T_world_left in enumerate(traj):
        T_left_world = T_world_left.inverse().relabel("world", "camera0")
        T_right_world = compose(T_right_left, T_left_world)
        for e, (eye, K, T) in enumerate((("left", K_l, T_left_world), ("right", K_r, T_right_world))):
            det = render_detections(scene, K, T, cfg.noise.pixel_sigma, int(ss[2 * k + e].generate_state(1)[0]))
            rows.append((k, eye, det.pixels, det.truth_ids))
    files = [io.save_scene(out / "scene.json", scene), io.write_detections(out / "stereo/detections.csv", rows)]

    rig, T_world_rig = _rig_and_pose(cfg)
    T_map_world = traj[0].inverse()
    rig = with_priors(rig, compose(T_map_world, T_world_rig))
    caps = render_captures(scene, rig, T_world_rig, cfg.noise.pixel_sigma, cfg.noise.range_sigma, seeds["capture"])
    cam_rows = [(0, c.name, caps[c.name], None) for c in rig.cameras]
    files.append(io.write_detections(out / "capture/detections.csv", cam_rows))
    for lid in rig.lidars:
        files.append(io.write_ply(out / f"capture/{lid.name}.ply", caps[lid.name].points, binary=True))
    files.append(io.save_rig(out / "rig.json", rig))
    files.append(io.save_rig(out / "stereo_rig.json", srig))
    files.append(io.write_json(out / "truth.json", {
        "T_world_map": traj[0].relabel("map", "world").to_dict(),
        "T_world_rig": T_world_rig.to_dict(),
        "trajectory": [T.to_dict() for T in traj],
    }))
    summary = {"stereo_frames": len(traj), "rig_captures": 1, "markers": len(scene.markers),
               "sensors": rig.sensor_names}
    _update_manifest(out, "simulate", cfg, files, {"summary": summary})
    log.info("simulated %d stereo frames and one capture of %s", len(traj), rig.name)
    return summary


def _stereo_inputs(out: Path):
    srig = io.load_rig(_need(out / "stereo_rig.json", "simulate"))
    if len(srig.cameras) != 2:
        raise DataFileError(out / "stereo_rig.json", "the mapping rig must have exactly two cameras")
    dets = io.read_detections(_need(out / "stereo/detections.csv", "simulate"))
    frames = sorted({f for f, _ in dets})
    empty = np.zeros((0, 2))
    seq = [(dets.get((f, "left"), (empty, None))[0], dets.get((f, "right"), (empty, None))[0]) for f in frames]
    return srig, seq


def cmd_reconstruct(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    srig, seq = _stereo_inputs(out)
    left, right = srig.cameras
    t0 = time.perf_counter()
    frames, m = reconstruct(seq, left.intrinsics, right.intrinsics, right.T_sensor_rig, cfg.recon, seed=cfg.seeds()["scene"])
    report = {"frames": len(frames), "points": len(m), "planes": len(m.planes),
              "loop_closures": int(m.metadata.get("loop_closures", 0))}
    scene_path = out / "scene.json"
    if scene_path.is_file():
        scene = io.load_scene(scene_path)
        init = None
        truth_path = out / "truth.json"
        if truth_path.is_file():
            init = Pose.from_dict(io.read_json(truth_path)["T_world_map"])
        mean_err, plane_err = evaluate_reconstruction(m, scene, init)
        report.update(mean_error_cm=100.0 * mean_err, plane_error_cm=100.0 * plane_err)
    files = [io.save_map(out / "map.json", m), io.write_ply(out / "map.ply", m.points),
             io.write_json(out / "reconstruction.json", report)]
    _update_manifest(out, "reconstruct", cfg, files, {"summary": report})
    log.info("reconstructed %d points in %.1f s", len(m), time.perf_counter() - t0)
    return report


def _truth_map_in_map_frame(out: Path, cfg: RunConfig) -> MarkerMap:
    scene = io.load_scene(_need(out / "scene.json", "simulate"))
    T_world_map = Pose.from_dict(io.read_json(_need(out / "truth.json", "simulate"))["T_world_map"])
    pts = T_world_map.inverse().apply(scene.markers)
    planes = fit_planes(pts, cfg.recon.plane_tol, cfg.recon.plane_min_support, seed=0)
    m = MarkerMap.from_points(pts, planes, {"source": "truth"})
    if cfg.noise.map_sigma > 0:
        m = add_map_noise(m, cfg.noise.map_sigma, cfg.seeds()["map_noise"], plane_tol=cfg.recon.plane_tol)
    return m


def load_captures(out: Path, rig: RigSpec) -> dict:
    """Camera detections and LiDAR scans of the single-shot capture; absent sensors are skipped."""
    caps = {}
    det_path = out / "capture/detections.csv"
    dets = io.read_detections(det_path) if det_path.is_file() else {}
    for cam in rig.cameras:
        pix = [p for (f, c), (p, _) in sorted(dets.items()) if c == cam.name]
        if pix:
            caps[cam.name] = pix[0]
        elif det_path.is_file():
            caps[cam.name] = np.zeros((0, 2))
    for lid in rig.lidars:
        p = out / f"capture/{lid.name}.ply"
        if p.is_file():
            caps[lid.name] = LidarScan(io.read_ply(p), lid.name)
    return caps


def cmd_calibrate(cfg: RunConfig):
    """Single-shot calibration of every sensor in rig.json; returns the result."""
    out = Path(cfg.out)
    rig = io.load_rig(_need(out / "rig.json", "simulate"))
    if cfg.map_source == "truth":
        m = _truth_map_in_map_frame(out, cfg)
    else:
        m = io.load_map(_need(out / "map.json", "reconstruct"))
    caps = load_captures(out, rig)
    result = calibrate_sensors(m, rig, caps, cfg.calib_params)
    files = [io.save_result(out / "result.json", result)]
    _update_manifest(out, "calibrate", cfg, files, {"failures": dict(result.failures)})
    return result


def cmd_evaluate(cfg: RunConfig, result_path=None, truth_path=None) -> list:
    out = Path(cfg.out)
    result = io.load_result(_need(Path(result_path) if result_path else out / "result.json", "calibrate"))
    truth = io.load_rig(_need(Path(truth_path) if truth_path else out / "rig.json", "simulate"))
    rows = score(result, truth)
    header = ["x", "y", "rotation_error_deg", "euler_dx", "euler_dy", "euler_dz",
              "t_err_x_cm", "t_err_y_cm", "t_err_z_cm", "t_err_norm_cm", "reprojection_px"]
    io.write_table_csv(out / "evaluation.csv", header, [
        [r.x, r.y, r.rotation_error_deg, *r.euler_delta, *r.translation_error_cm, r.translation_error_norm_cm,
         r.reprojection_px] for r in rows])
    text = format_table(rows)
    if result.failures:
        text += "\n\nnot localized:\n" + "\n".join(f"  {k}: {v}" for k, v in result.failures.items())
    (out / "evaluation.txt").write_text(text + "\n", encoding="utf-8")
    _update_manifest(out, "evaluate", cfg, [out / "evaluation.csv", out / "evaluation.txt"])
    return rows


def cmd_noise_study(cfg: RunConfig) -> list:
    out = Path(cfg.out)
    sc = cfg.scene
    seeds = cfg.seeds()
    scene = build_room(tuple(float(v) for v in sc.room_size), int(sc.marker_count), float(sc.min_spacing), seeds["scene"])
    rig, T_world_rig = _rig_and_pose(cfg)
    if cfg.noise_study.sensors:
        rig = rig.subset(cfg.noise_study.sensors)
    ns = cfg.noise_study
    rows, outcomes = run_noise_study(
        scene, rig, T_world_rig, [float(s) for s in ns.sigmas], int(ns.trials), seeds["noise_study"],
        cfg.noise.pixel_sigma, cfg.noise.range_sigma, cfg.calib_params, float(ns.max_rotation_deg), cfg.threads,
    )
    header = list(rows[0].to_dict())
    io.write_table_csv(out / "noise_study.csv", header, [list(r.to_dict().values()) for r in rows])
    io.write_table_csv(out / "noise_trials.csv",
                       ["sigma", "trial", "seed", "rotation_error_deg", "translation_error_cm", "reprojection_px", "failures"],
                       [[o.sigma, o.trial, o.seed, o.rotation_error_deg, o.translation_error_cm, o.reprojection_px,
                         "; ".join(f"{k}: {v}" for k, v in o.failures.items())] for o in outcomes])
    (out / "noise_study.txt").write_text(format_noise_table(rows) + "\n", encoding="utf-8")
    _update_manifest(out, "noise-study", cfg,
                     [out / "noise_study.csv", out / "noise_trials.csv", out / "noise_study.txt"])
    return rows
