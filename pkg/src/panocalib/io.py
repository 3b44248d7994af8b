"""File formats at the pipeline boundary: JSON documents, detection CSVs and PLY point clouds.

Every reader reports malformed input as ``DataFileError`` carrying the path
and, where it applies, the 1-based line number.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import os
from pathlib import Path

import numpy as np

from .calib import CalibrationResult
from .errors import DataFileError
from .geometry import Plane
from .recon.mapping import MarkerMap
from .sim import RigSpec, SceneTruth

DETECTION_FIELDS = ("frame_id", "camera", "u", "v", "truth_id")


# --------------------------------------------------------------------------
# JSON


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, tuples to lists, non-finite floats kept."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    # float repr round-trips exactly, so equal inputs give byte-equal files
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror or e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFileError(path, f"invalid JSON: {e.msg}", e.lineno) from e


def _load(path, builder, what: str):
    d = read_json(path)
    try:
        return builder(d)
    except (KeyError, TypeError, ValueError) as e:
        raise DataFileError(path, f"not a valid {what} document: {type(e).__name__}: {e}") from e


def save_scene(path, scene: SceneTruth) -> Path:
    return write_json(path, scene.to_dict())


def load_scene(path) -> SceneTruth:
    return _load(path, SceneTruth.from_dict, "scene")


def save_rig(path, rig: RigSpec) -> Path:
    return write_json(path, rig.to_dict())


def load_rig(path) -> RigSpec:
    return _load(path, RigSpec.from_dict, "rig")


def map_to_dict(m: MarkerMap) -> dict:
    return {
        "points": m.points.tolist(),
        "tracks": [[list(o) for o in t] for t in m.tracks],
        "planes": [p.to_dict() for p in m.planes],
        "metadata": m.metadata,
    }


def map_from_dict(d: dict) -> MarkerMap:
    pts = np.asarray(d["points"], dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("map points must be finite")
    tracks = [[tuple(int(x) for x in o) for o in t] for t in d.get("tracks", [[] for _ in pts])]
    planes = [Plane.from_dict(p) for p in d.get("planes", [])]
    return MarkerMap(pts, tracks, planes, dict(d.get("metadata", {})))


def save_map(path, m: MarkerMap) -> Path:
    return write_json(path, map_to_dict(m))


def load_map(path) -> MarkerMap:
    return _load(path, map_from_dict, "marker map")


def save_result(path, result: CalibrationResult) -> Path:
    return write_json(path, result.to_dict())


def load_result(path) -> CalibrationResult:
    return _load(path, CalibrationResult.from_dict, "calibration result")


# --------------------------------------------------------------------------
# Detection CSV


def write_detections(path, rows) -> Path:
    """``rows`` is an iterable of ``(frame_id, camera, pixels (N,2), truth_ids or None)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for frame_id, camera, pix, ids in rows:
            pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
            ids = [-1] * len(pix) if ids is None else [int(i) for i in ids]
            for (u, v), t in zip(pix, ids):
                w.writerow((int(frame_id), camera, repr(float(u)), repr(float(v)), t))
    return path


def read_detections(path) -> dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]:
    """Detections grouped by ``(frame_id, camera)`` in file order.

    ``truth_id`` is optional (empty or -1 for real data).
    """
    path = Path(path)
    try:
        f = path.open(newline="", encoding="utf-8")
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror or e}") from e
    groups: dict[tuple[int, str], tuple[list, list]] = {}
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFileError(path, "empty file", 1)
        header = [h.strip() for h in header]
        missing = [c for c in DETECTION_FIELDS[:4] if c not in header]
        if missing:
            raise DataFileError(path, f"missing column(s) {', '.join(missing)}", 1)
        col = {c: header.index(c) for c in DETECTION_FIELDS if c in header}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFileError(path, f"expected {len(header)} fields, got {len(row)}", line)
            try:
                key = (int(row[col["frame_id"]]), row[col["camera"]].strip())
                u, v = float(row[col["u"]]), float(row[col["v"]])
                tid = row[col["truth_id"]].strip() if "truth_id" in col else ""
                tid = int(tid) if tid else -1
            except ValueError as e:
                raise DataFileError(path, f"bad value: {e}", line) from e
            if not (math.isfinite(u) and math.isfinite(v)):
                raise DataFileError(path, "non-finite pixel coordinate", line)
            if not key[1]:
                raise DataFileError(path, "empty camera name", line)
            g = groups.setdefault(key, ([], []))
            g[0].append((u, v))
            g[1].append(tid)
    return {k: (np.asarray(p, dtype=np.float64).reshape(-1, 2), np.asarray(t, dtype=int))
            for k, (p, t) in groups.items()}


# --------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points, binary: bool = False, comment: str | None = None) -> Path:
    """Vertex-only PLY with double x, y, z; ASCII or binary little-endian."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0"]
    if comment:
        head.append(f"comment {comment}")
    head += [f"element vertex {len(pts)}", "property double x", "property double y",
             "property double z", "end_header"]
    with path.open("wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            f.write(pts.astype("<f8").tobytes())
        else:
            f.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii"))
    return path


def read_ply(path) -> np.ndarray:
    """(N, 3) vertex positions from an ASCII or binary little-endian PLY.

    Extra scalar vertex properties are skipped; other elements must follow the
    vertices.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror or e}") from e
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataFileError(path, "not a PLY file", 1)
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    header = data[:end].decode("ascii", "replace").splitlines()
    fmt, n, props, in_vertex, seen_vertex = None, None, [], False, False
    for i, raw in enumerate(header, start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise DataFileError(path, f"unsupported PLY format {' '.join(tok[1:2])!r}", i)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise DataFileError(path, "malformed element line", i)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tok[2])
                except ValueError:
                    raise DataFileError(path, "bad vertex count", i) from None
                seen_vertex = True
            elif not seen_vertex:
                raise DataFileError(path, "vertex element must come first", i)
        elif tok[0] == "property":
            if not in_vertex:
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise DataFileError(path, f"unsupported vertex property {raw.strip()!r}", i)
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise DataFileError(path, f"unexpected header line {raw.strip()!r}", i)
    names = [p for p, _ in props]
    if fmt is None or n is None or not all(c in names for c in "xyz"):
        raise DataFileError(path, "header lacks format, vertex count or x/y/z")
    if fmt == "binary_little_endian":
        dt = np.dtype([(p, "<" + t) for p, t in props])
        if len(body) < n * dt.itemsize:
            raise DataFileError(path, f"truncated binary body: need {n} vertices")
        v = np.frombuffer(body, dtype=dt, count=n)
        pts = np.stack([v[c].astype(np.float64) for c in "xyz"], axis=1)
    else:
        first_line = len(header) + 2  # header lines + end_header, 1-based
        lines = body.decode("ascii", "replace").splitlines()
        if len(lines) < n:
            raise DataFileError(path, f"expected {n} vertices, found {len(lines)}", first_line + len(lines))
        idx = [names.index(c) for c in "xyz"]
        pts = np.empty((n, 3))
        for k in range(n):
            f = lines[k].split()
            if len(f) != len(props):
                raise DataFileError(path, f"expected {len(props)} values, got {len(f)}", first_line + k)
            try:
                pts[k] = [float(f[j]) for j in idx]
            except ValueError:
                raise DataFileError(path, "bad number", first_line + k) from None
    if not np.all(np.isfinite(pts)):
        raise DataFileError(path, "non-finite vertex coordinate")
    return pts


# --------------------------------------------------------------------------
# Misc


def build_date() -> str | None:
    """UTC timestamp from ``SOURCE_DATE_EPOCH``, or None when unset (keeps outputs reproducible)."""
    v = os.environ.get("SOURCE_DATE_EPOCH")
    if not v:
        return None
    try:
        t = int(v)
    except ValueError:
        return None
    return _dt.datetime.fromtimestamp(t, _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_table_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if x is None else (repr(float(x)) if isinstance(x, (float, np.floating)) else x)
                        for x in r])
    return path
