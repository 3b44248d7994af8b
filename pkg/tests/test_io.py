import numpy as np
import pytest

from panocalib import io
from panocalib.calib import derive_extrinsics, truth_map
from panocalib.errors import DataFileError
from panocalib.geometry import Pose
from panocalib.presets import preset


def test_scene_rig_map_roundtrip(tmp_path, room):
    io.save_scene(tmp_path / "scene.json", room)
    back = io.load_scene(tmp_path / "scene.json")
    assert np.array_equal(back.markers, room.markers)

    rig = preset("backpack").rig
    io.save_rig(tmp_path / "rig.json", rig)
    r2 = io.load_rig(tmp_path / "rig.json")
    assert r2.sensor_names == rig.sensor_names
    for n in rig.sensor_names:
        assert np.array_equal(r2.T_sensor_rig(n).matrix(), rig.T_sensor_rig(n).matrix())

    m = truth_map(room)
    io.save_map(tmp_path / "map.json", m)
    m2 = io.load_map(tmp_path / "map.json")
    assert np.array_equal(m2.points, m.points) and len(m2.planes) == len(m.planes)


def test_result_json_is_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    poses = {n: Pose(np.eye(3), rng.normal(size=3), n, "world") for n in ("a", "b")}
    res = derive_extrinsics(poses)
    p1 = io.save_result(tmp_path / "r1.json", res)
    p2 = io.save_result(tmp_path / "r2.json", io.load_result(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "a": 1,\n  "b": \n}\n')
    with pytest.raises(DataFileError) as e:
        io.read_json(p)
    assert e.value.line == 4 and str(p) in str(e.value)
    with pytest.raises(DataFileError):
        io.load_rig(tmp_path / "missing.json")


def test_detections_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1000, (5, 2))
    b = rng.uniform(0, 1000, (3, 2))
    p = io.write_detections(tmp_path / "d.csv", [(0, "left", a, [1, 2, 3, 4, 5]), (0, "right", b, None)])
    got = io.read_detections(p)
    assert np.array_equal(got[(0, "left")][0], a)
    assert got[(0, "left")][1].tolist() == [1, 2, 3, 4, 5]
    assert got[(0, "right")][1].tolist() == [-1, -1, -1]


@pytest.mark.parametrize(
    "body, line",
    [
        ("frame_id,camera,u,v\n0,c,1.0,2.0\n0,c,abc,2.0\n", 3),
        ("frame_id,camera,u,v\n0,c,1.0\n", 2),
        ("frame_id,camera,u,v\n0,c,1.0,2.0\n0,c,nan,2.0\n", 3),
        ("frame_id,camera,u\n", 1),
    ],
)
def test_malformed_detections_report_path_and_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataFileError) as e:
        io.read_detections(p)
    assert e.value.line == line
    assert f"{p}:{line}" in str(e.value)


@pytest.mark.parametrize("binary", [False, True])
def test_ply_roundtrip(tmp_path, binary):
    pts = np.random.default_rng(2).normal(size=(50, 3))
    p = io.write_ply(tmp_path / "x.ply", pts, binary=binary, comment="test")
    assert np.array_equal(io.read_ply(p), pts)


def test_ply_extra_properties_and_errors(tmp_path):
    p = tmp_path / "c.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                  b"property float z\nproperty uchar red\nend_header\n1 2 3 255\n4 5 6 0\n")
    assert np.array_equal(io.read_ply(p), [[1, 2, 3], [4, 5, 6]])
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                  b"property float z\nend_header\n1 2 3\n4 x 6\n")
    with pytest.raises(DataFileError) as e:
        io.read_ply(p)
    assert e.value.line == 9
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nend_header\n")
    with pytest.raises(DataFileError):
        io.read_ply(p)


def test_build_date(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert io.build_date() is None
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert io.build_date() == "1970-01-01T00:00:00Z"
