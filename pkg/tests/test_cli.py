import json

import pytest

from panocalib.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main


def _config(tmp_path, **extra):
    cfg = {"rig": "stereo", "map_source": "truth", "trajectory": {"n_frames": 20}, **extra}
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    cfg = _config(tmp)
    out = tmp / "out"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
    return cfg, out


def test_simulate_writes_inputs(simulated):
    _, out = simulated
    for f in ("scene.json", "rig.json", "stereo_rig.json", "truth.json", "stereo/detections.csv",
              "capture/detections.csv", "manifest.json"):
        assert (out / f).is_file(), f


def test_calibrate_and_evaluate(simulated, capsys):
    cfg, out = simulated
    assert main(["calibrate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
    assert main(["evaluate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
    assert "camera1" in capsys.readouterr().out
    assert (out / "evaluation.csv").is_file()


def test_calibrate_is_byte_deterministic(simulated):
    cfg, out = simulated
    assert main(["calibrate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
    first = (out / "result.json").read_bytes()
    assert main(["calibrate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_OK
    assert (out / "result.json").read_bytes() == first


def test_sensor_without_detections_exits_2(simulated, tmp_path, capsys):
    cfg, out = simulated
    import shutil

    work = tmp_path / "work"
    shutil.copytree(out, work)
    csv = work / "capture/detections.csv"
    lines = csv.read_text().splitlines(keepends=True)
    csv.write_text("".join([lines[0]] + [ln for ln in lines[1:] if ",camera1," not in ln]))
    assert main(["calibrate", "--config", cfg, "--out", str(work), "--seed", "7"]) == EXIT_FAILURE
    assert "camera1" in capsys.readouterr().err
    result = json.loads((work / "result.json").read_text())
    assert "camera0" in result["sensor_poses"] and "camera1" in result["failures"]


def test_missing_inputs_exit_2(tmp_path):
    assert main(["calibrate", "--out", str(tmp_path / "empty")]) == EXIT_FAILURE


def test_configuration_errors_exit_1(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert main(["simulate", "--config", _config(tmp_path, bogus_key=1)]) == EXIT_CONFIG
    assert main(["simulate", "--config", _config(tmp_path, map_source="guess")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--seed", "-1"])
    assert e.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_CONFIG
    assert "bogus_key" in capsys.readouterr().err
