import subprocess
import sys
import time

import numpy as np
import pytest

from adaptmesh import __version__
from adaptmesh.cli import main
from adaptmesh.config import SCHEMA_VERSION
from adaptmesh.geometry import PointCloud, save_point_cloud
from adaptmesh.sim import ScannerSpec, TrajectorySpec, save_scene_file, straight_tube


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "adaptmesh.cli", *map(str, args)], capture_output=True, text=True)


def test_version():
    out = run_cli("--version")
    assert out.returncode == 0
    assert __version__ in out.stdout and f"schema {SCHEMA_VERSION}" in out.stdout


def test_errors_are_one_machine_parsable_line(tmp_path):
    out = run_cli("evaluate", "--mesh", tmp_path / "none.ply", "--gt", tmp_path / "none.ply")
    assert out.returncode != 0
    lines = out.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
    (tmp_path / "bad.json").write_text('{"wobble": 1}')
    assert main(["dump-config", "--config", str(tmp_path / "bad.json")]) == 1


def test_evaluate_identical_files(tmp_path, capsys):
    pts = np.random.default_rng(0).normal(size=(500, 3))
    save_point_cloud(PointCloud(pts), tmp_path / "a.ply", "ply")
    assert main(["evaluate", "--mesh", str(tmp_path / "a.ply"), "--gt", str(tmp_path / "a.ply"),
                 "--report", str(tmp_path / "r.csv")]) == 0
    row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
    assert [float(v) for v in row[:4]] == [0.0, 0.0, 0.0, 100.0]
    assert "Chamfer-L1" in capsys.readouterr().out


def test_dump_config_roundtrip(tmp_path):
    assert main(["dump-config", "--seed", "3", "--out", str(tmp_path / "c.json")]) == 0
    assert main(["dump-config", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d.json")]) == 0
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


@pytest.mark.slow
def test_simulate_reconstruct_evaluate_smoke(tmp_path):
    t0 = time.perf_counter()
    save_scene_file(tmp_path / "tube.cfg", straight_tube(10.0), ScannerSpec(), TrajectorySpec())
    frames = tmp_path / "frames"
    assert main(["simulate", "--spec", str(tmp_path / "tube.cfg"), "--out", str(frames)]) == 0
    assert (frames / "trajectory.txt").exists() and (frames / "frame_00000.ply").exists()
    assert main(["smooth", "--frames", str(frames), "--out", str(tmp_path / "n.ply")]) == 0
    assert main(["reconstruct", "--frames", str(frames), "--out", str(tmp_path / "m.ply"),
                 "--gt", str(frames / "gt.ply"), "--report", str(tmp_path / "rec.csv"),
                 "--map-out", str(tmp_path / "map.npz")]) == 0
    assert main(["evaluate", "--mesh", str(tmp_path / "m.ply"), "--gt", str(frames / "gt.ply"),
                 "--report", str(tmp_path / "ev.csv")]) == 0
    elapsed = time.perf_counter() - t0
    fscore = float((tmp_path / "ev.csv").read_text().splitlines()[1].split(",")[3])
    assert fscore > 85.0
    assert elapsed < 300.0
    # resuming from the saved map still produces a mesh
    assert main(["reconstruct", "--frames", str(frames), "--out", str(tmp_path / "m2.obj"),
                 "--resume", str(tmp_path / "map.npz")]) == 0
    assert (tmp_path / "m2.obj").stat().st_size > 0


@pytest.mark.slow
def test_train_agent_writes_weights_and_curve(tmp_path):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    save_scene_file(scenes / "a.cfg", straight_tube(3.0), ScannerSpec(rays_per_frame=300), TrajectorySpec(start=0.5))
    assert main(["train-agent", "--scenes", str(scenes), "--iters", "1", "--out", str(tmp_path / "w.bin")]) == 0
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0] == "iteration,mean_reward,mean_chamfer_cm" and len(rows) == 2
    frames = tmp_path / "frames"
    assert main(["simulate", "--spec", str(scenes / "a.cfg"), "--out", str(frames)]) == 0
    assert main(["reconstruct", "--frames", str(frames), "--weights", str(tmp_path / "w.bin"),
                 "--out", str(tmp_path / "m.ply")]) == 0
