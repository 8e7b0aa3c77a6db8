import json
import subprocess
import sys

import numpy as np
import pytest

from gmmct import cli
from gmmct.experiment import STAGE1_FILES, STAGE2_FILES, default_config_dict, read_sinogram
from gmmct.stage2 import Stage2Error


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    """One benchmark particle on a coarser geometry, so a full run takes about a second."""
    d = default_config_dict()
    d["n_particles"] = 1
    d["truth"] = d["truth"][2:3]
    d["generation"]["velocities"] = d["generation"]["velocities"][2:3]
    d["geometry"].update(num_times=60, num_detectors=96)
    d["stage1"] = {"n_trials": 2}
    d["stage2"] = {"n_rot_grid": 60, "n_morph_trials": 1}
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(d))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def fused(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("fused")
    assert run("run", "--config", small_config, "--out", out) == cli.EXIT_OK
    return out


def test_run_writes_all_artifacts(fused):
    names = set(snapshot(fused))
    assert set(STAGE1_FILES + STAGE2_FILES + ["truth.json", "metrics.json"]) == names
    metrics = json.loads((fused / "metrics.json").read_text())
    assert metrics["summary"]["max_velocity_error"] < 1e-6
    assert metrics["summary"]["max_alpha_rel_error"] < 1e-6


def test_run_is_bitwise_deterministic(fused, small_config, tmp_path):
    assert run("run", "--config", small_config, "--out", tmp_path) == cli.EXIT_OK
    assert snapshot(tmp_path) == snapshot(fused)


def test_refuses_to_overwrite(fused, small_config, capsys):
    before = snapshot(fused)
    assert run("run", "--config", small_config, "--out", fused) == cli.EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert snapshot(fused) == before


def test_force_overwrites(small_config, tmp_path):
    assert run("run", "--config", small_config, "--out", tmp_path, "--stage", "1") == cli.EXIT_OK
    assert run("run", "--config", small_config, "--out", tmp_path, "--stage", "1") == cli.EXIT_IO
    assert run("run", "--config", small_config, "--out", tmp_path, "--stage", "1", "--force") == cli.EXIT_OK


def test_stage1_only_then_resume(fused, small_config, tmp_path):
    assert run("run", "--config", small_config, "--out", tmp_path, "--stage", "1") == cli.EXIT_OK
    names = set(snapshot(tmp_path))
    assert not names & set(STAGE2_FILES + ["metrics.json"])
    assert "stage1_metrics.json" in names
    assert run("reconstruct", "--config", small_config, "--out", tmp_path, "--stage", "2") == cli.EXIT_OK
    got, ref = snapshot(tmp_path), snapshot(fused)
    for name in STAGE1_FILES + STAGE2_FILES + ["metrics.json"]:
        assert got[name] == ref[name], name


def test_simulate_then_reconstruct_matches_fused(fused, small_config, tmp_path):
    sim, rec = tmp_path / "sim", tmp_path / "rec"
    assert run("simulate", "--config", small_config, "--out", sim) == cli.EXIT_OK
    assert (sim / "sinogram.txt").read_bytes() == (fused / "sinogram.txt").read_bytes()
    assert run("reconstruct", "--config", small_config, "--sinogram", sim / "sinogram.txt",
               "--truth", sim / "truth.json", "--out", rec) == cli.EXIT_OK
    for name in ["modes.tsv", "trajectories.json", "morphology.json", "metrics.json"]:
        assert (rec / name).read_bytes() == (fused / name).read_bytes(), name


def test_reconstruct_rejects_geometry_mismatch(fused, tmp_path):
    d = default_config_dict()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(d))
    assert run("reconstruct", "--config", cfg, "--sinogram", fused / "sinogram.txt",
               "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_report(fused, capsys):
    assert run("report", "--out", fused) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "acceptance: pass" in out


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_particles": 2}))
    assert run("run", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    bad.write_text("{not json")
    assert run("run", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_generation_error_exit_code(tmp_path):
    d = default_config_dict()
    d.pop("truth")
    d["generation"].update(anisotropy_min=10.0, max_rejections=20)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(d))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_stage1_failure_exit_code(fused, small_config, tmp_path):
    # a blank sinogram has no modes to fit
    text = (fused / "sinogram.txt").read_text().splitlines()
    header = [ln for ln in text if ln.startswith("#")]
    rows = [" ".join(["0.0000000000000000e+00"] * 96)] * 60  # one row per time
    blank = tmp_path / "blank.txt"
    blank.write_text("\n".join(header + rows) + "\n")
    assert read_sinogram(blank).values.shape == (96, 60)
    assert not np.any(read_sinogram(blank).values)
    assert run("reconstruct", "--config", small_config, "--sinogram", blank,
               "--out", tmp_path / "o") == cli.EXIT_STAGE1


def test_stage2_failure_exit_code(small_config, tmp_path, monkeypatch):
    import gmmct.experiment as ex

    def boom(*args, **kwargs):
        raise Stage2Error("no finite loss")

    monkeypatch.setattr(ex, "optimize_morphology", boom)
    assert run("run", "--config", small_config, "--out", tmp_path) == cli.EXIT_STAGE2
    assert (tmp_path / "trajectories.json").exists()


def test_seed_validation():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["run", "--out", "x", "--seed", "-1"])
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["run", "--out", "x", "--seed", str(2 ** 64)])
    args = cli.build_parser().parse_args(["run", "--out", "x", "--seed", str(2 ** 64 - 1)])
    assert args.seed == 2 ** 64 - 1


def test_check_gradients(small_config, capsys):
    assert run("check-gradients", "--config", small_config, "--points", "2") == cli.EXIT_OK
    assert "pass" in capsys.readouterr().out


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gmmct.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "reconstruct" in proc.stdout
