import json
import os
import subprocess
import sys

import numpy as np
import pytest

from artifacts import collect_pass_flags, run_stage, write_json
from config import EXIT_CONFIG_ERROR, EXIT_MODULE_ERROR, EXIT_OK, EXIT_STRICT_FAILURE
from errors import ConfigParse, NotRational
from microstructure import preset


def _run_all(root_dir, *args):
    cmd = [sys.executable, os.path.join(root_dir, "run_all.py"), "run", *args]
    return subprocess.run(cmd, capture_output=True, text=True, cwd=root_dir)


def test_constant_pipeline_strict(root_dir, tmp_path):
    out = tmp_path / "constant"
    result = _run_all(root_dir, os.path.join(root_dir, "presets", "constant.toml"), "--strict", "--out", str(out))
    assert result.returncode == EXIT_OK, result.stdout + result.stderr
    assert "Pipeline finished successfully" in result.stdout

    summary = json.loads((out / "cell" / "summary.json").read_text())
    A0 = np.array(summary["fine"]["homogenized"])
    np.testing.assert_allclose(A0, preset("constant").samples[0, 0], atol=1e-10)
    assert summary["fine"]["ellipticity"]["preserved"]
    assert (out / "config.toml").exists() and (out / "run.log").exists()
    for name in ("u0", "u_eps", "reconstruction"):
        assert (out / "fields" / f"{name}.csv").exists() and (out / "fields" / f"{name}.json").exists()
    flags = collect_pass_flags(str(out))
    assert flags and all(flags.values())
    assert flags["tails_decay"]


def test_missing_tensor_file_exits_with_config_error(root_dir, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('epsilons = [0.25, 0.125, 0.0625]\n[tensor]\ncsv = "nowhere.csv"\n')
    result = _run_all(root_dir, str(cfg), "--out", str(tmp_path / "out"))
    assert result.returncode == EXIT_CONFIG_ERROR
    assert "nowhere.csv" in result.stderr


def test_stage_without_inputs_exits_with_module_error(root_dir, tmp_path):
    cfg = os.path.join(root_dir, "presets", "constant.toml")
    result = _run_all(root_dir, cfg, "--only", "spectrum", "--out", str(tmp_path / "empty"))
    assert result.returncode == EXIT_MODULE_ERROR


def test_run_stage_maps_errors_to_exit_codes():
    def config_failure():
        raise ConfigParse("bad key", key="x")

    def module_failure():
        raise NotRational("edge 0 is irrational", edge=0)

    with pytest.raises(SystemExit) as err:
        run_stage(config_failure)
    assert err.value.code == EXIT_CONFIG_ERROR
    with pytest.raises(SystemExit) as err:
        run_stage(module_failure)
    assert err.value.code == EXIT_MODULE_ERROR
    assert run_stage(lambda: None) is None


def test_strict_failure_code(root_dir, tmp_path):
    # a failing report left from an earlier run trips --strict even when no stage runs
    out = tmp_path / "stale"
    write_json({"quantity": "chi_term", "pass": False}, str(out / "reports" / "chi_term.json"))
    cfg = tmp_path / "cell_only.toml"
    cfg.write_text('epsilons = [0.25, 0.125]\n[study]\nstages = ["cell"]\ncorrector_study = false\n'
                   'chi_decay = false\nbl_decay = false\n[resolution]\ncell_grid = 16\n')
    result = _run_all(root_dir, str(cfg), "--strict", "--out", str(out))
    assert result.returncode == EXIT_STRICT_FAILURE
    assert "chi_term" in result.stdout


def test_pass_flags_collected(tmp_path):
    out = str(tmp_path)
    write_json({"quantity": "eigenvalue_error_k0", "pass": True}, os.path.join(out, "reports", "a.json"))
    write_json({"order": 1, "all_pass": True}, os.path.join(out, "reports", "expansion.json"))
    write_json({"flagged": True, "groups": []}, os.path.join(out, "tails", "tails.json"))
    write_json({"osborn_bounded": True, "rotation_invariance": [{"mode": 1, "pass": False}]},
               os.path.join(out, "spectrum", "summary.json"))
    assert collect_pass_flags(out) == {
        "eigenvalue_error_k0": True,
        "tails_decay": False,
        "osborn_bounded": True,
        "rotation_invariance_k1": False,
    }


@pytest.mark.slow
def test_laminate_pipeline_strict(root_dir, tmp_path):
    out = tmp_path / "laminate"
    result = _run_all(root_dir, os.path.join(root_dir, "presets", "laminate_square.toml"), "--strict",
                      "--jobs", "2", "--out", str(out))
    assert result.returncode == EXIT_OK, result.stdout[-4000:] + result.stderr[-4000:]
    flags = collect_pass_flags(str(out))
    for name in ("eigenvalue_error_k0", "first_order_residual_k0", "reconstruction_h1", "bl_tail_subtracted",
                 "osborn_bounded"):
        assert flags[name], name
    first = json.loads((out / "reports" / "first_order_residual_k0.json").read_text())
    # the square's edge tails cancel in sum_j c_j
    assert first["notes"]["degenerate"]


@pytest.mark.slow
def test_triangle_pipeline_first_order_term(root_dir, tmp_path):
    out = tmp_path / "triangle"
    result = _run_all(root_dir, os.path.join(root_dir, "presets", "laminate_triangle.toml"), "--jobs", "2",
                      "--out", str(out))
    assert result.returncode == EXIT_OK, result.stdout[-4000:] + result.stderr[-4000:]
    summary = json.loads((out / "spectrum" / "summary.json").read_text())
    rows = summary["expansions"][0]["rows"]
    assert len(rows) == 3
    for row in rows:
        total = sum(row["corrections"])
        zeroth = abs(row["harmonic_mean"] - row["homogenized_mean"])
        assert abs(total) > 1e-3
        assert row["residual"] < zeroth
        assert np.sign(row["harmonic_mean"] - row["homogenized_mean"]) == -np.sign(total)
    first = json.loads((out / "reports" / "first_order_residual_k0.json").read_text())
    assert "degenerate" not in first["notes"]
