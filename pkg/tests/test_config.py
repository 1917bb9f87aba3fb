import glob
import os

import pytest

from config import ExperimentConfig, dump_config, load_config, parse_config, resolve_output_dir
from errors import ConfigParse, HomogError

MINIMAL = """
name = "t"
epsilons = [0.25, 0.125, 0.0625]
"""


def test_defaults_parse():
    cfg = parse_config(MINIMAL)
    assert cfg.name == "t"
    assert cfg.epsilons == (0.25, 0.125, 0.0625)
    assert cfg.tensor.preset == "laminate"
    assert cfg.resolution.cell_grid == 256


def test_round_trip_is_identity(root_dir):
    for path in sorted(glob.glob(os.path.join(root_dir, "presets", "*.toml"))):
        cfg = load_config(path)
        again = parse_config(dump_config(cfg))
        assert again == cfg, path
        assert dump_config(again) == dump_config(cfg)


def test_epsilons_must_decrease():
    with pytest.raises(ConfigParse) as err:
        parse_config('epsilons = [0.125, 0.25, 0.0625]')
    assert err.value.details["key"] == "epsilons"


def test_epsilons_must_be_positive():
    with pytest.raises(ConfigParse):
        parse_config('epsilons = [0.25, 0.0, -0.1]')


def test_slope_study_needs_three_epsilons():
    with pytest.raises(ConfigParse) as err:
        parse_config('epsilons = [0.25, 0.125]')
    assert "at least 3" in str(err.value)


def test_two_epsilons_allowed_without_studies():
    text = """
epsilons = [0.25, 0.125]
[study]
stages = ["cell", "tails"]
corrector_study = false
chi_decay = false
bl_decay = false
"""
    assert parse_config(text).epsilons == (0.25, 0.125)


def test_mesh_policy_needs_override():
    text = MINIMAL + "[resolution]\nmesh_points_per_period = 2\n"
    with pytest.raises(ConfigParse) as err:
        parse_config(text)
    assert err.value.details["key"] == "resolution.mesh_points_per_period"
    cfg = parse_config(text.replace("= 2\n", "= 2\nallow_coarse_mesh = true\n"))
    assert cfg.resolution.mesh_points_per_period == 2


def test_missing_tensor_file_names_path(tmp_path):
    text = MINIMAL + '[tensor]\ncsv = "no_such_tensor.csv"\n'
    with pytest.raises(ConfigParse) as err:
        parse_config(text, base_dir=str(tmp_path))
    assert "no_such_tensor.csv" in str(err.value)
    assert err.value.code == "cli.ConfigParse"


def test_unknown_key_rejected():
    with pytest.raises(ConfigParse) as err:
        parse_config(MINIMAL + "[tensor]\npreset = 'laminate'\ncolour = 'blue'\n")
    assert "colour" in str(err.value)


def test_wrong_type_rejected():
    with pytest.raises(ConfigParse) as err:
        parse_config(MINIMAL + "[resolution]\ncell_grid = 'big'\n")
    assert err.value.details["key"] == "resolution.cell_grid"


def test_cell_grid_power_of_two():
    with pytest.raises(ConfigParse):
        parse_config(MINIMAL + "[resolution]\ncell_grid = 100\n")


def test_modes_need_enough_eigenpairs():
    with pytest.raises(ConfigParse) as err:
        parse_config('modes = [0, 9]\nepsilons = [0.25, 0.125, 0.0625]\n')
    assert err.value.details["key"] == "resolution.eigen_count"


def test_invalid_toml():
    with pytest.raises(ConfigParse):
        parse_config("epsilons = [0.25,")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigParse) as err:
        load_config(str(tmp_path / "absent.toml"))
    assert "absent.toml" in str(err.value)


def test_relative_tensor_csv_resolved_against_config(tmp_path):
    (tmp_path / "a.csv").write_text("alpha,beta,i,j,y1,y2,value\n")
    cfg_path = tmp_path / "exp.toml"
    cfg_path.write_text(MINIMAL + '[tensor]\ncsv = "a.csv"\n')
    cfg = load_config(str(cfg_path))
    assert cfg.tensor.csv == str(tmp_path / "a.csv")


def test_output_dir_precedence(monkeypatch):
    cfg = ExperimentConfig(output_dir="from_config")
    monkeypatch.delenv("HOMOG_OUT_DIR", raising=False)
    assert resolve_output_dir(cfg) == "from_config"
    monkeypatch.setenv("HOMOG_OUT_DIR", "from_env")
    assert resolve_output_dir(cfg) == "from_env"
    assert resolve_output_dir(cfg, "from_flag") == "from_flag"


def test_error_codes_are_module_qualified():
    from errors import EllipticityViolation, NonCauchy, SolverFailure

    assert EllipticityViolation("x").code == "microstructure.EllipticityViolation"
    assert SolverFailure("x").code == "fem.SolverFailure"
    err = NonCauchy("x", record=[{"p": 1}])
    assert isinstance(err, HomogError) and err.record == [{"p": 1}]
    assert err.to_dict()["code"] == "boundary_layer.NonCauchy"


def test_matched_mesh_needs_power_of_two_points():
    text = MINIMAL + "[resolution]\nmesh_points_per_period = 6\n"
    with pytest.raises(ConfigParse) as err:
        parse_config(text)
    assert err.value.details["key"] == "resolution.mesh_points_per_period"
    cfg = parse_config(text + "mesh_matched = false\n")
    assert cfg.resolution.mesh_points_per_period == 6
