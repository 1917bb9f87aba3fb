import math
import os

import numpy as np
import pytest

from errors import EmptyReport
from expansion import ConvergenceReport
from plotdata import emit_plotdata, safe_name

EPSILONS = (0.25, 0.125, 0.0625)


def test_single_row_has_no_fit_file(tmp_path):
    report = ConvergenceReport.build("reconstruction_h1", [(0.125, 0.02)])
    paths = emit_plotdata(report, str(tmp_path))
    assert "fit" not in paths
    assert not os.path.exists(tmp_path / "reconstruction_h1_fit.dat")
    data = np.loadtxt(paths["data"], ndmin=2)
    assert data.shape == (1, 2)


def test_fit_file_carries_the_slope(tmp_path):
    report = ConvergenceReport.build("homogenization_l2", [(e, 0.7 * e ** 0.8) for e in EPSILONS])
    paths = emit_plotdata(report, str(tmp_path))
    fit = np.loadtxt(paths["fit"])
    slope = math.log(fit[1, 1] / fit[0, 1]) / math.log(fit[1, 0] / fit[0, 0])
    assert slope == pytest.approx(report.slope, abs=1e-12)
    data = np.loadtxt(paths["data"])
    np.testing.assert_array_equal(data[:, 0], report.epsilons)
    np.testing.assert_array_equal(data[:, 1], report.values)


def test_svg_is_reproducible(tmp_path):
    report = ConvergenceReport.build("chi_term", [(e, e ** 2) for e in EPSILONS])
    first = open(emit_plotdata(report, str(tmp_path / "a"))["svg"], "rb").read()
    second = open(emit_plotdata(report, str(tmp_path / "b"))["svg"], "rb").read()
    assert first == second


def test_unicode_names_are_sanitized(tmp_path):
    assert safe_name("λ error / k=0") == "error_k_0"
    assert safe_name("eigenvalue_error_k1") == "eigenvalue_error_k1"
    assert safe_name("λ").startswith("q_")
    report = ConvergenceReport.build("é résidu", [(e, e) for e in EPSILONS])
    paths = emit_plotdata(report, str(tmp_path))
    assert os.path.basename(paths["data"]) == "e_residu.dat"


def test_zero_values_still_plot(tmp_path):
    report = ConvergenceReport.build("bl_tail_subtracted", [(e, 0.0) for e in EPSILONS])
    assert report.at_floor
    paths = emit_plotdata(report, str(tmp_path))
    assert os.path.exists(paths["svg"])


def test_empty_report_rejected(tmp_path):
    report = ConvergenceReport("chi_term", np.array([]), np.array([]))
    with pytest.raises(EmptyReport):
        emit_plotdata(report, str(tmp_path))
