"""
plotdata.py
-----------
Gnuplot-ready data files and SVG quick-look plots for ConvergenceReports.
"""
import hashlib
import logging
import os
import re
import unicodedata

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from errors import EmptyReport  # noqa: E402

logger = logging.getLogger(__name__)

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 4.5
PLOT_PARAMS = {
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "lines.linewidth": 1,
    "lines.markersize": 4,
    "savefig.bbox": "tight",
    # fixed ids so identical reports give byte-identical SVG
    "svg.hashsalt": "homogenization",
    "svg.fonttype": "none",
}


def safe_name(quantity):
    """ASCII file stem for a quantity name; non-alphanumeric runs become '_'."""
    text = unicodedata.normalize("NFKD", str(quantity)).encode("ascii", "ignore").decode("ascii")
    stem = re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_")
    if not stem:
        stem = "q_" + hashlib.sha1(str(quantity).encode("utf-8")).hexdigest()[:12]
    return stem


def _write_columns(path, x, y, header):
    np.savetxt(path, np.column_stack([x, y]), fmt="%.17g", header=header, comments="# ")


def emit_plotdata(report, out_dir):
    """Write <name>.dat (eps, value), <name>_fit.dat when a slope was fitted, and <name>.svg."""
    if len(report.epsilons) == 0:
        raise EmptyReport(f"report {report.quantity!r} has no rows", quantity=report.quantity)
    os.makedirs(out_dir, exist_ok=True)
    stem = safe_name(report.quantity)
    eps = np.asarray(report.epsilons, dtype=float)
    vals = np.asarray(report.values, dtype=float)

    paths = {"data": os.path.join(out_dir, stem + ".dat"), "svg": os.path.join(out_dir, stem + ".svg")}
    header = (f"{report.quantity}\nslope {report.slope!r} claimed {report.claimed!r} floor {report.floor!r} "
              f"pass {report.passed}\nepsilon value")
    _write_columns(paths["data"], eps, vals, header)

    fit_x = None
    if report.has_fit:
        fit_x = np.array([eps.min(), eps.max()])
        paths["fit"] = os.path.join(out_dir, stem + "_fit.dat")
        _write_columns(paths["fit"], fit_x, report.fitted(fit_x),
                       f"{report.quantity} fit\nslope {report.slope!r} intercept {report.intercept!r}")

    with plt.rc_context(PLOT_PARAMS):
        fig, ax = plt.subplots()
        positive = vals > 0
        ax.plot(eps[positive], vals[positive], "o", label=report.quantity)
        if fit_x is not None:
            ax.plot(fit_x, report.fitted(fit_x), "-", label=f"slope {report.slope:.3f}")
        ax.set_xscale("log")
        if positive.any():
            ax.set_yscale("log")
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel(report.quantity)
        ax.legend(loc="best")
        fig.savefig(paths["svg"], format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info("Saved plot data %s -> %s", report.quantity, paths["data"])
    return paths
