#!/usr/bin/env python3
"""
03_spectrum.py - Eigenvalue clusters, their first-order expansion and the Osborn record.
"""

import argparse
import logging
import os

from artifacts import (
    load_cell_stage, load_tail_sets, out_path, run_stage, setup_logging, write_csv, write_json, write_report,
)
from config import DEFAULT_PATHS, load_config, resolve_output_dir
from expansion import ScaleSettings, eigen_expansion_study, osborn_bounded, prepare_scale, rotation_invariance
from geometry import build_polygon
from microstructure import load_tensor
from plotdata import emit_plotdata
from spectral import cluster_containing, solve_eigenpairs

logger = logging.getLogger("03_spectrum")

ROTATION_TOL = 1e-6


def parse_args():
    p = argparse.ArgumentParser()
    p.add_argument("--config", required=True, help="Experiment TOML")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--jobs", type=int, default=1, help="Parallel eps rows")
    return p.parse_args()


def degenerate_rotations(cfg, domain, tensor, fine, matched, tails, settings):
    """Rotation check of sum_j c_j for every requested mode whose cluster is degenerate, at the coarsest eps."""
    eps = cfg.epsilons[0]
    ctx = prepare_scale(domain, tensor, eps, fine, matched, settings)
    pairs0 = solve_eigenpairs(ctx.homogenized, cfg.resolution.eigen_count, cfg.tolerances.eigen, cfg.seed)
    out = []
    for k in cfg.modes:
        cluster = cluster_containing(pairs0, k, cfg.tolerances.cluster)
        if cluster.multiplicity < 2 or cluster.start != k:
            continue
        rel, base, rotated = rotation_invariance(cluster, ctx.homogenized, tails[eps], cfg.seed, settings.solver_tol)
        logger.info("Mode %d (multiplicity %d): sum c_j %.12g -> %.12g after re-basis (rel %.2e)",
                    k, cluster.multiplicity, base, rotated, rel)
        out.append({"mode": k, "epsilon": eps, "multiplicity": cluster.multiplicity, "relative_change": rel,
                    "base": base, "rotated": rotated, "pass": bool(rel <= ROTATION_TOL)})
    return out


def main():
    args = parse_args()
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(cfg, args.out)
    setup_logging(out_dir)

    tensor = load_tensor(cfg.tensor)
    fine, matched = load_cell_stage(out_dir)
    if not cfg.resolution.mesh_matched:
        matched = None
    tails = load_tail_sets(out_dir)
    domain = build_polygon(cfg.domain.vertices)
    settings = ScaleSettings.from_config(cfg)
    tol = cfg.tolerances

    print(f"Eigen study: modes={list(cfg.modes)}, eps={list(cfg.epsilons)}")
    reports, expansions, osborn_rows, spectrum = eigen_expansion_study(
        domain, tensor, fine, {e: tails[e] for e in cfg.epsilons}, cfg.modes, cfg.resolution.eigen_count,
        matched, settings, tol.cluster, tol.eigen, cfg.seed, cfg.study.osborn, args.jobs,
        tol.slope_margin, tol.clean_residual,
    )
    write_csv(spectrum, out_path(out_dir, "spectrum"))
    print(f"Saved spectrum {spectrum.shape} -> {out_path(out_dir, 'spectrum')}")

    reports_dir = os.path.join(out_dir, DEFAULT_PATHS["reports_dir"])
    plots_dir = os.path.join(out_dir, DEFAULT_PATHS["plots_dir"])
    for report in reports:
        path = write_report(report, reports_dir)
        emit_plotdata(report, plots_dir)
        print(f"Saved {report.quantity} (slope {report.slope:.4f}, pass={report.passed}) -> {path}")

    summary = {
        "expansions": [e.to_dict() for e in expansions],
        "reports": {r.quantity: r.passed for r in reports},
        "rotation_invariance": degenerate_rotations(cfg, domain, tensor, fine, matched, tails, settings),
    }
    if cfg.study.osborn:
        summary["osborn"] = osborn_rows
        summary["osborn_bounded"] = osborn_bounded(osborn_rows)
    write_json(summary, out_path(out_dir, "spectrum_summary"))
    print(f"Saved spectrum summary -> {out_path(out_dir, 'spectrum_summary')}")


if __name__ == "__main__":
    run_stage(main)
