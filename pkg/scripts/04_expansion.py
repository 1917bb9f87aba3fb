#!/usr/bin/env python3
"""
04_expansion.py - Convergence studies of the multiscale expansion.
"""

import argparse
import logging
import os

from artifacts import (
    load_cell_stage, load_tail_sets, out_path, run_stage, setup_logging, write_json, write_report,
)
from config import DEFAULT_PATHS, load_config, resolve_output_dir
from expansion import (
    ScaleSettings, boundary_layer_study, chi_term_decay, corrector_error_study, prepare_scale, reconstruction_fields,
)
from fem import export_field_csv, export_field_json
from geometry import build_polygon
from microstructure import load_tensor
from plotdata import emit_plotdata
from spectral import solve_eigenpairs

logger = logging.getLogger("04_expansion")


def parse_args():
    p = argparse.ArgumentParser()
    p.add_argument("--config", required=True, help="Experiment TOML")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--jobs", type=int, default=1, help="Parallel eps rows")
    return p.parse_args()


def chi_term_report(cfg, domain, tensor, fine, settings):
    """Decay of the chi term against the lowest homogenized eigenfunction on the finest mesh."""
    ctx = prepare_scale(domain, tensor, cfg.epsilons[-1], fine, None, settings)
    v0 = solve_eigenpairs(ctx.homogenized, 1, cfg.tolerances.eigen, cfg.seed).nodal(0)
    return chi_term_decay(fine.chi_fields, v0, ctx.mesh, cfg.epsilons, settings.phase,
                          cfg.tolerances.slope_margin, cfg.tolerances.clean_residual)


def write_fields(cfg, domain, tensor, fine, matched, settings, out_dir):
    """Nodal CSV and resampled JSON of the order-1 expansion fields at the finest eps."""
    eps = cfg.epsilons[-1]
    mesh, fields = reconstruction_fields(domain, tensor, eps, fine, matched, settings, cfg.study.load)
    fields_dir = os.path.join(out_dir, DEFAULT_PATHS["fields_dir"])
    os.makedirs(fields_dir, exist_ok=True)
    for name, u in fields.items():
        export_field_csv(u, mesh, os.path.join(fields_dir, f"{name}.csv"))
        export_field_json(u, mesh, os.path.join(fields_dir, f"{name}.json"))
    print(f"Saved fields {sorted(fields)} at eps={eps:g} -> {fields_dir}")


def main():
    args = parse_args()
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(cfg, args.out)
    setup_logging(out_dir)

    tensor = load_tensor(cfg.tensor)
    fine, matched = load_cell_stage(out_dir)
    if not cfg.resolution.mesh_matched:
        matched = None
    domain = build_polygon(cfg.domain.vertices)
    settings = ScaleSettings.from_config(cfg)
    study, tol = cfg.study, cfg.tolerances

    reports = []
    if study.corrector_study:
        print(f"Corrector study: order={study.order}, load={study.load}")
        reports += corrector_error_study(domain, tensor, fine, cfg.epsilons, matched, settings, study.load,
                                         study.order, args.jobs, tol.slope_margin, tol.clean_residual)
        write_fields(cfg, domain, tensor, fine, matched, settings, out_dir)
    if study.chi_decay:
        print("Chi-term decay")
        reports.append(chi_term_report(cfg, domain, tensor, fine, settings))
    if study.bl_decay:
        print("Boundary-layer study")
        tails = load_tail_sets(out_dir)
        reports += boundary_layer_study(domain, tensor, fine, {e: tails[e] for e in cfg.epsilons}, matched,
                                        settings, study.load, args.jobs, tol.slope_margin, tol.clean_residual)

    reports_dir = os.path.join(out_dir, DEFAULT_PATHS["reports_dir"])
    plots_dir = os.path.join(out_dir, DEFAULT_PATHS["plots_dir"])
    for report in reports:
        path = write_report(report, reports_dir)
        emit_plotdata(report, plots_dir)
        print(f"Saved {report.quantity} (slope {report.slope:.4f}, pass={report.passed}) -> {path}")

    summary = {
        "order": study.order,
        "load": study.load,
        "reports": {r.quantity: r.passed for r in reports},
        "all_pass": all(r.passed for r in reports),
    }
    write_json(summary, out_path(out_dir, "expansion_summary"))
    print(f"Saved expansion summary -> {out_path(out_dir, 'expansion_summary')}")


if __name__ == "__main__":
    run_stage(main)
