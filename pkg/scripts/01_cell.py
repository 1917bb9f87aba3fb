#!/usr/bin/env python3
"""
01_cell.py - Solve the cell problems and compute the homogenized tensor.
"""

import argparse
import logging

import numpy as np

from artifacts import correctors_meta, out_path, run_stage, setup_logging, write_correctors, write_json
from config import load_config, resolve_output_dir
from fem import triangulate
from geometry import build_polygon
from microstructure import compute_correctors, load_tensor, measured_ellipticity

logger = logging.getLogger("01_cell")


def parse_args():
    p = argparse.ArgumentParser()
    p.add_argument("--config", required=True, help="Experiment TOML")
    p.add_argument("--out", default=None, help="Output directory")
    return p.parse_args()


def mesh_diagonal(cfg):
    """Diagonal of the eps/m lattice mesh at the coarsest eps, or None when the mesh is unstructured."""
    domain = build_polygon(cfg.domain.vertices)
    mesh = triangulate(domain, cfg.epsilons[0] / cfg.resolution.mesh_points_per_period, cfg.resolution.max_nodes)
    return mesh.structure["diagonal"] if mesh.structure else None


def summarize(corr, tensor):
    A0 = corr.homogenized
    N = corr.n_components
    lam0 = measured_ellipticity(A0)
    if lam0 < tensor.ellipticity * (1 - 1e-9):
        logger.warning("A0 ellipticity %.6g below the tensor's constant %.6g", lam0, tensor.ellipticity)
    out = {
        **correctors_meta(corr),
        "homogenized_matrix": A0.transpose(0, 2, 1, 3).reshape(2 * N, 2 * N).tolist(),
        "ellipticity": {
            "claimed": tensor.ellipticity,
            "measured": tensor.measured_ellipticity,
            "homogenized": lam0,
            "preserved": bool(lam0 >= tensor.ellipticity * (1 - 1e-9)),
        },
        "residuals": corr.residuals,
        "zero_means": corr.zero_means(),
    }
    if corr.B is not None:
        out["B"] = corr.B.tolist()
    return out


def main():
    args = parse_args()
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(cfg, args.out)
    setup_logging(out_dir)
    res = cfg.resolution

    print(f"Loading: {args.config}")
    tensor = load_tensor(cfg.tensor)
    print(f"Tensor: {tensor.name}, N={tensor.n_components}, ellipticity={tensor.ellipticity:.6g}")

    fine = compute_correctors(tensor, res.cell_grid, res.cell_rule, res.diagonal, second_order=True,
                              potentials=True, points_per_period=res.quadrature_points, cap=res.quadrature_cap,
                              tol=cfg.tolerances.cell)
    summary = {"tensor": tensor.name, "fine": summarize(fine, tensor), "matched": None}
    shape = write_correctors(fine, out_path(out_dir, "correctors"))
    print(f"Saved correctors {shape} -> {out_path(out_dir, 'correctors')}")

    if res.mesh_matched:
        diagonal = mesh_diagonal(cfg)
        if diagonal is None:
            logger.warning("Domain mesh is not a lattice grid; mesh-matched correctors skipped")
        else:
            m = res.mesh_points_per_period
            matched = compute_correctors(tensor, m, "composite", diagonal, second_order=True, potentials=False,
                                         points_per_period=res.quadrature_points, cap=res.quadrature_cap,
                                         tol=cfg.tolerances.cell)
            summary["matched"] = summarize(matched, tensor)
            shape = write_correctors(matched, out_path(out_dir, "correctors_matched"))
            print(f"Saved matched correctors {shape} -> {out_path(out_dir, 'correctors_matched')}")

    N = fine.n_components
    print("A0 =")
    print(np.array2string(fine.homogenized.transpose(0, 2, 1, 3).reshape(2 * N, 2 * N), precision=12))
    write_json(summary, out_path(out_dir, "cell_summary"))
    print(f"Saved cell summary -> {out_path(out_dir, 'cell_summary')}")


if __name__ == "__main__":
    run_stage(main)
