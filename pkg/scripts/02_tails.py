#!/usr/bin/env python3
"""
02_tails.py - Boundary-layer tails for every edge and direction.
"""

import argparse
import logging
import os

import numpy as np

from artifacts import load_cell_stage, out_path, run_stage, setup_logging, write_csv, write_json
from boundary_layer import StripSettings, compute_tail_set, edge_shift, tail_frame
from config import load_config, resolve_output_dir
from expansion import lattice_matches
from fem import triangulate
from geometry import build_polygon, classify_domain
from microstructure import load_tensor

logger = logging.getLogger("02_tails")


def parse_args():
    p = argparse.ArgumentParser()
    p.add_argument("--config", required=True, help="Experiment TOML")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--jobs", type=int, default=1, help="Parallel strip solves")
    return p.parse_args()


def axis_aligned(domain):
    return all(abs(e.normal[0] * e.normal[1]) < 1e-12 for e in domain.edges)


def on_lattice(domain, eps, phase):
    t = np.asarray(domain.vertices, dtype=float) / eps + np.asarray(phase, dtype=float)
    return bool(np.max(np.abs(t - np.round(t))) <= 1e-9)


def group_epsilons(cfg, domain, matched):
    """[(mode, shifts, [eps, ...])]: one group per distinct (strip mode, edge phases) pair."""
    phase = cfg.tensor.lattice_phase
    m = cfg.resolution.mesh_points_per_period
    groups = {}
    rational = all(e.slope.is_rational for e in domain.edges)
    for eps in cfg.epsilons:
        mode = "continuum"
        if rational and not on_lattice(domain, eps, phase):
            logger.warning("eps=%g: vertices of a rational domain are off the eps lattice", eps)
        if matched is not None:
            mesh = triangulate(domain, eps / m, cfg.resolution.max_nodes)
            if not lattice_matches(mesh, eps, phase, m, matched.diagonal):
                logger.warning("eps=%g: mesh is not on the eps/%d lattice; continuum tails", eps, m)
            elif not axis_aligned(domain):
                logger.warning("eps=%g: mesh-matched strips need axis-aligned edges; continuum tails", eps)
            else:
                mode = "matched"
        shifts = tuple(tuple(np.round(edge_shift(e, eps, phase), 12)) for e in domain.edges)
        groups.setdefault((mode, shifts), []).append(eps)
    return [(mode, shifts, eps_list) for (mode, shifts), eps_list in groups.items()]


def main():
    args = parse_args()
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(cfg, args.out)
    setup_logging(out_dir)

    tensor = load_tensor(cfg.tensor)
    fine, matched = load_cell_stage(out_dir)
    if not cfg.resolution.mesh_matched:
        matched = None

    d = cfg.domain
    domain = classify_domain(build_polygon(d.vertices), d.diophantine_C, d.diophantine_l, d.scan_radius,
                             d.exact_normals)
    groups = group_epsilons(cfg, domain, matched)
    if len(groups) > 1:
        logger.warning("Edge phases or strip modes vary over the eps sweep: %d distinct tail sets", len(groups))

    tails_dir = os.path.join(out_dir, "tails")
    data = {"slopes": [e.slope.to_dict() for e in domain.edges], "groups": [], "flagged": False}
    for g, (mode, shifts, eps_list) in enumerate(groups):
        corr = matched if mode == "matched" else fine
        settings = StripSettings.from_config(cfg, matched if mode == "matched" else None)
        print(f"Tail set {g}: mode={mode}, eps={eps_list}")
        ts = compute_tail_set(tensor, domain, corr.chi_fields, eps_list[0], cfg.tensor.lattice_phase, settings,
                              n_jobs=args.jobs)
        data["groups"].append({"epsilons": eps_list, "mode": mode, "shifts": [list(s) for s in shifts],
                               **ts.to_dict()})
        data["flagged"] = data["flagged"] or ts.flagged
        write_csv(tail_frame(ts), os.path.join(tails_dir, f"tails_g{g}.csv"))
        if g == 0:
            for (k, a), strip in sorted(ts.fields.items()):
                write_csv(strip.to_frame(), os.path.join(tails_dir, f"strip_k{k}_a{a + 1}.csv"))
                fit = ts.fits.get((k, a))
                if fit is not None:
                    write_csv(fit.to_frame(), os.path.join(tails_dir, f"decay_k{k}_a{a + 1}.csv"))

    if data["flagged"]:
        logger.warning("At least one deviation profile failed the decay check")
    write_json(data, out_path(out_dir, "tails"))
    print(f"Saved tails -> {out_path(out_dir, 'tails')}")


if __name__ == "__main__":
    run_stage(main)
