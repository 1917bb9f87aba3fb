import json
import math

import numpy as np
import pandas as pd
import pytest

from errors import QuadratureUnderResolved, TargetTooFine
from fem import (
    assemble_constant, assemble_oscillating, boundary_values, export_field_csv, export_field_json, norms,
    recover_gradient, recover_hessian, solve_dirichlet, triangulate,
)
from geometry import build_polygon
from spectral import cluster_eigenvalues, solve_eigenpairs

IDENTITY = np.eye(2).reshape(2, 2, 1, 1)


def test_unit_square_at_half_spacing(unit_square):
    mesh = triangulate(unit_square, 0.5)
    assert mesh.n_nodes == 9
    assert len(mesh.boundary_nodes) == 8
    assert mesh.h == pytest.approx(0.5)
    assert mesh.structure["diagonal"] == 1
    assert mesh.structure["spacing"] == pytest.approx(0.5)
    assert mesh.areas.sum() == pytest.approx(1.0)


def test_node_budget(unit_square):
    with pytest.raises(TargetTooFine) as err:
        triangulate(unit_square, 1e-3, max_nodes=10_000)
    assert err.value.details["budget"] == 10_000


def test_triangle_domain_is_conforming():
    tri = build_polygon([(0, 0), (1, 0), (0.3, 0.8)])
    mesh = triangulate(tri, 0.1)
    assert mesh.areas.min() > 0
    assert mesh.areas.sum() == pytest.approx(tri.area)
    assert mesh.structure is None


def test_linear_data_reproduced(unit_square):
    mesh = triangulate(unit_square, 1 / 8)
    system = assemble_constant(mesh, IDENTITY)
    u = solve_dirichlet(system, None, lambda p: 2 * p[:, 0] - p[:, 1] + 0.5)
    exact = 2 * mesh.nodes[:, 0] - mesh.nodes[:, 1] + 0.5
    np.testing.assert_allclose(u[:, 0], exact, atol=1e-10)


def test_poisson_converges_at_second_order(unit_square):
    def error(h):
        mesh = triangulate(unit_square, h)
        system = assemble_constant(mesh, IDENTITY)
        f = lambda p: 2 * math.pi ** 2 * np.sin(math.pi * p[:, 0]) * np.sin(math.pi * p[:, 1])
        u = solve_dirichlet(system, f)
        exact = np.sin(math.pi * mesh.nodes[:, 0]) * np.sin(math.pi * mesh.nodes[:, 1])
        return norms(u[:, 0] - exact, mesh)[0]

    e1, e2 = error(1 / 16), error(1 / 32)
    assert e1 / e2 > 3.5


def test_dirichlet_laplacian_spectrum(unit_square):
    mesh = triangulate(unit_square, 1 / 64)
    pairs = solve_eigenpairs(assemble_constant(mesh, IDENTITY), 4)
    expected = math.pi ** 2 * np.array([2.0, 5.0, 5.0, 8.0])
    np.testing.assert_allclose(pairs.values, expected, rtol=1e-2)
    # the one-direction diagonal split perturbs the 5 pi^2 pair slightly
    assert cluster_eigenvalues(pairs.values, cluster_tol=1e-2) == [(0, 1), (1, 3), (3, 4)]
    assert pairs.residuals.max() <= 1e-8


def test_norms_of_constant_field(unit_square):
    mesh = triangulate(unit_square, 1 / 4)
    l2, h1, linf = norms(np.ones(mesh.n_nodes), mesh)
    assert l2 == pytest.approx(1.0)
    assert h1 == pytest.approx(0.0, abs=1e-12)
    assert linf == 1.0


def test_gradient_recovery_exact_for_linear_fields(unit_square):
    mesh = triangulate(unit_square, 1 / 8)
    u = 2 * mesh.nodes[:, 0] + 3 * mesh.nodes[:, 1]
    g = recover_gradient(u, mesh)
    np.testing.assert_allclose(g[:, 0], 2.0, atol=1e-12)
    np.testing.assert_allclose(g[:, 1], 3.0, atol=1e-12)


def test_hessian_recovery_in_the_interior(unit_square):
    mesh = triangulate(unit_square, 1 / 16)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    H = recover_hessian(x ** 2 + x * y, mesh)
    inner = (np.minimum.reduce([x, y, 1 - x, 1 - y]) > 3 / 16 + 1e-9)
    np.testing.assert_allclose(H[inner, 0, 0], 2.0, atol=1e-8)
    np.testing.assert_allclose(H[inner, 0, 1], 1.0, atol=1e-8)
    np.testing.assert_allclose(H[inner, 1, 1], 0.0, atol=1e-8)


def test_oscillating_needs_resolution(unit_square, laminate):
    mesh = triangulate(unit_square, 1 / 4)
    with pytest.raises(QuadratureUnderResolved):
        assemble_oscillating(mesh, laminate, 1 / 8)
    system = assemble_oscillating(mesh, laminate, 1 / 8, allow_underresolved=True)
    assert system.n_free == 9


def test_identity_oscillating_equals_constant(unit_square, identity):
    mesh = triangulate(unit_square, 1 / 16)
    osc = assemble_oscillating(mesh, identity, 1 / 4)
    const = assemble_constant(mesh, IDENTITY)
    assert abs(osc.stiffness - const.stiffness).max() <= 1e-12
    assert osc.asymmetry() <= 1e-14


def test_edge_data_averaged_at_corners(unit_square):
    mesh = triangulate(unit_square, 1 / 4)
    g = {k: (lambda p, v=float(k): np.full(len(p), v)) for k in range(4)}
    vals = boundary_values(mesh, g, 1)
    corner = int(np.flatnonzero(np.all(np.isclose(mesh.nodes[mesh.boundary_nodes], [1.0, 0.0]), axis=1))[0])
    assert vals[corner, 0] == pytest.approx(0.5)


def test_export_field_csv(unit_square, tmp_path):
    mesh = triangulate(unit_square, 1 / 2)
    path = tmp_path / "u.csv"
    export_field_csv(np.stack([mesh.nodes[:, 0], mesh.nodes[:, 1]], axis=1), mesh, path)
    df = pd.read_csv(path)
    assert list(df.columns) == ["node_id", "x", "y", "component", "value"]
    assert len(df) == 2 * mesh.n_nodes


def test_export_field_json_resamples_linear_data(tmp_path):
    tri = build_polygon([(0, 0), (1, 0), (0, 1)])
    mesh = triangulate(tri, 0.25)
    u = np.stack([mesh.nodes[:, 0] + 2 * mesh.nodes[:, 1], np.ones(mesh.n_nodes)], axis=1)
    path = tmp_path / "u.json"
    export_field_json(u, mesh, path, resolution=9)
    data = json.loads(path.read_text())
    xs, ys = np.array(data["x"]), np.array(data["y"])
    assert len(xs) == len(ys) == 9 and len(data["components"]) == 2
    first = data["components"][0]
    # rows run over y; the corner (1, 1) lies outside the triangle
    assert first[-1][-1] is None
    assert first[0][-1] == pytest.approx(1.0, abs=1e-12)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            if first[i][j] is not None:
                assert first[i][j] == pytest.approx(x + 2 * y, abs=1e-12)
                assert data["components"][1][i][j] == pytest.approx(1.0, abs=1e-12)
