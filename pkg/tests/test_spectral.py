import math

import numpy as np
import pytest

from config import PENCIL_SYMMETRY_TOL, SYMMETRY_TOL
from errors import NonPositiveEigenvalue, NonSymmetricPencil
from fem import assemble_constant, triangulate
from spectral import (
    EigenCluster, cluster_containing, cluster_eigenvalues, harmonic_mean_cluster, log_monotone_errors,
    solve_eigenpairs,
)

IDENTITY = np.eye(2).reshape(2, 2, 1, 1)
# two uncoupled copies of the Laplacian: every eigenvalue is exactly double
IDENTITY_PAIR = np.einsum("ab,ij->abij", np.eye(2), np.eye(2))


@pytest.fixture(scope="module")
def coarse_pairs(unit_square):
    mesh = triangulate(unit_square, 1 / 16)
    return solve_eigenpairs(assemble_constant(mesh, IDENTITY), 6, seed=3)


@pytest.fixture(scope="module")
def paired(unit_square):
    mesh = triangulate(unit_square, 1 / 12)
    return solve_eigenpairs(assemble_constant(mesh, IDENTITY_PAIR), 6)


def test_dense_path_is_m_orthonormal(coarse_pairs):
    V, M = coarse_pairs.vectors, coarse_pairs.system.mass
    np.testing.assert_allclose(V.T @ (M @ V), np.eye(coarse_pairs.count), atol=1e-10)
    assert np.all(np.diff(coarse_pairs.values) >= 0)


def test_largest_entry_is_positive(coarse_pairs):
    V = coarse_pairs.vectors
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(V.shape[1])] > 0)


def test_solves_are_deterministic(unit_square, coarse_pairs):
    mesh = triangulate(unit_square, 1 / 16)
    again = solve_eigenpairs(assemble_constant(mesh, IDENTITY), 6, seed=3)
    np.testing.assert_array_equal(again.values, coarse_pairs.values)


def test_count_validated(coarse_pairs):
    with pytest.raises(ValueError):
        solve_eigenpairs(coarse_pairs.system, 0)
    with pytest.raises(ValueError):
        solve_eigenpairs(coarse_pairs.system, 51)


def test_sparse_path_refines_dense_path(unit_square):
    mesh = triangulate(unit_square, 1 / 48)
    system = assemble_constant(mesh, IDENTITY)
    assert system.n_free > 2000
    fine = solve_eigenpairs(system, 3)
    V, M = fine.vectors, system.mass
    np.testing.assert_allclose(V.T @ (M @ V), np.eye(3), atol=1e-10)
    coarse = solve_eigenpairs(assemble_constant(triangulate(unit_square, 1 / 40), IDENTITY), 3).values
    # conforming P1 approximates pi^2 {2, 5, 5} from above
    assert np.all(fine.values > math.pi ** 2 * np.array([2, 5, 5]))
    assert np.all(fine.values < coarse)


def test_cluster_detection():
    vals = [1.0, 2.0, 2.0 + 1e-9, 2.0 + 2e-9, 3.0]
    assert cluster_eigenvalues(vals) == [(0, 1), (1, 4), (4, 5)]
    assert cluster_eigenvalues(vals, cluster_tol=0.0) == [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]
    assert cluster_eigenvalues([]) == []


def test_uncoupled_copies_give_double_clusters(paired):
    assert cluster_eigenvalues(paired.values) == [(0, 2), (2, 4), (4, 6)]


def test_cluster_containing(paired):
    c = cluster_containing(paired, 3)
    assert (c.start, c.multiplicity) == (2, 2)
    assert c.spread < 1e-9
    assert c.nodal(0).shape == (paired.system.mesh.n_nodes, 2)
    with pytest.raises(IndexError):
        cluster_containing(paired, 6)


def test_harmonic_mean():
    assert harmonic_mean_cluster([2.0, 2.0]) == pytest.approx(2.0)
    assert harmonic_mean_cluster([1.0, 3.0]) == pytest.approx(1.5)
    with pytest.raises(NonPositiveEigenvalue):
        harmonic_mean_cluster([1.0, -1.0])


def test_rotated_cluster_stays_orthonormal(paired, rng):
    c = cluster_containing(paired, 0)
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    r = c.rotated(Q)
    M = paired.system.mass
    np.testing.assert_allclose(r.vectors.T @ (M @ r.vectors), np.eye(2), atol=1e-10)
    assert r.harmonic_mean == c.harmonic_mean


def test_growing_error_is_logged(caplog):
    assert log_monotone_errors([0.25, 0.125, 0.0625], [1e-2, 5e-3, 2.6e-3], 0)
    assert not log_monotone_errors([0.25, 0.125], [1e-2, 2e-2], 1)
    assert any("grew" in r.message for r in caplog.records)


def test_pencil_symmetry_tolerance(unit_square, monkeypatch):
    system = assemble_constant(triangulate(unit_square, 1 / 8), IDENTITY)
    assert SYMMETRY_TOL < PENCIL_SYMMETRY_TOL
    # assembly round-off between the tensor and pencil tolerances is accepted
    monkeypatch.setattr(system, "asymmetry", lambda: 0.5 * PENCIL_SYMMETRY_TOL)
    assert solve_eigenpairs(system, 2).count == 2
    monkeypatch.setattr(system, "asymmetry", lambda: 2 * PENCIL_SYMMETRY_TOL)
    with pytest.raises(NonSymmetricPencil):
        solve_eigenpairs(system, 2)


def test_spread_of_a_zero_cluster_is_finite():
    cluster = EigenCluster(np.zeros(2), np.eye(2), 0)
    assert cluster.spread == 0.0
    assert EigenCluster(np.array([2.0, 2.5]), np.eye(2), 0).spread == pytest.approx(0.2)
