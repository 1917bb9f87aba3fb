"""
spectral.py
-----------
Lowest generalized eigenpairs K v = lambda M v of a DiscreteSystem,
eigenvalue clusters and cluster harmonic means.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from config import CLUSTER_TOL, DENSE_EIGEN_MAX_DOFS, EIGEN_RESIDUAL_TOL, MAX_EIGEN_COUNT, PENCIL_SYMMETRY_TOL
from errors import ConvergenceFailure, NonPositiveEigenvalue, NonSymmetricPencil

logger = logging.getLogger(__name__)


@dataclass
class EigenPairs:
    """Ascending eigenpairs on the free DoFs of `system`; columns of `vectors` are M-orthonormal."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    system: object

    @property
    def count(self):
        return len(self.values)

    def nodal(self, k):
        """Eigenvector k as a nodal field (n_nodes, N), zero on the boundary."""
        return self.system.expand(self.vectors[:, k])

    def to_frame(self, epsilon):
        return pd.DataFrame({
            "epsilon": float(epsilon),
            "k": np.arange(self.count),
            "lambda": self.values,
            "residual": self.residuals,
        })


@dataclass
class EigenCluster:
    values: np.ndarray
    vectors: np.ndarray
    start: int
    cluster_tol: float = CLUSTER_TOL
    system: object = None

    @property
    def multiplicity(self):
        return len(self.values)

    @property
    def spread(self):
        return float((self.values[-1] - self.values[0]) / max(abs(self.values[-1]), 1e-300))

    @property
    def harmonic_mean(self):
        return harmonic_mean_cluster(self.values)

    def nodal(self, j):
        return self.system.expand(self.vectors[:, j])

    def rotated(self, Q):
        """Same cluster with the eigenvector basis replaced by vectors @ Q (Q orthogonal)."""
        return EigenCluster(self.values, self.vectors @ Q, self.start, self.cluster_tol, self.system)


def _m_orthonormalize(V, M):
    G = V.T @ (M @ V)
    if np.max(np.abs(G - np.eye(len(G)))) <= 1e-12:
        return V
    L = np.linalg.cholesky(G)
    return scipy.linalg.solve_triangular(L, V.T, lower=True).T


def _fix_signs(V):
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def solve_eigenpairs(system, count, tol=EIGEN_RESIDUAL_TOL, seed=0):
    """First `count` generalized eigenpairs of (K_ff, M_ff), ascending and M-orthonormal."""
    if not 1 <= count <= MAX_EIGEN_COUNT:
        raise ValueError(f"count must be in [1, {MAX_EIGEN_COUNT}], got {count}")
    n = system.n_free
    if count >= n:
        raise ValueError(f"count={count} needs more than {n} free DoFs")
    asym = system.asymmetry()
    if asym > PENCIL_SYMMETRY_TOL:
        raise NonSymmetricPencil(f"stiffness asymmetry {asym:.3e} > {PENCIL_SYMMETRY_TOL:.0e}", asymmetry=asym)
    K, M = system.stiffness, system.mass
    if n <= DENSE_EIGEN_MAX_DOFS:
        values, vectors = scipy.linalg.eigh(K.toarray(), M.toarray(), subset_by_index=[0, count - 1])
    else:
        v0 = np.random.default_rng(seed).standard_normal(n)
        try:
            values, vectors = eigsh(K, k=count, M=M, sigma=0.0, which="LM", v0=v0)
        except ArpackNoConvergence as e:
            found = len(e.eigenvalues)
            raise ConvergenceFailure(
                f"ARPACK converged {found} of {count} eigenpairs; eigenpair {found} failed",
                index=found, converged=found,
            ) from None
    order = np.argsort(values)
    values, vectors = values[order], vectors[:, order]
    vectors = _fix_signs(_m_orthonormalize(vectors, M))
    MV = M @ vectors
    residuals = np.linalg.norm(K @ vectors - MV * values, axis=0) / np.linalg.norm(MV * values, axis=0)
    for k, r in enumerate(residuals):
        if not np.isfinite(r) or r > tol:
            raise ConvergenceFailure(
                f"eigenpair {k} (lambda={values[k]:.10g}) has relative residual {r:.3e} > {tol:.1e}",
                index=k, residual=float(r),
            )
    logger.info("%s: lowest %d eigenvalues %s", system.label or "system", count,
                ", ".join(f"{v:.8g}" for v in values[:min(count, 6)]))
    return EigenPairs(values, vectors, residuals, system)


def cluster_eigenvalues(values, cluster_tol=CLUSTER_TOL):
    """Index ranges (start, stop) of maximal runs with consecutive relative gaps <= cluster_tol."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return []
    clusters, start = [], 0
    for i in range(1, len(values)):
        gap = (values[i] - values[i - 1]) / max(abs(values[i]), 1e-300)
        if not gap <= cluster_tol:
            clusters.append((start, i))
            start = i
    clusters.append((start, len(values)))
    return clusters


def cluster_containing(pairs, k, cluster_tol=CLUSTER_TOL):
    """EigenCluster holding eigenvalue index k."""
    for start, stop in cluster_eigenvalues(pairs.values, cluster_tol):
        if start <= k < stop:
            if stop == pairs.count and pairs.count < pairs.system.n_free:
                logger.warning("Cluster of mode %d reaches the last computed eigenvalue; it may be incomplete", k)
            return EigenCluster(pairs.values[start:stop], pairs.vectors[:, start:stop], start, cluster_tol,
                                pairs.system)
    raise IndexError(f"mode {k} outside the {pairs.count} computed eigenpairs")


def harmonic_mean_cluster(values):
    """[(1/m) sum 1/lambda]^-1."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise ValueError("empty cluster")
    if np.any(values <= 0):
        raise NonPositiveEigenvalue(f"harmonic mean needs positive eigenvalues, got {values.tolist()}")
    return float(len(values) / np.sum(1.0 / values))


def log_monotone_errors(epsilons, errors, k, slack=0.1):
    """Warn when |lambda^eps - lambda^0| grows along a decreasing eps sweep by more than `slack`."""
    ok = True
    for (e0, a), (e1, b) in zip(zip(epsilons, errors), zip(epsilons[1:], errors[1:])):
        if b > a * (1 + slack):
            logger.warning("Eigenvalue error for mode %d grew from %.3e (eps=%g) to %.3e (eps=%g)", k, a, e0, b, e1)
            ok = False
    return ok
