"""
microstructure.py
-----------------
Periodic coefficient tensors A^{ab}_{ij}(y) on the unit torus, the cell
problems for the correctors chi^g and Gamma^{ab}, the homogenized tensor
A0, and the Fourier potentials (stream functions Psi, b with lap b = chi).

Array conventions
    tensor samples   (n, n, 2, 2, N, N)   [y1 index, y2 index, a, b, i, j]
    torus node id    i * n + j            (y1 = i/n, y2 = j/n)
    corrector chi    (2, n*n, N, N)       [gamma, node, k, j]
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from scipy.sparse.linalg import LinearOperator, cg

from config import (
    CELL_GRID, CELL_MAXITER_FACTOR, CELL_RULE, CELL_TOL, PRESET_SAMPLE_GRID,
    QUADRATURE_CAP, QUADRATURE_POINTS_PER_PERIOD, SYMMETRY_TOL, ZERO_MEAN_TOL,
)
from errors import (
    EllipticityViolation, NonConvergence, NonFiniteEntry, NonZeroMean,
    NotDivergenceFree, ResolutionMismatch, SymmetryViolation, TensorRejected,
)
from fem import assemble_tensor_stiffness, element_tensor, p1_gradients, quadrature_level, tensor_load

logger = logging.getLogger(__name__)


# =============================================================================
# PERIODIC TENSORS
# =============================================================================
def _delta(N):
    return np.einsum("ab,ij->abij", np.eye(2), np.eye(N))


class PeriodicTensor:
    """A^{ab}(y) as N x N blocks; analytic presets carry `func`, tabulated ones interpolate bilinearly."""

    def __init__(self, samples, ellipticity, func=None, name="tabulated", symmetric=True, measured=None):
        self.samples = np.asarray(samples, dtype=float)
        self.ellipticity = float(ellipticity)
        self.measured_ellipticity = float(measured if measured is not None else ellipticity)
        self.func = func
        self.name = name
        self.symmetric = symmetric

    @property
    def n_components(self):
        return self.samples.shape[-1]

    @property
    def grid(self):
        return self.samples.shape[0]

    def evaluate(self, y):
        """Blocks (P, 2, 2, N, N) at points y (P, 2), periodic in both directions."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        y = y - np.floor(y)
        if self.func is not None:
            return self.func(y)
        n = self.grid
        s = y * n
        i0 = np.floor(s).astype(np.int64)
        t = s - i0
        i0 %= n
        i1 = (i0 + 1) % n
        S = self.samples
        w = lambda a, b: (a[:, None, None, None, None] * b[:, None, None, None, None])
        return (w(1 - t[:, 0], 1 - t[:, 1]) * S[i0[:, 0], i0[:, 1]]
                + w(t[:, 0], 1 - t[:, 1]) * S[i1[:, 0], i0[:, 1]]
                + w(1 - t[:, 0], t[:, 1]) * S[i0[:, 0], i1[:, 1]]
                + w(t[:, 0], t[:, 1]) * S[i1[:, 0], i1[:, 1]])

    def scaled(self, c):
        func = None if self.func is None else (lambda y, f=self.func: c * f(y))
        return PeriodicTensor(c * self.samples, c * self.ellipticity, func, f"{c:g}*{self.name}",
                              self.symmetric, c * self.measured_ellipticity)

    def mean(self):
        return self.samples.mean(axis=(0, 1))


def _grid_points(n):
    g = np.arange(n) / n
    Y1, Y2 = np.meshgrid(g, g, indexing="ij")
    return np.stack([Y1.ravel(), Y2.ravel()], axis=1)


def _isotropic(a_of_y, N):
    D = _delta(N)
    return lambda y: a_of_y(y)[:, None, None, None, None] * D[None]


def preset_function(name, N=1):
    """Analytic presets: (func, claimed ellipticity constant, N)."""
    if name == "identity":
        return _isotropic(lambda y: np.ones(len(y)), N), 1.0, N
    if name == "laminate":
        return _isotropic(lambda y: 2.0 + np.cos(2 * np.pi * y[:, 0]), N), 1.0 / 3.0, N
    if name == "duplicated":
        return _isotropic(lambda y: 2.0 + np.cos(2 * np.pi * y[:, 0]), 2), 1.0 / 3.0, 2
    if name == "checkerboard":
        return _isotropic(lambda y: 2.0 + np.cos(2 * np.pi * y[:, 0]) * np.cos(2 * np.pi * y[:, 1]), N), 1.0 / 3.0, N
    if name == "constant":
        K = np.array([[2.0, 0.5], [0.5, 1.0]])
        block = np.einsum("ab,ij->abij", K, np.eye(N))
        lo, hi = np.linalg.eigvalsh(K)
        lam = float(min(lo, 1.0 / hi))
        return (lambda y: np.broadcast_to(block, (len(y),) + block.shape).copy()), lam, N
    if name == "coupled":
        C = np.array([[0.0, 0.5], [0.5, 0.0]])
        extra = np.einsum("ab,ij->abij", np.eye(2), C)
        base = _isotropic(lambda y: 2.0 + np.cos(2 * np.pi * y[:, 0]), 2)
        return (lambda y: base(y) + extra[None]), 2.0 / 7.0, 2
    raise ValueError(f"Unknown tensor preset: {name}")


def preset(name, N=1, scale=1.0, grid=PRESET_SAMPLE_GRID):
    func, lam, N = preset_function(name, N)
    samples = func(_grid_points(grid)).reshape(grid, grid, 2, 2, N, N)
    tensor = validate_tensor(samples, lam, func=func, name=name)
    return tensor if scale == 1.0 else tensor.scaled(scale)


def read_tensor_csv(path):
    """Samples (n, n, 2, 2, N, N) from rows alpha,beta,i,j,y1,y2,value (1-based indices)."""
    df = pd.read_csv(path)
    expected = ["alpha", "beta", "i", "j", "y1", "y2", "value"]
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise ValueError(f"Missing required columns in {path}: {missing}")
    n = int(df["y1"].round(12).nunique())
    N = int(df["i"].max())
    if len(df) != n * n * 4 * N * N:
        raise ValueError(f"{path}: expected {n * n * 4 * N * N} rows for a full {n}x{n} grid with N={N}, got {len(df)}")
    i1 = np.rint(df["y1"].to_numpy() * n).astype(np.int64) % n
    i2 = np.rint(df["y2"].to_numpy() * n).astype(np.int64) % n
    samples = np.full((n, n, 2, 2, N, N), np.nan)
    a, b, i, j = (df[c].to_numpy(dtype=np.int64) - 1 for c in ("alpha", "beta", "i", "j"))
    samples[i1, i2, a, b, i, j] = df["value"].to_numpy(dtype=float)
    logger.info("Loaded tabulated tensor %s: grid %d, N=%d", path, n, N)
    return samples


def _as_matrix(samples):
    # (n, n, 2, 2, N, N) -> (n, n, 2N, 2N) with rows (a, i) and columns (b, j)
    n, _, _, _, N, _ = samples.shape
    return samples.transpose(0, 1, 2, 4, 3, 5).reshape(n, n, 2 * N, 2 * N)


def validate_tensor(raw_samples, lam_claim=0.0, func=None, name="tabulated", allow_nonsymmetric=False):
    """Check finiteness, symmetry and ellipticity on every grid point; return a PeriodicTensor."""
    S = np.asarray(raw_samples, dtype=float)
    if S.ndim != 6 or S.shape[0] != S.shape[1] or S.shape[2:4] != (2, 2) or S.shape[4] != S.shape[5]:
        raise ValueError(f"samples must have shape (n, n, 2, 2, N, N), got {S.shape}")
    if S.shape[0] < 4:
        raise ValueError(f"sample grid must be at least 4x4, got {S.shape[0]}")
    violations = []
    finite = np.isfinite(S).all(axis=(2, 3, 4, 5))
    if not finite.all():
        worst = tuple(int(v) for v in np.argwhere(~finite)[0])
        violations.append({"type": NonFiniteEntry, "message": f"non-finite entry at grid point {worst}", "point": worst})
    symmetric = True
    measured = float("nan")
    if finite.all():
        mat = _as_matrix(S)
        asym = np.abs(mat - np.swapaxes(mat, -1, -2)).max(axis=(2, 3))
        tol = SYMMETRY_TOL * max(1.0, float(np.abs(S).max()))
        if asym.max() > tol:
            symmetric = False
            worst = tuple(int(v) for v in np.unravel_index(np.argmax(asym), asym.shape))
            msg = f"A^ab_ij != A^ba_ji: discrepancy {asym.max():.3e} at grid point {worst}"
            if allow_nonsymmetric:
                logger.warning("%s (accepted: non-symmetric tensors are for the corrector study only)", msg)
            else:
                violations.append({"type": SymmetryViolation, "message": msg, "point": worst})
        sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
        eig = np.linalg.eigvalsh(sym)
        lows, highs = eig[..., 0], eig[..., -1]
        measured = float(lows.min())
        claim = lam_claim if lam_claim > 0 else measured
        worst = tuple(int(v) for v in np.unravel_index(np.argmin(lows), lows.shape))
        if measured <= 0 or measured < claim * (1 - 1e-12):
            violations.append({
                "type": EllipticityViolation,
                "message": f"smallest Rayleigh quotient {measured:.6g} < lambda={claim:.6g} at grid point {worst}",
                "point": worst,
            })
        elif claim > 0 and highs.max() > 1.0 / claim * (1 + 1e-12):
            logger.warning("Largest Rayleigh quotient %.6g exceeds 1/lambda=%.6g", highs.max(), 1.0 / claim)
    if violations:
        first = violations[0]["type"] if len(violations) == 1 else TensorRejected
        message = "; ".join(v["message"] for v in violations)
        raise first(message, violations=[{"type": v["type"].__name__, **{k: v[k] for k in ("message", "point")}}
                                         for v in violations])
    claim = lam_claim if lam_claim > 0 else measured
    return PeriodicTensor(S, claim, func, name, symmetric, measured)


def load_tensor(spec):
    """PeriodicTensor from a TensorSpec (preset name or CSV path)."""
    if spec.csv:
        samples = read_tensor_csv(spec.csv)
        tensor = validate_tensor(samples, spec.ellipticity, name=spec.csv, allow_nonsymmetric=spec.allow_nonsymmetric)
    else:
        func, lam, N = preset_function(spec.preset, spec.components)
        samples = func(_grid_points(PRESET_SAMPLE_GRID)).reshape(PRESET_SAMPLE_GRID, PRESET_SAMPLE_GRID, 2, 2, N, N)
        tensor = validate_tensor(samples, spec.ellipticity or lam, func=func, name=spec.preset,
                                 allow_nonsymmetric=spec.allow_nonsymmetric)
    return tensor if spec.scale == 1.0 else tensor.scaled(spec.scale)


# =============================================================================
# TORUS DISCRETIZATION
# =============================================================================
class TorusGrid:
    """Uniform n x n periodic P1 triangulation; squares split along +1: (0,0)-(1,1) or -1: (1,0)-(0,1)."""

    def __init__(self, n, diagonal=1):
        self.n = int(n)
        self.diagonal = int(diagonal)
        n = self.n
        I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        I, J = I.ravel(), J.ravel()
        if diagonal == 1:
            local = [((0, 0), (1, 0), (1, 1)), ((0, 0), (1, 1), (0, 1))]
        else:
            local = [((0, 0), (1, 0), (0, 1)), ((1, 0), (1, 1), (0, 1))]
        tris, verts = [], []
        for tri in local:
            idx = [((I + di) % n) * n + (J + dj) % n for di, dj in tri]
            xy = [np.stack([(I + di) / n, (J + dj) / n], axis=1) for di, dj in tri]
            tris.append(np.stack(idx, axis=1))
            verts.append(np.stack(xy, axis=1))
        self.triangles = np.vstack(tris)
        self.vertices = np.vstack(verts)
        self.grads, self.areas = p1_gradients(self.vertices)

    @property
    def n_nodes(self):
        return self.n * self.n

    @property
    def h(self):
        return 1.0 / self.n


def _project(x, N):
    """Remove the mean of every component (the constant null space of the periodic operator)."""
    v = x.reshape((-1, N) + x.shape[1:])
    return (v - v.mean(axis=0)).reshape(x.shape)


class CellProblem:
    """Assembled periodic operator -div_y A grad_y on a TorusGrid."""

    def __init__(self, tensor, n=CELL_GRID, rule=CELL_RULE, diagonal=1,
                 points_per_period=QUADRATURE_POINTS_PER_PERIOD, cap=QUADRATURE_CAP, tol=CELL_TOL):
        self.tensor = tensor
        self.grid = TorusGrid(n, diagonal)
        self.rule = rule
        self.tol = tol
        self.levels = quadrature_level(math.sqrt(2) / n, points_per_period, cap) if rule == "composite" else 1
        self.coef = element_tensor(tensor, self.grid.vertices, rule, self.levels)
        self.N = tensor.n_components
        self.K = assemble_tensor_stiffness(self.grid.triangles, self.grid.grads, self.grid.areas, self.coef,
                                           self.grid.n_nodes)
        logger.info("Cell problem: n=%d, rule=%s, levels=%d, N=%d, %d DoFs",
                    n, rule, self.levels, self.N, self.K.shape[0])

    def solve(self, rhs):
        """Zero-mean solutions of K x = rhs, one per column of rhs (D, m); returns (x, residuals)."""
        N, K = self.N, self.K
        D = K.shape[0]
        d = K.diagonal()
        op = LinearOperator((D, D), matvec=lambda v: _project(K @ _project(v, N), N))
        prec = LinearOperator((D, D), matvec=lambda v: _project(_project(v, N) / d, N))
        cols = rhs.reshape(D, -1)
        out = np.zeros_like(cols)
        residuals = []
        # typical load entry |A| h^2 |grad phi| times sqrt(D)
        scale = float(np.abs(self.coef).max()) * self.grid.areas[0] * self.grid.n * math.sqrt(D)
        maxiter = CELL_MAXITER_FACTOR * self.grid.n ** 2
        for c in range(cols.shape[1]):
            b = _project(cols[:, c], N)
            bnorm = np.linalg.norm(b)
            if bnorm <= 1e-12 * scale:
                residuals.append(0.0)
                continue
            x, info = cg(op, b, rtol=self.tol, atol=0.0, maxiter=maxiter, M=prec)
            x = _project(x, N)
            res = float(np.linalg.norm(_project(K @ x, N) - b) / bnorm)
            residuals.append(res)
            if info != 0 or res > 10 * self.tol:
                raise NonConvergence(
                    f"cell solve did not converge (info={info}, residual {res:.3e}, budget {maxiter})",
                    residual=res, budget=maxiter,
                )
            out[:, c] = x
        return out.reshape(rhs.shape), residuals

    def element_gradient(self, field):
        """Gradient (E, 2, ...) of a nodal field (n_nodes, ...)."""
        return np.einsum("eax,ea...->ex...", self.grid.grads, field[self.grid.triangles])

    def first_order_rhs(self, gamma):
        # weak form of d_a A^{a gamma}: -sum_T |T| A^{a gamma}_{ij} d_a phi
        flux = -self.coef[:, :, gamma]
        return tensor_load(self.grid.triangles, self.grid.grads, self.grid.areas, flux, self.grid.n_nodes)


def solve_cell_corrector(tensor, gamma, n=CELL_GRID, rule=CELL_RULE, diagonal=1, problem=None, tol=CELL_TOL):
    """chi^gamma as nodal values (n*n, N, N) on the torus grid (gamma is 0-based)."""
    if n & (n - 1):
        raise ValueError(f"cell grid n must be a power of two, got {n}")
    problem = problem or CellProblem(tensor, n, rule, diagonal, tol=tol)
    rhs = problem.first_order_rhs(gamma)
    x, residuals = problem.solve(rhs)
    N = problem.N
    logger.info("chi^%d: residuals %s", gamma + 1, ", ".join(f"{r:.2e}" for r in residuals))
    return x.reshape(problem.grid.n_nodes, N, N)


def _gradient_fields(problem, chi):
    # P[e, d, k, b, j] = delta_{db} delta_{kj} + d_d chi^b_{kj}
    N = problem.N
    grad = np.stack([problem.element_gradient(chi[b]) for b in range(2)], axis=3)
    return grad + _delta(N).transpose(0, 2, 1, 3)[None]


def homogenized_tensor(tensor, chi, problem=None, rule=CELL_RULE, diagonal=1):
    """A0 (2, 2, N, N); energy form for symmetric tensors, direct formula otherwise."""
    n_nodes = np.asarray(chi).shape[1]
    if problem is None:
        n = math.isqrt(n_nodes)
        problem = CellProblem(tensor, n, rule, diagonal)
    if n_nodes != problem.grid.n_nodes:
        raise ResolutionMismatch(
            f"correctors have {n_nodes} nodes, cell grid {problem.grid.n} has {problem.grid.n_nodes}",
            chi_nodes=n_nodes, grid=problem.grid.n,
        )
    P = _gradient_fields(problem, chi)
    w = problem.grid.areas
    direct = np.einsum("e,eagik,egkbj->abij", w, problem.coef, P)
    if not tensor.symmetric:
        return direct, 0.0
    energy = np.einsum("e,edlai,edglk,egkbj->abij", w, P, problem.coef, P)
    gap = float(np.abs(energy - direct).max())
    return energy, gap


def solve_second_corrector(tensor, chi, A0, problem):
    """(B pointwise (E, 2, 2, N, N), Gamma (2, 2, n*n, N, N)).

    Gamma^{ab} solves -div A grad Gamma = B^{ab} - mean(B^{ab}) with
    B^{ab} = A^{ab} + A^{ag} d_g chi^b + d_g(A^{ga} chi^b), the divergence
    term entering weakly.
    """
    grid, N = problem.grid, problem.N
    P = _gradient_fields(problem, chi)
    B = np.einsum("eagik,egkbj->eabij", problem.coef, P)
    Bbar = np.einsum("e,eabij->abij", grid.areas, B)
    chi_el = np.stack([chi[b][grid.triangles].mean(axis=1) for b in range(2)], axis=1)  # (E, b, k, j)
    gamma = np.zeros((2, 2, grid.n_nodes, N, N))
    residuals = {}
    for a in range(2):
        for b in range(2):
            src = grid.areas[:, None, None] / 3.0 * (B[:, a, b] - Bbar[a, b])
            rhs = np.zeros((grid.n_nodes, N, N))
            for v in range(3):
                np.add.at(rhs, grid.triangles[:, v], src)
            flux = np.einsum("egik,ekj->egij", problem.coef[:, :, a], chi_el[:, b])
            rhs = rhs.reshape(-1, N) - tensor_load(grid.triangles, grid.grads, grid.areas, flux, grid.n_nodes)
            x, res = problem.solve(rhs)
            gamma[a, b] = x.reshape(grid.n_nodes, N, N)
            residuals[f"{a + 1}{b + 1}"] = max(res) if res else 0.0
    return B, gamma, residuals


# =============================================================================
# FOURIER POTENTIALS
# =============================================================================
def _wavenumbers(n):
    k = 2 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    nyq = np.zeros((n, n), dtype=bool)
    if n % 2 == 0:
        nyq[n // 2, :] = True
        nyq[:, n // 2] = True
    return K1, K2, nyq


def _bcast(arr, extra):
    return arr.reshape(arr.shape + (1,) * extra)


def perp_gradient(psi):
    """Spectral (-d2 psi, d1 psi) of a periodic grid function (n, n, ...)."""
    psi = np.asarray(psi, dtype=float)
    n, extra = psi.shape[0], psi.ndim - 2
    K1, K2, nyq = _wavenumbers(n)
    P = np.fft.fft2(psi, axes=(0, 1))
    P[nyq] = 0
    v1 = np.fft.ifft2(-1j * _bcast(K2, extra) * P, axes=(0, 1)).real
    v2 = np.fft.ifft2(1j * _bcast(K1, extra) * P, axes=(0, 1)).real
    return np.stack([v1, v2])


def stream_potential(v, div_tol=1e-8, mean_tol=ZERO_MEAN_TOL):
    """Zero-mean psi with perp-gradient equal to v (2, n, n, ...) in the least-squares sense."""
    v = np.asarray(v, dtype=float)
    n, extra = v.shape[1], v.ndim - 3
    scale = max(1.0, float(np.abs(v).max()))
    means = np.abs(v.mean(axis=(1, 2)))
    if means.max() > mean_tol * scale:
        raise NonZeroMean(f"vector field has mean {means.max():.3e}", mean=float(means.max()))
    K1, K2, nyq = _wavenumbers(n)
    V1 = np.fft.fft2(v[0], axes=(0, 1))
    V2 = np.fft.fft2(v[1], axes=(0, 1))
    k1, k2 = _bcast(K1, extra), _bcast(K2, extra)
    div = np.linalg.norm(1j * k1 * V1 + 1j * k2 * V2)
    ref = np.linalg.norm(np.sqrt(k1 ** 2 + k2 ** 2) * np.abs(V1)) + np.linalg.norm(np.sqrt(k1 ** 2 + k2 ** 2) * np.abs(V2))
    rel_div = float(div / ref) if ref > 0 else 0.0
    if div_tol is not None and rel_div > div_tol:
        raise NotDivergenceFree(f"relative divergence {rel_div:.3e} > {div_tol:.1e}", divergence=rel_div)
    k2sum = K1 ** 2 + K2 ** 2
    k2sum[0, 0] = 1.0
    Psi = (1j * k2 * V1 - 1j * k1 * V2) / _bcast(k2sum, extra)
    Psi[0, 0] = 0
    Psi[nyq] = 0
    return np.fft.ifft2(Psi, axes=(0, 1)).real


def chi_potential(chi, mean_tol=ZERO_MEAN_TOL):
    """Zero-mean b with spectral lap b = chi, for grid functions (n, n, ...)."""
    chi = np.asarray(chi, dtype=float)
    n, extra = chi.shape[0], chi.ndim - 2
    mean = np.abs(chi.mean(axis=(0, 1))).max() if chi.size else 0.0
    if mean > mean_tol * max(1.0, float(np.abs(chi).max())):
        raise NonZeroMean(f"chi has mean {mean:.3e}; lap b = chi has no periodic solution", mean=float(mean))
    K1, K2, _ = _wavenumbers(n)
    k2sum = K1 ** 2 + K2 ** 2
    k2sum[0, 0] = 1.0
    X = np.fft.fft2(chi, axes=(0, 1))
    Bh = -X / _bcast(k2sum, extra)
    Bh[0, 0] = 0
    return np.fft.ifft2(Bh, axes=(0, 1)).real


def spectral_laplacian(b):
    b = np.asarray(b, dtype=float)
    K1, K2, _ = _wavenumbers(b.shape[0])
    lap = -_bcast(K1 ** 2 + K2 ** 2, b.ndim - 2) * np.fft.fft2(b, axes=(0, 1))
    return np.fft.ifft2(lap, axes=(0, 1)).real


# =============================================================================
# PERIODIC FIELDS AND CORRECTOR BUNDLES
# =============================================================================
class PeriodicField:
    """P1 interpolant of nodal torus values (n, n, ...) on the same triangulation as the solve."""

    def __init__(self, values, diagonal=1):
        self.values = np.asarray(values, dtype=float)
        self.diagonal = diagonal

    @property
    def n(self):
        return self.values.shape[0]

    def __call__(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n, V = self.n, self.values
        s = (y - np.floor(y)) * n
        i = np.floor(s).astype(np.int64)
        f = s - i
        i %= n
        j = (i + 1) % n
        fx, fy = f[:, 0], f[:, 1]
        v00, v10 = V[i[:, 0], i[:, 1]], V[j[:, 0], i[:, 1]]
        v01, v11 = V[i[:, 0], j[:, 1]], V[j[:, 0], j[:, 1]]
        b = lambda a: a.reshape(a.shape + (1,) * (V.ndim - 2))
        if self.diagonal == 1:
            lower = b(fx >= fy)
            out_a = v00 + b(fx) * (v10 - v00) + b(fy) * (v11 - v10)
            out_b = v00 + b(fy) * (v01 - v00) + b(fx) * (v11 - v01)
        else:
            lower = b(fx + fy <= 1)
            out_a = v00 + b(fx) * (v10 - v00) + b(fy) * (v01 - v00)
            out_b = v11 + b(1 - fx) * (v01 - v11) + b(1 - fy) * (v10 - v11)
        return np.where(lower, out_a, out_b)


@dataclass
class CellCorrectors:
    """Torus solutions on n x n nodes; arrays are (..., n*n, N, N).

    chi[g], gamma2[a, b] and b_matrix[g] are nodal. stream[b] samples Psi at the
    square centres ((i + 1/2)/n, (j + 1/2)/n); its perp-gradient is the
    flux A(e_b + grad chi^b) - A0 e_b row by row.
    """

    tensor_name: str
    n: int
    rule: str
    diagonal: int
    levels: int
    chi: np.ndarray
    homogenized: np.ndarray
    gamma2: np.ndarray = None
    b_matrix: np.ndarray = None
    stream: np.ndarray = None
    B: np.ndarray = None
    residuals: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return self.n

    @property
    def n_components(self):
        return self.chi.shape[-1]

    def grid_values(self, arr):
        return arr.reshape((self.n, self.n) + arr.shape[1:])

    @cached_property
    def chi_fields(self):
        return [PeriodicField(self.grid_values(self.chi[g]), self.diagonal) for g in range(2)]

    @cached_property
    def gamma_fields(self):
        if self.gamma2 is None:
            return None
        return [[PeriodicField(self.grid_values(self.gamma2[a, b]), self.diagonal) for b in range(2)] for a in range(2)]

    def zero_means(self):
        out = {"chi": float(np.abs(self.chi.mean(axis=1)).max())}
        if self.gamma2 is not None:
            out["gamma2"] = float(np.abs(self.gamma2.mean(axis=2)).max())
        return out


def _element_flux_on_squares(problem, chi, A0):
    # flux F[d, l, b, j] = A^{dg}_{lk}(delta + d_g chi^b_{kj}) - A0^{db}_{lj}, averaged per grid square
    P = _gradient_fields(problem, chi)
    F = np.einsum("edglk,egkbj->edlbj", problem.coef, P) - A0.transpose(0, 2, 1, 3)[None]
    n = problem.grid.n
    half = len(F) // 2
    sq = 0.5 * (F[:half] + F[half:])
    return sq.reshape((n, n) + sq.shape[1:])


def compute_correctors(tensor, n=CELL_GRID, rule=CELL_RULE, diagonal=1, second_order=True, potentials=True,
                       points_per_period=QUADRATURE_POINTS_PER_PERIOD, cap=QUADRATURE_CAP, tol=CELL_TOL):
    """Solve both first-order cell problems and derive A0, Gamma, b and Psi."""
    problem = CellProblem(tensor, n, rule, diagonal, points_per_period, cap, tol)
    N = problem.N
    chi = np.stack([solve_cell_corrector(tensor, g, problem=problem) for g in range(2)])
    A0, gap = homogenized_tensor(tensor, chi, problem)
    if tensor.symmetric:
        A0 = 0.5 * (A0 + A0.transpose(1, 0, 3, 2))
    result = CellCorrectors(tensor.name, n, rule, diagonal, problem.levels, chi, A0)
    result.residuals["galerkin_gap"] = gap
    result.residuals["chi"] = float(max(_residual_norms(problem, chi)))
    if second_order:
        B, gamma, res = solve_second_corrector(tensor, chi, A0, problem)
        result.B, result.gamma2 = B, gamma
        result.residuals["gamma2"] = float(max(res.values()))
    if potentials:
        grid_chi = result.grid_values(chi.transpose(1, 0, 2, 3))  # (n, n, g, k, j)
        result.b_matrix = np.moveaxis(chi_potential(grid_chi), 2, 0).reshape(2, n * n, N, N)
        flux = _element_flux_on_squares(problem, chi, A0)  # (n, n, d, l, b, j)
        v = np.moveaxis(flux, 2, 0)
        v = v - v.mean(axis=(1, 2), keepdims=True)
        psi = stream_potential(v, div_tol=None)  # (n, n, l, b, j)
        result.stream = np.moveaxis(psi, 3, 0).reshape(2, n * n, N, N)
        recon = perp_gradient(psi)
        result.residuals["stream"] = float(np.linalg.norm(recon - v) / max(np.linalg.norm(v), 1e-300))
    logger.info("A0 =\n%s", np.array2string(A0.transpose(0, 2, 1, 3).reshape(2 * N, 2 * N), precision=12))
    return result


def _residual_norms(problem, chi):
    out = []
    for g in range(2):
        rhs = problem.first_order_rhs(g)
        r = _project(problem.K @ chi[g].reshape(-1, problem.N) - rhs, problem.N)
        out.append(float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300)) if np.any(rhs) else float(np.linalg.norm(r)))
    return out


def measured_ellipticity(A0):
    N = A0.shape[-1]
    mat = A0.transpose(0, 2, 1, 3).reshape(2 * N, 2 * N)
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])


def correctors_frame(corr):
    """Long-format table of grid samples: field, g1, g2, k, j, y1, y2, value."""
    n = corr.n
    g = np.arange(n) / n
    Y1, Y2 = np.meshgrid(g, g, indexing="ij")
    frames = []

    def add(name, idx, values, shift=0.0):
        vals = values.reshape(n * n, -1)
        N = corr.n_components
        k, j = np.divmod(np.arange(vals.shape[1]), N)
        frames.append(pd.DataFrame({
            "field": name,
            "a": idx[0], "b": idx[1],
            "y1": np.repeat(Y1.ravel() + shift, vals.shape[1]),
            "y2": np.repeat(Y2.ravel() + shift, vals.shape[1]),
            "k": np.tile(k, n * n), "j": np.tile(j, n * n),
            "value": vals.ravel(),
        }))

    for a in range(2):
        add("chi", (a, -1), corr.chi[a])
        if corr.b_matrix is not None:
            add("b", (a, -1), corr.b_matrix[a])
        if corr.stream is not None:
            add("psi", (a, -1), corr.stream[a], shift=0.5 / n)
        if corr.gamma2 is not None:
            for b in range(2):
                add("gamma", (a, b), corr.gamma2[a, b])
    return pd.concat(frames, ignore_index=True)


def correctors_from_frame(df, meta):
    """Inverse of correctors_frame, with metadata from the cell summary."""
    n, N = int(meta["n"]), int(meta["n_components"])

    def grab(name, a, b=-1):
        sub = df[(df["field"] == name) & (df["a"] == a) & (df["b"] == b)]
        if sub.empty:
            return None
        sub = sub.sort_values(["y1", "y2", "k", "j"], kind="mergesort")
        return sub["value"].to_numpy().reshape(n * n, N, N)

    chi = np.stack([grab("chi", a) for a in range(2)])
    corr = CellCorrectors(meta["tensor"], n, meta["rule"], int(meta["diagonal"]), int(meta["levels"]), chi,
                          np.asarray(meta["homogenized"], dtype=float))
    if grab("gamma", 0, 0) is not None:
        corr.gamma2 = np.stack([np.stack([grab("gamma", a, b) for b in range(2)]) for a in range(2)])
    if grab("b", 0) is not None:
        corr.b_matrix = np.stack([grab("b", a) for a in range(2)])
    if grab("psi", 0) is not None:
        corr.stream = np.stack([grab("psi", a) for a in range(2)])
    return corr
