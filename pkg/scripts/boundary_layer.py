"""
boundary_layer.py
-----------------
Half-space boundary-layer systems per edge and direction, their constant
tails V^{k,a,*}, and the homogenized / oscillating boundary-layer solves
on the polygon.

Strip coordinates: y = M z + s with M = rotation_to_halfspace(n), so the
bottom z2 = 0 is the edge line in cell units and z2 grows into the domain.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.sparse.linalg import splu

from config import (
    CAUCHY_TOL, CONVERGENT_DEPTH, DECAY_MONOTONE_SLACK, MAX_STRIP_PERIOD, MESH_POINTS_PER_PERIOD,
    MIN_STRIP_POINTS, QUADRATURE_CAP, QUADRATURE_POINTS_PER_PERIOD, SOLVER_TOL, STRIP_HEIGHT_PERIODS, TAIL_WINDOW,
)
from errors import (
    MissingTail, NoDecay, NonCauchy, NotRational, StripNonConvergence, UnresolvedCell, UnresolvedOscillation,
)
from fem import (
    assemble_tensor_stiffness, boundary_values, element_tensor, p1_gradients, quadrature_level,
    recover_gradient, solve_dirichlet,
)
from geometry import SlopeClass, normal_convergents, rotation_to_halfspace

logger = logging.getLogger(__name__)

STRIP_RESIDUAL_TOL = 1e-9
NOISE_FLOOR = 1e-11


# =============================================================================
# STRIP PROBLEMS
# =============================================================================
@dataclass(frozen=True)
class StripSettings:
    height_periods: float = STRIP_HEIGHT_PERIODS
    points_per_unit: int = MIN_STRIP_POINTS
    min_points: int = MIN_STRIP_POINTS
    rule: str = "composite"
    levels: int = 0  # 0 derives the level from the element size
    diagonal: int = 1
    window: float = TAIL_WINDOW
    strict: bool = False
    depth: int = CONVERGENT_DEPTH
    max_strip_period: float = MAX_STRIP_PERIOD
    cauchy_tol: float = CAUCHY_TOL
    phase_samples: int = 0
    allow_undetermined: bool = False

    @classmethod
    def from_config(cls, cfg, matched=None):
        """Strip settings for an ExperimentConfig; `matched` is the m-grid CellCorrectors or None."""
        r, t = cfg.resolution, cfg.tolerances
        common = dict(
            height_periods=r.strip_height_periods, window=r.tail_window, depth=r.convergent_depth,
            max_strip_period=r.max_strip_period, cauchy_tol=t.cauchy, phase_samples=t.phase_samples,
            allow_undetermined=cfg.domain.allow_undetermined,
        )
        if matched is None:
            return cls(points_per_unit=r.strip_points_per_unit, **common)
        return cls.matched(r.mesh_points_per_period, matched.levels, matched.diagonal, **common)

    @classmethod
    def matched(cls, m, levels, diagonal, **kwargs):
        """Strip on the same discrete medium as a lattice-aligned mesh with m points per period."""
        return cls(points_per_unit=m, min_points=m, rule="composite", levels=levels, diagonal=diagonal, **kwargs)


def _matched_diagonal(M, diagonal):
    # z-diagonal whose image under M runs along the lattice diagonal of the mesh
    for dz in (1, -1):
        d = M @ np.array([1.0, dz])
        if np.sign(d[0] * d[1]) == diagonal:
            return dz
    return diagonal


class StripProblem:
    """Structured P-periodic strip T_P x (0, L) for an edge with rational normal (p, q)."""

    def __init__(self, tensor, slope, shift=(0.0, 0.0), settings=StripSettings()):
        if not slope.is_rational:
            raise NotRational(f"strip solver needs a rational normal, got {slope.kind}", slope=slope.to_dict())
        if settings.points_per_unit < settings.min_points:
            raise UnresolvedCell(
                f"{settings.points_per_unit} points per unit length < {settings.min_points}",
                points=settings.points_per_unit,
            )
        if settings.height_periods < 10:
            raise ValueError(f"strip height must be at least 10 periods, got {settings.height_periods}")
        self.tensor = tensor
        self.slope = slope
        self.settings = settings
        self.P = slope.period
        self.L = settings.height_periods * self.P
        self.normal = np.array([slope.p, slope.q], dtype=float) / self.P
        self.M = rotation_to_halfspace(self.normal)
        self.shift = np.asarray(shift, dtype=float)
        self.n1 = max(1, math.ceil(self.P * settings.points_per_unit - 1e-9))
        self.h1 = self.P / self.n1
        self.n2 = max(1, math.ceil(self.L / self.h1 - 1e-9))
        self.h2 = self.L / self.n2
        self.N = tensor.n_components
        # a fixed quadrature level marks a mesh-matched strip
        diagonal = _matched_diagonal(self.M, settings.diagonal) if settings.levels else 1
        self._build(diagonal)

    @property
    def z1(self):
        return np.arange(self.n1) * self.h1

    @property
    def z2(self):
        return np.arange(self.n2 + 1) * self.h2

    def to_y(self, z):
        return np.asarray(z, dtype=float) @ self.M.T + self.shift

    def _build(self, diagonal):
        n1, n2 = self.n1, self.n2
        R, C = np.meshgrid(np.arange(n2), np.arange(n1), indexing="ij")
        R, C = R.ravel(), C.ravel()
        if diagonal == 1:
            local = [((0, 0), (1, 0), (1, 1)), ((0, 0), (1, 1), (0, 1))]
        else:
            local = [((0, 0), (1, 0), (0, 1)), ((1, 0), (1, 1), (0, 1))]
        tris, verts = [], []
        for tri in local:
            tris.append(np.stack([(R + dr) * n1 + (C + dc) % n1 for dc, dr in tri], axis=1))
            verts.append(np.stack([np.stack([(C + dc) * self.h1, (R + dr) * self.h2], axis=1) for dc, dr in tri], axis=1))
        self.triangles = np.vstack(tris)
        verts_y = self.to_y(np.vstack(verts))
        grads, areas = p1_gradients(verts_y)
        levels = self.settings.levels or quadrature_level(
            math.hypot(self.h1, self.h2), QUADRATURE_POINTS_PER_PERIOD, QUADRATURE_CAP)
        coef = element_tensor(self.tensor, verts_y, self.settings.rule, levels)
        self.n_nodes = n1 * (n2 + 1)
        self.K = assemble_tensor_stiffness(self.triangles, grads, areas, coef, self.n_nodes)
        nb = n1 * self.N
        self.K_ff = self.K[nb:, nb:].tocsc()
        self.K_fb = self.K[nb:, :nb].tocsr()
        self._lu = None
        logger.info("Strip (p, q)=(%d, %d): P=%.4f L=%.2f grid %dx%d, %d DoFs",
                    self.slope.p, self.slope.q, self.P, self.L, n1, n2 + 1, self.K_ff.shape[0])

    def rotated_tensor(self, z):
        """A(M z + s) in strip components: M^T-rotated blocks (P, 2, 2, N, N)."""
        A = self.tensor.evaluate(self.to_y(np.atleast_2d(z)))
        return np.einsum("ga,db,pgdij->pabij", self.M, self.M, A)

    def bottom_points(self):
        return self.to_y(np.stack([self.z1, np.zeros(self.n1)], axis=1))

    def bottom_data(self, data):
        """Bottom trace (n1, N, N) of a periodic field, a callable of y, or a constant matrix."""
        if callable(data):
            vals = np.asarray(data(self.bottom_points()), dtype=float)
        else:
            vals = np.broadcast_to(np.asarray(data, dtype=float), (self.n1, self.N, self.N))
        return vals.reshape(self.n1, self.N, self.N)

    def solve(self, bottom):
        """Field (n2+1, n1, N, N) with the given bottom trace; Neumann closure at z2 = L."""
        N = self.N
        G = bottom.reshape(self.n1 * N, N)
        rhs = -(self.K_fb @ G)
        if not np.any(rhs):
            X = np.zeros_like(rhs)
        else:
            if self._lu is None:
                self._lu = splu(self.K_ff)
            X = self._lu.solve(rhs)
            res = float(np.linalg.norm(self.K_ff @ X - rhs) / np.linalg.norm(rhs))
            if not np.isfinite(res) or res > STRIP_RESIDUAL_TOL:
                raise StripNonConvergence(f"strip residual {res:.3e} > {STRIP_RESIDUAL_TOL:.0e}", residual=res)
        values = np.vstack([G, X]).reshape(self.n2 + 1, self.n1, N, N)
        return values


@dataclass
class StripField:
    values: np.ndarray  # (n2+1, n1, N, N)
    z1: np.ndarray
    z2: np.ndarray
    P: float
    L: float

    def to_frame(self):
        n2p, n1, N, _ = self.values.shape
        Z2, Z1 = np.meshgrid(self.z2, self.z1, indexing="ij")
        flat = self.values.reshape(n2p * n1, N * N)
        return pd.DataFrame({
            "z1": np.repeat(Z1.ravel(), N * N),
            "z2": np.repeat(Z2.ravel(), N * N),
            "component": np.tile(np.arange(N * N), n2p * n1),
            "value": flat.ravel(),
        })


def solve_strip(problem, data):
    """Boundary-layer field on the strip for bottom data (PeriodicField, callable of y, or constant)."""
    values = problem.solve(problem.bottom_data(data))
    return StripField(values, problem.z1, problem.z2, problem.P, problem.L)


# =============================================================================
# TAILS
# =============================================================================
@dataclass
class DecayFit:
    heights: np.ndarray
    profile: np.ndarray
    rate: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    monotone: bool = True
    lateral_spread: float = 0.0
    noise_floor: float = 0.0
    flagged: bool = False

    def to_dict(self):
        return {
            "rate": self.rate, "intercept": self.intercept, "r2": self.r2, "monotone": self.monotone,
            "lateral_spread": self.lateral_spread, "noise_floor": self.noise_floor, "flagged": self.flagged,
            "sup_deviation_bottom": float(self.profile[0]) if len(self.profile) else 0.0,
        }

    def to_frame(self):
        return pd.DataFrame({"z2": self.heights, "sup_deviation": self.profile})


def extract_tail(strip, window=TAIL_WINDOW, strict=False, slack=DECAY_MONOTONE_SLACK):
    """(V*, DecayFit): z1-and-window average near the top, plus the deviation profile and its exponential fit."""
    if not 0 < window <= 0.5:
        raise ValueError(f"averaging window must lie in the upper half of the strip, got {window}")
    V, z2 = strip.values, strip.z2
    top = z2 >= (1 - window) * strip.L - 1e-12
    tail = V[top].mean(axis=(0, 1))
    lateral = float(np.abs(V[top] - V[top].mean(axis=1, keepdims=True)).max())
    profile = np.abs(V - tail).max(axis=(1, 2, 3))
    floor = NOISE_FLOOR * max(1.0, float(np.abs(V).max()))
    fit = DecayFit(z2, profile, lateral_spread=lateral, noise_floor=floor)

    above = profile > floor
    # non-increasing with relative slack, ignoring what is already below the noise floor
    bad = (profile[1:] > profile[:-1] * (1 + slack) + floor) & above[1:]
    fit.monotone = not bool(np.any(bad))
    use = above & (z2 <= 0.5 * strip.L)
    if use.sum() >= 3:
        slope, intercept = np.polyfit(z2[use], np.log(profile[use]), 1)
        pred = slope * z2[use] + intercept
        ss_res = float(np.sum((np.log(profile[use]) - pred) ** 2))
        ss_tot = float(np.sum((np.log(profile[use]) - np.log(profile[use]).mean()) ** 2))
        fit.rate, fit.intercept = float(-slope), float(intercept)
        fit.r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    failed = not fit.monotone or (np.isfinite(fit.rate) and fit.rate <= 0)
    if failed:
        msg = f"deviation profile does not decay (monotone={fit.monotone}, rate={fit.rate:.4g})"
        if strict:
            raise NoDecay(msg, rate=fit.rate, monotone=fit.monotone)
        logger.warning(msg)
        fit.flagged = True
    return tail, fit


def diophantine_tail(tensor, data, normal, shift=(0.0, 0.0), settings=StripSettings(), depth=None):
    """Tails along the convergent normals of an irrational edge.

    `data` is one bottom field or a list of them; the returned tail(s) are
    those of the last usable convergent. The record lists every convergent's
    tails for the Cauchy judgment.
    """
    single = not isinstance(data, (list, tuple))
    fields = [data] if single else list(data)
    depth = depth or settings.depth
    record = []
    for p, q in normal_convergents(normal, depth):
        slope = SlopeClass("rational", p=p, q=q)
        if slope.period > settings.max_strip_period:
            logger.info("Skipping convergent (%d, %d): period %.3f > %.3f", p, q, slope.period,
                        settings.max_strip_period)
            continue
        problem = StripProblem(tensor, slope, shift, settings)
        tails = [extract_tail(solve_strip(problem, f), settings.window)[0] for f in fields]
        record.append({"p": p, "q": q, "period": slope.period, "tails": [t.tolist() for t in tails]})
    if not record:
        raise NonCauchy(f"no convergent of {tuple(normal)} has period <= {settings.max_strip_period}", record=record)
    diffs = []
    for a, b in zip(record, record[1:]):
        diffs.append(float(max(np.abs(np.subtract(x, y)).max() for x, y in zip(a["tails"], b["tails"]))))
    for r, d in zip(record[1:], diffs):
        r["difference"] = d
    if diffs and diffs[-1] > settings.cauchy_tol:
        raise NonCauchy(
            f"successive convergent tails differ by {diffs[-1]:.3e} > {settings.cauchy_tol:.1e} "
            f"(differences {', '.join(f'{d:.2e}' for d in diffs)})",
            record=record,
        )
    last = [np.asarray(t) for t in record[-1]["tails"]]
    return (last[0] if single else last), record


def edge_shift(edge, eps, phase=(0.0, 0.0)):
    """Lattice phase of an edge: its start point in cell units, modulo 1."""
    s = np.asarray(edge.start, dtype=float) / eps + np.asarray(phase, dtype=float)
    s = s - np.floor(s)
    return np.where(np.abs(s - 1.0) < 1e-12, 0.0, s)


def phase_sweep(tensor, slope, data, shift, settings=StripSettings(), samples=4):
    """Tails at `samples` normal offsets spanning one lattice phase period 1/P; returns (tails, spread)."""
    normal = np.array([slope.p, slope.q], dtype=float) / slope.period
    tails = []
    for t in range(samples):
        s = np.asarray(shift, dtype=float) + t / (samples * slope.period) * normal
        problem = StripProblem(tensor, slope, s, settings)
        tails.append(extract_tail(solve_strip(problem, data), settings.window)[0])
    spread = float(max(np.abs(t - tails[0]).max() for t in tails))
    return tails, spread


@dataclass
class TailSet:
    tails: dict = field(default_factory=dict)  # (k, a) -> (N, N)
    fits: dict = field(default_factory=dict)   # (k, a) -> DecayFit | None
    methods: dict = field(default_factory=dict)  # k -> method name
    records: dict = field(default_factory=dict)  # k -> convergent record
    spreads: dict = field(default_factory=dict)  # k -> phase-sweep spread
    fields: dict = field(default_factory=dict)   # (k, a) -> StripField

    @property
    def flagged(self):
        return any(f is not None and f.flagged for f in self.fits.values())

    def tail(self, k, a):
        try:
            return self.tails[(k, a)]
        except KeyError:
            raise MissingTail(f"no tail for edge {k}, direction {a + 1}", edge=k, direction=a + 1) from None

    def to_dict(self):
        edges = sorted({k for k, _ in self.tails})
        return {
            "edges": [
                {
                    "edge": k,
                    "method": self.methods.get(k),
                    "tails": [self.tails[(k, a)].tolist() for a in range(2) if (k, a) in self.tails],
                    "decay": [self.fits[(k, a)].to_dict() if self.fits.get((k, a)) else None
                              for a in range(2) if (k, a) in self.tails],
                    "phase_spread": self.spreads.get(k),
                    "record": self.records.get(k),
                }
                for k in edges
            ],
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, data):
        ts = cls()
        for entry in data["edges"]:
            k = entry["edge"]
            for a, t in enumerate(entry["tails"]):
                ts.tails[(k, a)] = np.asarray(t, dtype=float)
            ts.methods[k] = entry.get("method")
            if entry.get("record"):
                ts.records[k] = entry["record"]
            if entry.get("phase_spread") is not None:
                ts.spreads[k] = entry["phase_spread"]
        return ts


def _edge_job(tensor, chi_fields, k, edge, shift, settings):
    slope = edge.slope
    out = {"k": k, "tails": {}, "fits": {}, "fields": {}, "record": None, "spread": None}
    if slope.is_rational:
        problem = StripProblem(tensor, slope, shift, settings)
        for a, chi in enumerate(chi_fields):
            strip = solve_strip(problem, chi)
            out["tails"][a], out["fits"][a] = extract_tail(strip, settings.window, settings.strict)
            out["fields"][a] = strip
        out["method"] = "strip-rational"
        if settings.phase_samples:
            spreads = [phase_sweep(tensor, slope, chi, shift, settings, settings.phase_samples)[1] for chi in chi_fields]
            out["spread"] = float(max(spreads))
        return out
    if slope.kind == "undetermined" and not settings.allow_undetermined:
        raise NotRational(
            f"edge {k} normal {edge.normal} is neither rational nor certified diophantine "
            f"(worst divisor {slope.worst_divisor:.3e} at xi={slope.failing_xi}); set domain.allow_undetermined",
            edge=k,
        )
    tails, record = diophantine_tail(tensor, list(chi_fields), edge.normal, shift, settings)
    for a, t in enumerate(tails):
        out["tails"][a], out["fits"][a] = t, None
    out["record"] = record
    out["method"] = "convergent-extrapolated"
    return out


def compute_tail_set(tensor, domain, chi_fields, eps, phase=(0.0, 0.0), settings=StripSettings(), n_jobs=1):
    """Tails for every edge and direction at the lattice phase of `eps`."""
    jobs = [(k, e, edge_shift(e, eps, phase)) for k, e in enumerate(domain.edges)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_edge_job)(tensor, chi_fields, k, e, s, settings) for k, e, s in jobs
    )
    ts = TailSet()
    for r in results:
        k = r["k"]
        ts.methods[k] = r["method"]
        for a, t in r["tails"].items():
            ts.tails[(k, a)] = np.asarray(t)
            ts.fits[(k, a)] = r["fits"][a]
        ts.fields.update({(k, a): f for a, f in r["fields"].items()})
        if r["record"] is not None:
            ts.records[k] = r["record"]
        if r["spread"] is not None:
            ts.spreads[k] = r["spread"]
    return ts


# =============================================================================
# BOUNDARY-LAYER PROBLEMS ON THE POLYGON
# =============================================================================
def edge_averaged(mesh, values_on_edge, N):
    """Boundary data (n_boundary, N) from per-edge values; nodes on two edges take the mean."""
    nb = len(mesh.boundary_nodes)
    acc = np.zeros((nb, N))
    count = np.zeros(nb)
    for k in range(mesh.on_edge.shape[1]):
        rows = np.flatnonzero(mesh.on_edge[:, k])
        if len(rows):
            acc[rows] += values_on_edge(k, rows)
            count[rows] += 1
    return acc / np.maximum(count, 1)[:, None]


def homogenized_bl_data(mesh, tails, u0):
    """-sum_a V^{k,a,*} d_a u0 on each edge k, from the recovered gradient of u0 (n_nodes, N)."""
    grad = recover_gradient(u0, mesh)[mesh.boundary_nodes]  # (nb, 2, N)
    N = grad.shape[-1]
    for k in range(mesh.on_edge.shape[1]):
        for a in range(2):
            tails.tail(k, a)
    return edge_averaged(
        mesh, lambda k, rows: -sum(grad[rows, a] @ tails.tail(k, a).T for a in range(2)), N
    )


def solve_homogenized_bl(system, tails, u0, tol=SOLVER_TOL):
    """theta*_bl: A0 problem with zero load and Dirichlet data -V^{k,a,*} d_a u0 on edge k."""
    g = homogenized_bl_data(system.mesh, tails, u0)
    return solve_dirichlet(system, None, g, tol)


def oscillating_trace(mesh, fields, u0, eps, phase=(0.0, 0.0), subtract=None):
    """-sum_a (chi^a(x/eps + phase) - V^{k,a,*}) d_a u0 at the boundary nodes.

    With `subtract=None` the plain corrector trace is returned; with a TailSet
    the tails of each edge are removed edge by edge.
    """
    pts = mesh.nodes[mesh.boundary_nodes]
    y = pts / eps + np.asarray(phase, dtype=float)
    grad = recover_gradient(u0, mesh)[mesh.boundary_nodes]
    chi = [f(y) for f in fields]  # (nb, N, N)
    N = grad.shape[-1]
    if subtract is None:
        return -sum(np.einsum("pij,pj->pi", chi[a], grad[:, a]) for a in range(2))
    return edge_averaged(
        mesh,
        lambda k, rows: -sum(np.einsum("pij,pj->pi", chi[a][rows] - subtract.tail(k, a), grad[rows, a])
                             for a in range(2)),
        N,
    )


def solve_oscillating_bl(system, eps, g, min_points=MESH_POINTS_PER_PERIOD, tol=SOLVER_TOL):
    """Dirichlet solve of the oscillating operator with zero load and boundary data g.

    g is anything fem.boundary_values accepts; callables receive boundary
    points x and typically evaluate Phi(x/eps) g(x).
    """
    mesh = system.mesh
    if mesh.h * min_points > eps * (1 + 1e-9):
        raise UnresolvedOscillation(
            f"mesh h={mesh.h:.4g} gives {eps / mesh.h:.2f} points per period eps={eps:.4g} (< {min_points})",
            h=mesh.h, eps=eps,
        )
    data = boundary_values(mesh, g, system.n_components)
    return solve_dirichlet(system, None, data, tol)


def tail_frame(tails):
    rows = []
    for (k, a), V in sorted(tails.tails.items()):
        for (i, j), v in np.ndenumerate(V):
            rows.append({"edge": k, "direction": a + 1, "i": i + 1, "j": j + 1, "value": float(v)})
    return pd.DataFrame(rows)

