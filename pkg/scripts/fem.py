"""
fem.py
------
P1 vector finite elements on convex polygons.

The element kernels at the top (gradients, quadrature points, tensor
stiffness, mass) are shared with the torus cell problems and the
boundary-layer strips.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.interpolate import griddata
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg, splu
from scipy.spatial import cKDTree

from config import (
    DIRECT_SOLVER_MAX_DOFS, MAX_MESH_NODES, MIN_ANGLE_DEG,
    QUADRATURE_CAP, QUADRATURE_POINTS_PER_PERIOD, SOLVER_TOL,
)
from errors import QuadratureUnderResolved, SolverFailure, TargetTooFine

logger = logging.getLogger(__name__)

EVAL_CHUNK = 1 << 18


# =============================================================================
# ELEMENT KERNELS
# =============================================================================
def p1_gradients(verts):
    """Barycentric gradients (E, 3, 2) and signed areas (E,) for triangles (E, 3, 2)."""
    d1 = verts[:, 1] - verts[:, 0]
    d2 = verts[:, 2] - verts[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return grads, 0.5 * det


def edge_lengths(verts):
    return np.stack([
        np.linalg.norm(verts[:, 1] - verts[:, 0], axis=1),
        np.linalg.norm(verts[:, 2] - verts[:, 1], axis=1),
        np.linalg.norm(verts[:, 0] - verts[:, 2], axis=1),
    ], axis=1)


def quadrature_level(diameter, points_per_period=QUADRATURE_POINTS_PER_PERIOD, cap=QUADRATURE_CAP):
    """Subdivisions per element edge so that sub-cells sample a unit period `points_per_period` times."""
    return int(min(cap, max(1, math.ceil(diameter * points_per_period - 1e-9))))


def _subcentroids(levels):
    # barycentric (l1, l2) of the centroids of the levels**2 congruent sub-triangles
    pts = []
    for a in range(levels):
        for b in range(levels - a):
            pts.append((a + 1.0 / 3.0, b + 1.0 / 3.0))
            if a + b < levels - 1:
                pts.append((a + 2.0 / 3.0, b + 2.0 / 3.0))
    return np.asarray(pts) / levels


def quadrature_points(verts, rule="composite", levels=1):
    """Equal-weight sample points (E, Q, 2) for the element-average coefficient rules."""
    if rule == "cell_center":
        lengths = edge_lengths(verts)
        k = np.argmax(lengths, axis=1)
        a = verts[np.arange(len(verts)), k]
        b = verts[np.arange(len(verts)), (k + 1) % 3]
        return (0.5 * (a + b))[:, None, :]
    if rule == "composite":
        bary = _subcentroids(levels)
        d1 = verts[:, 1] - verts[:, 0]
        d2 = verts[:, 2] - verts[:, 0]
        return verts[:, None, 0] + bary[None, :, 0, None] * d1[:, None] + bary[None, :, 1, None] * d2[:, None]
    raise ValueError(f"Unknown quadrature rule: {rule}")


def element_tensor(tensor, verts_y, rule="composite", levels=1):
    """Element-averaged coefficient blocks (E, 2, 2, N, N) of a periodic tensor."""
    pts = quadrature_points(verts_y, rule, levels)
    n_el, n_q = pts.shape[:2]
    flat = pts.reshape(-1, 2)
    N = tensor.n_components
    out = np.empty((flat.shape[0], 2, 2, N, N))
    for start in range(0, flat.shape[0], EVAL_CHUNK):
        out[start:start + EVAL_CHUNK] = tensor.evaluate(flat[start:start + EVAL_CHUNK])
    return out.reshape(n_el, n_q, 2, 2, N, N).mean(axis=1)


def assemble_tensor_stiffness(triangles, grads, areas, coef, n_nodes):
    """Sparse matrix of sum_T |T| A^{ab}_{ij} d_b phi_col d_a phi_row, node-major DoFs."""
    N = coef.shape[-1]
    local = np.einsum("e,eax,exyij,eby->eaibj", areas, grads, coef, grads, optimize=True)
    dof = triangles[:, :, None] * N + np.arange(N)[None, None, :]
    rows = np.broadcast_to(dof[:, :, :, None, None], local.shape)
    cols = np.broadcast_to(dof[:, None, None, :, :], local.shape)
    size = n_nodes * N
    mat = sparse.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(size, size))
    return mat.tocsr()


def assemble_scalar_mass(triangles, areas, n_nodes):
    local = areas[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))[None]
    rows = np.broadcast_to(triangles[:, :, None], local.shape)
    cols = np.broadcast_to(triangles[:, None, :], local.shape)
    mat = sparse.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n_nodes, n_nodes))
    return mat.tocsr()


def vector_mass(scalar_mass, n_components):
    return sparse.kron(scalar_mass, sparse.identity(n_components), format="csr")


def tensor_load(triangles, grads, areas, flux, n_nodes):
    """Vector b_(a,i) = sum_T |T| flux^a_i d_a phi, for element fluxes (E, 2, N, ...)."""
    N = flux.shape[2]
    local = np.einsum("e,eax,exi...->eai...", areas, grads, flux)
    dof = (triangles[:, :, None] * N + np.arange(N)[None, None, :]).ravel()
    rest = local.shape[3:]
    local = local.reshape(-1, int(np.prod(rest, dtype=int)))
    out = np.zeros((n_nodes * N, local.shape[1]))
    for c in range(local.shape[1]):
        out[:, c] = np.bincount(dof, weights=local[:, c], minlength=n_nodes * N)
    return out.reshape((n_nodes * N,) + rest)


# =============================================================================
# MESHES
# =============================================================================
@dataclass
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    boundary_edges: np.ndarray
    on_edge: np.ndarray
    h: float
    domain: object = None
    structure: dict = field(default=None)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def vertices(self):
        return self.nodes[self.triangles]

    @cached_property
    def _geometry(self):
        return p1_gradients(self.vertices)

    @property
    def grads(self):
        return self._geometry[0]

    @property
    def areas(self):
        return self._geometry[1]

    @cached_property
    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def mass_matrix(self):
        return assemble_scalar_mass(self.triangles, self.areas, self.n_nodes)

    @cached_property
    def laplacian(self):
        coef = np.broadcast_to(np.eye(2)[None, :, :, None, None], (len(self.triangles), 2, 2, 1, 1))
        return assemble_tensor_stiffness(self.triangles, self.grads, self.areas, coef, self.n_nodes)

    def min_angle_deg(self):
        v = self.vertices
        angles = []
        for k in range(3):
            a = v[:, (k + 1) % 3] - v[:, k]
            b = v[:, (k + 2) % 3] - v[:, k]
            cosang = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angles))

    def interpolate(self, func):
        return np.asarray(func(self.nodes), dtype=float)


def _triangle_min_angle(p):
    best = np.inf
    for k in range(3):
        a = p[(k + 1) % 3] - p[k]
        b = p[(k + 2) % 3] - p[k]
        c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        best = min(best, math.degrees(math.acos(max(-1.0, min(1.0, c)))))
    return best


def _coarse_triangles(vertices):
    """Coarse triangulation of a convex polygon maximizing the smallest angle."""
    n = len(vertices)
    if n == 3:
        return vertices, [(0, 1, 2)]
    candidates = []
    for apex in range(n):
        fan = [(apex, (apex + i) % n, (apex + i + 1) % n) for i in range(1, n - 1)]
        candidates.append((vertices, fan))
    centroid = vertices.mean(axis=0)
    with_center = np.vstack([vertices, centroid])
    candidates.append((with_center, [(n, i, (i + 1) % n) for i in range(n)]))
    scores = [min(_triangle_min_angle(pts[list(t)]) for t in tris) for pts, tris in candidates]
    best = int(np.argmax(np.round(scores, 9)))
    return candidates[best]


def _subdivide(points, coarse, k):
    nodes, tris, offset = [], [], 0
    ab = [(a, b) for b in range(k + 1) for a in range(k + 1 - b)]
    local = {key: i for i, key in enumerate(ab)}
    ab = np.asarray(ab, dtype=float)
    up = [(local[(a, b)], local[(a + 1, b)], local[(a, b + 1)]) for b in range(k) for a in range(k - b)]
    down = [(local[(a + 1, b)], local[(a + 1, b + 1)], local[(a, b + 1)]) for b in range(k - 1) for a in range(k - 1 - b)]
    pattern = np.asarray(up + down, dtype=np.int64).reshape(-1, 3)
    for t in coarse:
        v0, v1, v2 = points[list(t)]
        nodes.append(v0 + (ab[:, :1] * (v1 - v0) + ab[:, 1:] * (v2 - v0)) / k)
        tris.append(pattern + offset)
        offset += len(ab)
    return np.vstack(nodes), np.vstack(tris)


def _merge_nodes(nodes, triangles, tol):
    pairs = cKDTree(nodes).query_pairs(r=tol, output_type="ndarray")
    graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    return nodes[first[order]], relabel[labels][triangles]


def lattice_structure(mesh, tol=1e-10):
    """Spacing, diagonal orientation and origin of a structured right-isosceles mesh, or None."""
    v = mesh.vertices
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    lengths = np.linalg.norm(e, axis=2)
    hyp = np.argmax(lengths, axis=1)
    hvec = e[np.arange(len(v)), hyp]
    spacing = float(np.abs(hvec[0, 0]))
    if spacing <= 0:
        return None
    legs_ok = np.all(np.isclose(np.sort(lengths, axis=1)[:, :2], spacing, rtol=0, atol=tol * spacing))
    axis_ok = np.all(np.isclose(np.abs(hvec), spacing, rtol=0, atol=tol * spacing))
    if not (legs_ok and axis_ok):
        return None
    sign = np.sign(hvec[:, 0] * hvec[:, 1])
    if not (np.all(sign > 0) or np.all(sign < 0)):
        return None
    origin = mesh.nodes[0] - spacing * np.round(mesh.nodes[0] / spacing)
    offsets = (mesh.nodes - origin) / spacing
    if np.max(np.abs(offsets - np.round(offsets))) > 1e-8:
        return None
    return {"spacing": spacing, "diagonal": int(sign[0]), "origin": origin.tolist()}


def triangulate(domain, h_target, max_nodes=MAX_MESH_NODES):
    """Conforming mesh of a convex polygon by uniform subdivision of a coarse triangulation."""
    if h_target <= 0:
        raise ValueError(f"h_target must be positive, got {h_target}")
    points, coarse = _coarse_triangles(np.asarray(domain.vertices, dtype=float))
    medians = [np.median(edge_lengths(points[list(t)][None])[0]) for t in coarse]
    k = max(1, math.ceil(max(medians) / h_target - 1e-9))
    estimate = len(coarse) * (k + 1) * (k + 2) // 2
    if estimate > max_nodes:
        raise TargetTooFine(
            f"h_target={h_target:g} needs about {estimate:,} nodes (budget {max_nodes:,})",
            h_target=h_target, nodes=estimate, budget=max_nodes,
        )
    nodes, triangles = _subdivide(points, coarse, k)
    scale = float(np.max(np.ptp(points, axis=0)))
    nodes, triangles = _merge_nodes(nodes, triangles, 1e-9 * scale / k)

    normals = np.array([e.normal for e in domain.edges])
    offsets = np.array([e.offset for e in domain.edges])
    dist = nodes @ normals.T - offsets[None, :]
    on_edge = np.abs(dist) <= 1e-9 * scale
    boundary = np.flatnonzero(on_edge.any(axis=1))
    mesh = Mesh(
        nodes=nodes,
        triangles=triangles,
        boundary_nodes=boundary,
        boundary_edges=np.argmax(on_edge[boundary], axis=1),
        on_edge=on_edge[boundary],
        h=float(max(medians) / k),
        domain=domain,
    )
    mesh.structure = lattice_structure(mesh)
    angle = mesh.min_angle_deg()
    if angle < MIN_ANGLE_DEG:
        logger.warning("Minimum angle %.1f deg below %.0f deg (inherited from the coarse triangulation)", angle, MIN_ANGLE_DEG)
    logger.info("Mesh: %d nodes, %d triangles, h=%.6g, k=%d", mesh.n_nodes, len(triangles), mesh.h, k)
    return mesh


# =============================================================================
# DISCRETE SYSTEMS
# =============================================================================
class DiscreteSystem:
    """Assembled stiffness/mass over all nodal DoFs plus the Dirichlet bookkeeping."""

    def __init__(self, mesh, stiffness, mass, n_components, quadrature_order=1, label=""):
        self.mesh = mesh
        self.n_components = n_components
        self.stiffness_full = stiffness
        self.mass_full = mass
        self.quadrature_order = quadrature_order
        self.label = label
        N = n_components
        self.fixed = (mesh.boundary_nodes[:, None] * N + np.arange(N)).ravel()
        self.free = (mesh.interior_nodes[:, None] * N + np.arange(N)).ravel()
        self._lu = None

    @cached_property
    def stiffness(self):
        return self.stiffness_full[self.free][:, self.free].tocsc()

    @cached_property
    def mass(self):
        return self.mass_full[self.free][:, self.free].tocsc()

    @property
    def dirichlet_map(self):
        return self.mesh.boundary_nodes

    @property
    def n_free(self):
        return len(self.free)

    def asymmetry(self):
        K = self.stiffness
        scale = abs(K).max()
        return float(abs(K - K.T).max() / scale) if scale else 0.0

    def solve_free(self, rhs, tol=SOLVER_TOL):
        """Solve K_ff x = rhs for one or several right-hand sides."""
        rhs = np.asarray(rhs, dtype=float)
        if not np.any(rhs):
            return np.zeros_like(rhs)
        if self.n_free <= DIRECT_SOLVER_MAX_DOFS:
            if self._lu is None:
                self._lu = splu(self.stiffness)
            x = self._lu.solve(rhs)
        else:
            x = self._cg(rhs, tol)
        res = np.linalg.norm(self.stiffness @ x - rhs) / np.linalg.norm(rhs)
        if not np.isfinite(res) or res > tol:
            raise SolverFailure(f"{self.label or 'system'}: relative residual {res:.3e} > {tol:.1e}", residual=float(res))
        return x

    def _cg(self, rhs, tol):
        K = self.stiffness
        d = K.diagonal()
        prec = LinearOperator(K.shape, matvec=lambda v: v / d)
        cols = rhs.reshape(len(rhs), -1)
        out = np.empty_like(cols)
        for c in range(cols.shape[1]):
            x, info = cg(K, cols[:, c], rtol=0.1 * tol, atol=0.0, maxiter=20 * K.shape[0], M=prec)
            if info != 0:
                res = np.linalg.norm(K @ x - cols[:, c]) / np.linalg.norm(cols[:, c])
                raise SolverFailure(f"cg stopped with info={info}, residual {res:.3e}", residual=float(res))
            out[:, c] = x
        return out.reshape(rhs.shape)

    def expand(self, free_values):
        """Nodal field (n_nodes, N[, ...]) with zero boundary values."""
        free_values = np.asarray(free_values)
        rest = free_values.shape[1:]
        full = np.zeros((self.mesh.n_nodes * self.n_components,) + rest)
        full[self.free] = free_values
        return full.reshape((self.mesh.n_nodes, self.n_components) + rest)


def _check_resolution(mesh, eps, allow_underresolved):
    if mesh.h > eps:
        msg = f"mesh h={mesh.h:.4g} exceeds eps={eps:.4g}: oscillations are not resolved"
        if not allow_underresolved:
            raise QuadratureUnderResolved(msg, h=mesh.h, eps=eps)
        logger.warning(msg)


def assemble_oscillating(mesh, tensor, eps, phase=(0.0, 0.0), points_per_period=QUADRATURE_POINTS_PER_PERIOD,
                         cap=QUADRATURE_CAP, allow_underresolved=False):
    """System for -div A(x/eps + phase) grad with the composite element-average rule."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_resolution(mesh, eps, allow_underresolved)
    verts_y = mesh.vertices / eps + np.asarray(phase, dtype=float)
    diam = float(np.max(edge_lengths(verts_y)))
    levels = quadrature_level(diam, points_per_period, cap)
    if diam / levels > 1.0 / points_per_period + 1e-12:
        logger.warning("Quadrature capped at %d levels: %.2f samples per period", levels, levels / diam)
    coef = element_tensor(tensor, verts_y, "composite", levels)
    N = tensor.n_components
    K = assemble_tensor_stiffness(mesh.triangles, mesh.grads, mesh.areas, coef, mesh.n_nodes)
    M = vector_mass(mesh.mass_matrix, N)
    system = DiscreteSystem(mesh, K, M, N, quadrature_order=levels, label=f"oscillating eps={eps:g}")
    logger.info("Assembled oscillating system: eps=%g, %d free DoFs, %d quadrature levels", eps, system.n_free, levels)
    return system


def assemble_constant(mesh, A0):
    A0 = np.asarray(A0, dtype=float)
    N = A0.shape[-1]
    coef = np.broadcast_to(A0[None], (len(mesh.triangles),) + A0.shape)
    K = assemble_tensor_stiffness(mesh.triangles, mesh.grads, mesh.areas, coef, mesh.n_nodes)
    M = vector_mass(mesh.mass_matrix, N)
    return DiscreteSystem(mesh, K, M, N, quadrature_order=1, label="constant")


def _nodal(values, mesh, N, what):
    if values is None:
        return np.zeros((mesh.n_nodes, N))
    if callable(values):
        values = values(mesh.nodes)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = np.repeat(values[:, None], N, axis=1)
    if values.shape != (mesh.n_nodes, N):
        raise ValueError(f"{what} has shape {values.shape}, expected {(mesh.n_nodes, N)}")
    return values


def boundary_values(mesh, g, N):
    """Prescribed values (n_boundary, N) from an array, a callable, or per-edge callables.

    Per-edge data at a vertex is the mean of the adjacent edges' values.
    """
    nb = len(mesh.boundary_nodes)
    if g is None:
        return np.zeros((nb, N))
    pts = mesh.nodes[mesh.boundary_nodes]
    if isinstance(g, dict):
        acc = np.zeros((nb, N))
        count = np.zeros(nb)
        for edge_id, func in g.items():
            rows = np.flatnonzero(mesh.on_edge[:, edge_id])
            vals = np.asarray(func(pts[rows]), dtype=float).reshape(len(rows), -1)
            acc[rows] += np.broadcast_to(vals, (len(rows), N))
            count[rows] += 1
        missing = count == 0
        if np.any(missing):
            raise ValueError(f"no boundary data for {int(missing.sum())} boundary nodes")
        return acc / count[:, None]
    if callable(g):
        g = g(pts)
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = np.repeat(g[:, None], N, axis=1)
    return g.reshape(nb, N)


def solve_dirichlet(system, f=None, g=None, tol=SOLVER_TOL):
    """Nodal field (n_nodes, N) solving a(u, w) = (f, w) with u = g on the boundary."""
    mesh, N = system.mesh, system.n_components
    f_nodal = _nodal(f, mesh, N, "load")
    u = np.zeros(mesh.n_nodes * N)
    u[system.fixed] = boundary_values(mesh, g, N).ravel()
    rhs = (system.mass_full @ f_nodal.ravel())[system.free]
    if np.any(u[system.fixed]):
        rhs = rhs - system.stiffness_full[system.free][:, system.fixed] @ u[system.fixed]
    u[system.free] = system.solve_free(rhs, tol)
    return u.reshape(mesh.n_nodes, N)


# =============================================================================
# POST-PROCESSING
# =============================================================================
def _components(field):
    field = np.asarray(field, dtype=float)
    return field.reshape(field.shape[0], -1)


def norms(field, mesh):
    """(L2 norm, H1 seminorm, max nodal modulus), exact for the P1 field."""
    u = _components(field)
    l2 = float(np.sqrt(max(np.einsum("nc,nc->", u, mesh.mass_matrix @ u), 0.0)))
    h1 = float(np.sqrt(max(np.einsum("nc,nc->", u, mesh.laplacian @ u), 0.0)))
    return l2, h1, float(np.max(np.abs(u))) if u.size else 0.0


def inner(field_a, field_b, mesh):
    """L2 inner product of two P1 fields of the same shape."""
    return float(np.einsum("nc,nc->", _components(field_a), mesh.mass_matrix @ _components(field_b)))


def element_gradients(field, mesh):
    """Gradient (E, 2, ...) of a P1 field on each element."""
    u = np.asarray(field, dtype=float)
    return np.einsum("eax,ea...->ex...", mesh.grads, u[mesh.triangles])


def recover_gradient(field, mesh):
    """Area-weighted patch average of element gradients at the nodes: (n_nodes, 2, ...)."""
    ge = element_gradients(field, mesh)
    flat = ge.reshape(len(ge), -1)
    w = np.repeat(mesh.areas, 3)
    idx = mesh.triangles.ravel()
    den = np.bincount(idx, weights=w, minlength=mesh.n_nodes)
    out = np.empty((mesh.n_nodes, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=np.repeat(flat[:, c], 3) * w, minlength=mesh.n_nodes) / den
    return out.reshape((mesh.n_nodes,) + ge.shape[1:])


def recover_hessian(field, mesh):
    """Second derivatives (n_nodes, 2, 2, ...) by recovering the recovered gradient."""
    grad = recover_gradient(field, mesh)
    hess = recover_gradient(grad, mesh)
    return 0.5 * (hess + np.swapaxes(hess, 1, 2))


def export_field_csv(field, mesh, path):
    u = _components(field)
    n, c = u.shape
    df = pd.DataFrame({
        "node_id": np.repeat(np.arange(n), c),
        "x": np.repeat(mesh.nodes[:, 0], c),
        "y": np.repeat(mesh.nodes[:, 1], c),
        "component": np.tile(np.arange(c), n),
        "value": u.ravel(),
    })
    df.to_csv(path, index=False, float_format="%.17g")


def export_field_json(field, mesh, path, resolution=64):
    """Field resampled on a structured grid over the bounding box (null outside the domain)."""
    u = _components(field)
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    comps = []
    for c in range(u.shape[1]):
        Z = griddata(mesh.nodes, u[:, c], (X, Y), method="linear")
        comps.append([[None if not np.isfinite(z) else float(z) for z in row] for row in Z])
    with open(path, "w") as f:
        json.dump({"x": xs.tolist(), "y": ys.tolist(), "components": comps}, f, indent=2)
