"""
geometry.py
-----------
Convex polygonal domains, edge-normal slope classes and the rotations
that map an edge onto the bottom of a half-space.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from config import (
    DIOPHANTINE_C, DIOPHANTINE_L, MAX_CONVERGENT_DEPTH,
    RATIONAL_MAX_DENOMINATOR, RATIONAL_TOL, SCAN_RADIUS,
)
from errors import DegenerateEdge, NonConvex, SlopeInfinite

logger = logging.getLogger(__name__)

CONVEXITY_TOL = 1e-12
CF_EPS = 1e-12


@dataclass(frozen=True)
class SlopeClass:
    kind: str  # "rational" | "diophantine" | "undetermined"
    p: int = 0
    q: int = 0
    C: float = 0.0
    l: float = 0.0
    scan_radius: int = 0
    worst_divisor: float = float("nan")
    failing_xi: tuple = ()

    @property
    def is_rational(self):
        return self.kind == "rational"

    @property
    def period(self):
        """Tangential period sqrt(p^2 + q^2) of a rational edge."""
        return math.hypot(self.p, self.q)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.is_rational:
            d.update(p=self.p, q=self.q, period=self.period)
        else:
            d.update(C=self.C, l=self.l, scan_radius=self.scan_radius, worst_divisor=self.worst_divisor)
            if self.failing_xi:
                d["failing_xi"] = list(self.failing_xi)
        return d


@dataclass(frozen=True)
class Edge:
    start: tuple
    end: tuple
    normal: tuple
    offset: float
    slope: SlopeClass = None

    @property
    def length(self):
        return math.dist(self.start, self.end)


@dataclass(frozen=True)
class PolygonDomain:
    vertices: tuple
    edges: tuple = field(default=())

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def area(self):
        v = np.asarray(self.vertices)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def contains(self, points, tol=0.0):
        pts = np.atleast_2d(points)
        normals = np.array([e.normal for e in self.edges])
        offsets = np.array([e.offset for e in self.edges])
        return np.all(pts @ normals.T - offsets >= -tol, axis=1)

    def turning_angles(self):
        v = np.asarray(self.vertices)
        d = np.roll(v, -1, axis=0) - v
        ang = np.arctan2(d[:, 1], d[:, 0])
        turn = np.roll(ang, -1) - ang
        return (turn + np.pi) % (2 * np.pi) - np.pi

    def with_slopes(self, slopes):
        edges = tuple(
            Edge(e.start, e.end, e.normal, e.offset, s) for e, s in zip(self.edges, slopes)
        )
        return PolygonDomain(self.vertices, edges)


def build_polygon(vertices):
    """Edges with inward unit normals and offsets; convexity certified."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise ValueError(f"need at least 3 vertices as (x, y) pairs, got shape {v.shape}")
    signed = 0.5 * float(np.dot(v[:, 0], np.roll(v[:, 1], -1)) - np.dot(np.roll(v[:, 0], -1), v[:, 1]))
    if signed < 0:
        logger.warning("Vertices given clockwise; reversing to counter-clockwise order")
        v = v[::-1].copy()
    n = len(v)
    edges = []
    for k in range(n):
        a, b = v[k], v[(k + 1) % n]
        d = b - a
        length = math.hypot(d[0], d[1])
        if length < 1e-12:
            raise DegenerateEdge(f"edge {k} from {tuple(a)} to {tuple(b)} has length {length:.3e}", edge=k)
        normal = np.array([-d[1], d[0]]) / length
        edges.append(Edge(tuple(a), tuple(b), tuple(normal), float(normal @ a)))
    for k in range(n):
        d0 = np.subtract(edges[k].end, edges[k].start)
        d1 = np.subtract(edges[(k + 1) % n].end, edges[(k + 1) % n].start)
        cross = d0[0] * d1[1] - d0[1] * d1[0]
        if abs(cross) <= 1e-12 * np.linalg.norm(d0) * np.linalg.norm(d1):
            raise DegenerateEdge(f"vertices {k}, {(k + 1) % n}, {(k + 2) % n} are collinear", vertex=(k + 1) % n)
    for k, e in enumerate(edges):
        dist = v @ np.asarray(e.normal) - e.offset
        bad = np.flatnonzero(dist < -CONVEXITY_TOL)
        if len(bad):
            j = int(bad[0])
            raise NonConvex(
                f"vertex {j} at {tuple(v[j])} lies outside edge {k} (signed distance {dist[j]:.3e})",
                vertex=j, edge=k,
            )
    return PolygonDomain(tuple(map(tuple, v)), tuple(edges))


def _from_integer_pair(n, p, q):
    g = math.gcd(int(p), int(q))
    p, q = int(p) // g, int(q) // g
    if np.dot(n, (p, q)) < 0:
        p, q = -p, -q
    return SlopeClass("rational", p=p, q=q)


def classify_normal(n, C=DIOPHANTINE_C, l=DIOPHANTINE_L, scan_radius=SCAN_RADIUS, exact=None):
    """Rational, diophantine-certified (finite scan) or undetermined."""
    n = np.asarray(n, dtype=float)
    if exact is not None:
        return _from_integer_pair(n, *exact)
    swapped = abs(n[1]) < abs(n[0])
    num, den = (n[1], n[0]) if swapped else (n[0], n[1])
    for p, q in rational_approximation(num / den, MAX_CONVERGENT_DEPTH, max_denominator=RATIONAL_MAX_DENOMINATOR):
        # integer relation q*num = p*den
        if abs(q * num - p * den) <= RATIONAL_TOL:
            pair = (q, p) if swapped else (p, q)
            return _from_integer_pair(n, *pair)
    r = int(scan_radius)
    xs = np.arange(-r, r + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    norm = np.hypot(X, Y)
    keep = (norm > 0) & (norm <= r)
    X, Y, norm = X[keep], Y[keep], norm[keep]
    divisor = np.abs(n[0] * X + n[1] * Y) * norm ** l
    worst = int(np.argmin(divisor))
    worst_divisor = float(divisor[worst])
    if worst_divisor >= C:
        return SlopeClass("diophantine", C=C, l=l, scan_radius=r, worst_divisor=worst_divisor)
    return SlopeClass(
        "undetermined", C=C, l=l, scan_radius=r, worst_divisor=worst_divisor,
        failing_xi=(int(X[worst]), int(Y[worst])),
    )


def classify_domain(domain, C=DIOPHANTINE_C, l=DIOPHANTINE_L, scan_radius=SCAN_RADIUS, exact_normals=()):
    slopes = []
    for k, e in enumerate(domain.edges):
        exact = exact_normals[k] if exact_normals else None
        s = classify_normal(e.normal, C, l, scan_radius, exact=exact)
        logger.info("Edge %d normal (%.6f, %.6f): %s", k, e.normal[0], e.normal[1], s.to_dict())
        slopes.append(s)
    return domain.with_slopes(slopes)


def rotation_to_halfspace(n):
    """Orthogonal M with det M = +1 and M e2 = n (columns: tangent (n2, -n1), normal n)."""
    n1, n2 = float(n[0]), float(n[1])
    return np.array([[n2, n1], [-n1, n2]])


def rational_approximation(slope, depth, max_denominator=None):
    """Continued-fraction convergents (p, q) of a slope, or of n1/n2 for a normal vector."""
    if np.ndim(slope) == 1:
        n = np.asarray(slope, dtype=float)
        if n[1] == 0:
            raise SlopeInfinite(f"normal {tuple(n)} has infinite slope n1/n2; swap axes first")
        slope = n[0] / n[1]
    if not np.isfinite(slope):
        raise SlopeInfinite(f"slope {slope} is not finite")
    if depth > MAX_CONVERGENT_DEPTH:
        raise ValueError(f"depth must be <= {MAX_CONVERGENT_DEPTH}, got {depth}")
    out = []
    # continuant recurrence p_j = a_j p_{j-1} + p_{j-2}
    p_prev, q_prev, p, q = 0, 1, 1, 0
    x = Fraction(slope)
    for _ in range(depth):
        a = math.floor(x)
        p_prev, q_prev, p, q = p, q, a * p + p_prev, a * q + q_prev
        if max_denominator is not None and q > max_denominator:
            break
        out.append((int(p), int(q)))
        rem = x - a
        if abs(rem) < CF_EPS:
            break
        x = 1 / rem
    return out


def normal_convergents(n, depth):
    """Integer normals (p, q) approximating n through the convergents of its finite slope."""
    n = np.asarray(n, dtype=float)
    swapped = abs(n[1]) < abs(n[0])
    conv = rational_approximation((n[1] / n[0]) if swapped else (n[0] / n[1]), depth)
    pairs = []
    for p, q in conv:
        pair = (q, p) if swapped else (p, q)
        sign = 1 if np.dot(n, pair) >= 0 else -1
        pair = (sign * pair[0], sign * pair[1])
        if pair not in pairs:
            pairs.append(pair)
    return pairs
