import math

import numpy as np
import pytest

from boundary_layer import (
    StripField, StripProblem, StripSettings, TailSet, compute_tail_set, diophantine_tail, edge_shift,
    extract_tail, homogenized_bl_data, phase_sweep, solve_homogenized_bl, solve_oscillating_bl, solve_strip,
    tail_frame,
)
from errors import MissingTail, NoDecay, NonCauchy, NotRational, UnresolvedCell, UnresolvedOscillation
from fem import assemble_constant, triangulate
from geometry import Edge, SlopeClass
from microstructure import compute_correctors

PHASE = (0.25, 0.0)
EPS = 1 / 8
IDENTITY = np.eye(2).reshape(2, 2, 1, 1)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@pytest.fixture(scope="module")
def laminate_tails(laminate, unit_square, laminate_correctors):
    return compute_tail_set(laminate, unit_square, laminate_correctors.chi_fields, EPS, PHASE)


@pytest.fixture(scope="module")
def chi1_at_quarter(laminate_correctors):
    # 0.25 sits on a node of the 64-grid
    return float(laminate_correctors.grid_values(laminate_correctors.chi[0])[16, 0, 0, 0])


def test_identity_has_zero_tails(identity, unit_square):
    corr = compute_correctors(identity, n=16)
    ts = compute_tail_set(identity, unit_square, corr.chi_fields, EPS)
    assert len(ts.tails) == 8
    assert max(float(np.abs(v).max()) for v in ts.tails.values()) <= 1e-12
    assert not ts.flagged


def test_laminate_tails(laminate_tails, chi1_at_quarter):
    # edges 0, 2 are horizontal; 1, 3 vertical. chi^2 vanishes for a laminate.
    assert abs(chi1_at_quarter) > 0.01
    for k in (1, 3):
        assert laminate_tails.tail(k, 0)[0, 0] == pytest.approx(chi1_at_quarter, abs=1e-8)
    for k in (0, 2):
        assert abs(laminate_tails.tail(k, 0)[0, 0]) <= 1e-3
    for k in range(4):
        assert abs(laminate_tails.tail(k, 1)[0, 0]) <= 1e-9
    assert set(laminate_tails.methods.values()) == {"strip-rational"}


def test_horizontal_profile_decays(laminate_tails):
    fit = laminate_tails.fits[(0, 0)]
    assert fit.monotone and not fit.flagged
    assert fit.rate > 1.0
    assert fit.profile[0] > fit.profile[len(fit.profile) // 2]


def test_taller_strip_keeps_the_tail(laminate, unit_square, laminate_correctors):
    edge = unit_square.edges[0]
    shift = edge_shift(edge, EPS, PHASE)
    chi = laminate_correctors.chi_fields[0]
    short = extract_tail(solve_strip(StripProblem(laminate, edge.slope, shift), chi))[0]
    tall = StripProblem(laminate, edge.slope, shift, StripSettings(height_periods=20.0))
    assert tall.L == pytest.approx(2 * 10.0)
    np.testing.assert_allclose(extract_tail(solve_strip(tall, chi))[0], short, atol=1e-6)


def test_growing_profile_flagged_or_raised():
    z1 = np.arange(4) / 4
    z2 = np.linspace(0.0, 1.0, 11)
    values = (np.arange(11)[:, None] + 1.0) * np.cos(2 * np.pi * z1)[None, :]
    strip = StripField(values[..., None, None], z1, z2, 1.0, 1.0)
    _, fit = extract_tail(strip)
    assert fit.flagged and not fit.monotone
    with pytest.raises(NoDecay):
        extract_tail(strip, strict=True)
    with pytest.raises(ValueError):
        extract_tail(strip, window=0.75)


def test_missing_tail():
    with pytest.raises(MissingTail) as err:
        TailSet().tail(2, 1)
    assert isinstance(err.value, KeyError)
    assert err.value.details == {"edge": 2, "direction": 2}


def test_strip_needs_rational_normal(laminate):
    with pytest.raises(NotRational):
        StripProblem(laminate, SlopeClass("diophantine"))


def test_strip_resolution_checked(laminate):
    slope = SlopeClass("rational", p=0, q=1)
    with pytest.raises(UnresolvedCell):
        StripProblem(laminate, slope, settings=StripSettings(points_per_unit=8))
    with pytest.raises(ValueError):
        StripProblem(laminate, slope, settings=StripSettings(height_periods=5.0))


def test_edge_shift(unit_square):
    np.testing.assert_allclose(edge_shift(unit_square.edges[1], EPS, PHASE), [0.25, 0.0])
    # 0.3 / 0.1 lands a hair below 3 in floating point
    e = Edge((0.3, 0.0), (1.0, 0.0), (0.0, 1.0), 0.0)
    np.testing.assert_allclose(edge_shift(e, 0.1), [0.0, 0.0], atol=1e-12)


def test_tail_set_dict_round_trip(laminate_tails):
    back = TailSet.from_dict(laminate_tails.to_dict())
    assert back.tails.keys() == laminate_tails.tails.keys()
    for key, v in laminate_tails.tails.items():
        np.testing.assert_array_equal(back.tails[key], v)
    assert back.methods == laminate_tails.methods


def test_tail_frame(laminate_tails):
    df = tail_frame(laminate_tails)
    assert list(df.columns) == ["edge", "direction", "i", "j", "value"]
    assert len(df) == 8


def test_phase_sweep(laminate, unit_square, laminate_correctors):
    chi = laminate_correctors.chi_fields[0]
    bottom, left = unit_square.edges[0], unit_square.edges[3]
    _, flat = phase_sweep(laminate, bottom.slope, chi, edge_shift(bottom, EPS, PHASE))
    _, varying = phase_sweep(laminate, left.slope, chi, edge_shift(left, EPS, PHASE))
    assert flat <= 1e-8
    assert varying > 0.01


def test_diophantine_tail_of_identity(identity):
    corr = compute_correctors(identity, n=16)
    normal = np.array([GOLDEN, 1.0]) / math.hypot(GOLDEN, 1.0)
    tail, record = diophantine_tail(identity, corr.chi_fields[0], normal, depth=3)
    assert np.abs(tail).max() <= 1e-12
    assert [(r["p"], r["q"]) for r in record] == [(0, 1), (1, 1), (1, 2)]
    assert record[-1]["difference"] <= 1e-12


def test_diophantine_tail_without_usable_convergent(identity):
    corr = compute_correctors(identity, n=16)
    normal = np.array([GOLDEN, 1.0]) / math.hypot(GOLDEN, 1.0)
    with pytest.raises(NonCauchy) as err:
        diophantine_tail(identity, corr.chi_fields[0], normal, settings=StripSettings(max_strip_period=0.5))
    assert err.value.record == []


def test_homogenized_bl_data(unit_square, laminate_tails, chi1_at_quarter):
    mesh = triangulate(unit_square, EPS)
    u0 = mesh.nodes[:, :1].copy()  # grad u0 = e1
    g = homogenized_bl_data(mesh, laminate_tails, u0)
    pts = mesh.nodes[mesh.boundary_nodes]
    left_mid = int(np.flatnonzero(np.all(np.isclose(pts, [0.0, 0.5]), axis=1))[0])
    assert g[left_mid, 0] == pytest.approx(-chi1_at_quarter, abs=1e-8)
    system = assemble_constant(mesh, np.diag([math.sqrt(3.0), 2.0]).reshape(2, 2, 1, 1))
    theta = solve_homogenized_bl(system, laminate_tails, u0)
    np.testing.assert_allclose(theta[mesh.boundary_nodes], g, atol=1e-12)


def test_homogenized_bl_needs_every_tail(unit_square):
    mesh = triangulate(unit_square, EPS)
    with pytest.raises(MissingTail):
        homogenized_bl_data(mesh, TailSet(), np.zeros((mesh.n_nodes, 1)))


def test_oscillating_bl_needs_resolved_mesh(unit_square):
    mesh = triangulate(unit_square, EPS)
    system = assemble_constant(mesh, IDENTITY)
    with pytest.raises(UnresolvedOscillation):
        solve_oscillating_bl(system, EPS, None)
    u = solve_oscillating_bl(system, 4 * EPS, lambda p: np.ones(len(p)))
    np.testing.assert_allclose(u, 1.0, atol=1e-10)
