import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "scripts"))

from geometry import build_polygon, classify_domain  # noqa: E402
from microstructure import compute_correctors, preset  # noqa: E402

SQUARE = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
SQUARE_NORMALS = ((0, 1), (-1, 0), (0, -1), (1, 0))


@pytest.fixture(scope="session")
def root_dir():
    return ROOT


@pytest.fixture(scope="session")
def laminate():
    return preset("laminate")


@pytest.fixture(scope="session")
def identity():
    return preset("identity")


@pytest.fixture(scope="session")
def unit_square():
    return classify_domain(build_polygon(SQUARE), exact_normals=SQUARE_NORMALS)


@pytest.fixture(scope="session")
def laminate_correctors(laminate):
    return compute_correctors(laminate, n=64)


@pytest.fixture(scope="session")
def laminate_matched(laminate):
    """Correctors of the discrete medium seen by an eps/8 lattice mesh with +1 diagonals."""
    return compute_correctors(laminate, n=8, rule="composite", diagonal=1, potentials=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
