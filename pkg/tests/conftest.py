import numpy as np
import pytest

from degctrl.carleman import build_psi, build_weights, select_lambda
from degctrl.disc import Grid
from degctrl.model import ControlGeometry, DomainMotion, Nonlinearity, power_law_metadata
from degctrl.transform import build_transform


@pytest.fixture(scope="session")
def motion():
    return DomainMotion.affine(1.0, 0.2, 1.0)


@pytest.fixture(scope="session")
def coeff(motion):
    return power_law_metadata(0.5, motion)


@pytest.fixture(scope="session")
def geom():
    return ControlGeometry.default((0.35, 0.65))


@pytest.fixture(scope="session")
def grid_small():
    return Grid(n=64, m=128, horizon=1.0)


@pytest.fixture(scope="session")
def coeffs(coeff, motion):
    return build_transform(coeff, motion, Nonlinearity.linear(0.0))[1]


@pytest.fixture(scope="session")
def psi(coeff, geom):
    return build_psi(coeff, geom)


@pytest.fixture(scope="session")
def weights(psi):
    return build_weights(psi, s=5e-4, lam=select_lambda(psi), T=1.0, m_margin=(0.5) ** 8)


def heat_grid(n=256, m=512, horizon=0.1):
    return Grid(n=n, m=m, horizon=horizon)


@pytest.fixture(scope="session")
def heat_setup():
    """Constant-coefficient sanity mode on a fixed unit interval."""
    m0 = DomainMotion.constant(1.0, 0.1)
    c0 = power_law_metadata(0.0, m0, allow_nondegenerate=True)
    _, cf = build_transform(c0, m0, None)
    return m0, c0, cf
