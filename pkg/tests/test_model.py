import numpy as np
import pytest

from degctrl.model import (
    ControlGeometry,
    DegenerateCoefficient,
    DomainMotion,
    Nonlinearity,
    OutOfRange,
    power_law_metadata,
    validate_problem,
)


def test_power_law_values():
    coeff = power_law_metadata(0.5)
    assert coeff.a(np.array([0.25]))[0] == pytest.approx(0.5)
    assert coeff.K == 0.5


def test_power_law_rejects_out_of_range():
    with pytest.raises(OutOfRange):
        power_law_metadata(1.5)
    with pytest.raises(OutOfRange):
        power_law_metadata(-0.1)


def test_alpha_zero_needs_override():
    with pytest.raises(OutOfRange):
        power_law_metadata(0.0)
    coeff = power_law_metadata(0.0, allow_nondegenerate=True)
    assert np.all(coeff.a(np.linspace(0, 1, 5)) == 1.0)


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75, 0.9])
def test_power_law_degeneracy_identity(alpha):
    # x a'(x) = alpha a(x) exactly for every positive x
    coeff = power_law_metadata(alpha)
    x = np.geomspace(1e-8, 1.0, 200)
    lhs = x * coeff.a_prime(x)
    rhs = alpha * coeff.a(x)
    assert np.max(np.abs(lhs - rhs) / rhs) < 1e-14


def test_scaling_identity_example():
    # ell(3) = 4, y = 0.1: a(0.4) must equal g(3) a(0.1)
    motion = DomainMotion.affine(1.0, 1.0, 4.0)
    coeff = power_law_metadata(0.5, motion)
    lhs = coeff.a(coeff.f_scale(3.0) * 0.1)
    rhs = coeff.g_scale(3.0) * coeff.a(0.1)
    assert lhs == pytest.approx(0.632456, abs=1e-6)
    assert lhs == pytest.approx(rhs, rel=1e-14)


def test_validate_passes_for_model_problem(coeff, motion, geom):
    rep = validate_problem(coeff, motion, Nonlinearity.sine(), geom, samples=256)
    assert rep.passed
    # power law: the measured supremum of x a'/a equals K itself
    assert rep["coefficient.weak_degeneracy"].value == pytest.approx(0.5, abs=1e-12)
    assert rep["coefficient.scaling_identity"].value <= 1e-12


def test_validate_rejects_strong_degeneracy(motion, geom):
    # K = 1.5 cannot come from power_law_metadata; feed the raw coefficient
    bad = DegenerateCoefficient(
        a=lambda x: np.power(x, 1.5),
        a_prime=lambda x: 1.5 * np.power(x, 0.5),
        K=1.5,
        alpha=None,
        f_scale=motion.ell,
        g_scale=lambda t: motion.ell(t) ** 1.5,
    )
    rep = validate_problem(bad, motion, Nonlinearity.linear(0.0), geom, samples=64)
    assert not rep.passed
    assert not rep["coefficient.K_range"].passed


def test_validate_b_ratio_sign():
    # ell = 1 + t, alpha = 0.5: b = (1+t)^(-3/2), so b'/b = -1.5/(1+t) <= 0
    motion = DomainMotion.affine(1.0, 1.0, 1.0, C_b=0.0)
    coeff = power_law_metadata(0.5, motion)
    rep = validate_problem(coeff, motion, Nonlinearity.linear(0.0), ControlGeometry.default(), 128)
    assert rep["motion.diffusivity_ratio"].passed
    assert rep["motion.diffusivity_ratio"].value <= 0.0


def test_validate_minimum_samples(coeff, motion, geom):
    with pytest.raises(OutOfRange):
        validate_problem(coeff, motion, Nonlinearity.linear(0.0), geom, samples=8)


def test_validate_deterministic(coeff, motion, geom):
    nl = Nonlinearity.saturating_cubic()
    r1 = validate_problem(coeff, motion, nl, geom, samples=128)
    r2 = validate_problem(coeff, motion, nl, geom, samples=128)
    assert [(c.name, c.margin) for c in r1.checks] == [(c.name, c.margin) for c in r2.checks]


def test_sine_remainder_constant():
    nl = Nonlinearity.sine()
    r = np.array([0.1])
    rem = abs(nl.F(0, 0, r) - nl.F(0, 0, 0 * r) - nl.D3F(0, 0, 0 * r) * r)[0]
    assert rem == pytest.approx(abs(np.sin(0.1) - 0.1), rel=1e-12)
    assert rem <= 0.5 * 0.1**2


def test_saturating_cubic_remainder_bound():
    nl = Nonlinearity.saturating_cubic()
    r1 = np.linspace(-3, 3, 61)
    worst = 0.0
    for r2 in np.linspace(-3, 3, 31):
        rem = np.abs(nl.F(0, 0, r1) - nl.F(0, 0, r2) - nl.D3F(0, 0, r2) * (r1 - r2))
        dr = np.abs(r1 - r2)
        mask = dr > 1e-12
        worst = max(worst, float(np.max(rem[mask] / dr[mask] ** 2)))
    assert worst <= nl.C_quad


def test_geometry_inclusion_errors():
    with pytest.raises(OutOfRange):
        ControlGeometry(omega=(0.3, 0.7), omega1=(0.2, 0.6), alpha_prime=0.4, beta_prime=0.6)
    with pytest.raises(OutOfRange):
        ControlGeometry(omega=(0.3, 0.7), omega1=(0.35, 0.65), alpha_prime=0.1, beta_prime=0.6)
