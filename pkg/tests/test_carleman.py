import math

import numpy as np
import pytest

from degctrl.carleman import (
    LambdaTooSmall,
    build_psi,
    build_weights,
    probe_carleman,
    probe_observability,
    select_lambda,
)
from degctrl.disc import Grid, philox_rng, random_smooth_slice
from degctrl.model import ControlGeometry, DomainMotion, power_law_metadata


def test_psi_left_branch_value(coeff, geom):
    psi = build_psi(coeff, geom)
    # inside the rising branch: integral of s/a = x^{3/2} / 1.5
    assert psi(np.array([0.125]))[0] == pytest.approx(0.125**1.5 / 1.5, rel=1e-12)
    assert psi(np.array([0.0]))[0] == 0.0


def test_psi_right_branch_value(coeff):
    geom = ControlGeometry(omega=(0.2, 0.8), omega1=(0.3, 0.78), alpha_prime=0.35, beta_prime=0.75)
    psi = build_psi(coeff, geom)
    val = psi(np.array([1.0]))[0]
    # closed form -(2/3)(1 - 0.75^{3/2}) = -0.2336540 (to 7 digits)
    assert val == pytest.approx(-(2.0 / 3.0) * (1 - 0.75**1.5), rel=1e-12)
    assert val == pytest.approx(-0.2336540, abs=1e-6)


def test_psi_c2_junctions(coeff, geom):
    psi = build_psi(coeff, geom)
    eps = 1e-6
    for x0 in (geom.alpha_prime, geom.beta_prime):
        left = psi(np.array([x0 - eps]))[0]
        right = psi(np.array([x0 + eps]))[0]
        assert abs(left - right) < 1e-5
        dl = psi.derivative(np.array([x0 - eps]))[0]
        dr = psi.derivative(np.array([x0 + eps]))[0]
        assert abs(dl - dr) < 1e-4


def test_psi_custom_coefficient_matches_power_law(geom):
    # the quadrature path must agree with the closed form
    motion = DomainMotion.affine(1.0, 0.2, 1.0)
    p_ref = build_psi(power_law_metadata(0.5, motion), geom)
    from degctrl.model import DegenerateCoefficient

    custom = DegenerateCoefficient(
        a=lambda x: np.sqrt(x),
        a_prime=lambda x: 0.5 / np.sqrt(x),
        K=0.5,
        alpha=None,
        f_scale=motion.ell,
        g_scale=lambda t: np.sqrt(motion.ell(t)),
    )
    p_cus = build_psi(custom, geom)
    xs = np.linspace(0, 1, 257)
    # the custom path integrates s/a numerically and interpolates the
    # cumulative; its accuracy is limited near the integrable singularity
    assert np.max(np.abs(p_ref(xs) - p_cus(xs))) < 1e-6


def test_lambda_doubling(psi):
    lam = select_lambda(psi)
    assert lam == 2.0
    with pytest.raises(LambdaTooSmall) as exc:
        build_weights(psi, s=1e-3, lam=1.0, T=1.0)
    assert exc.value.lam_min == 2.0


def test_theta_value_and_blowup(weights):
    assert weights.theta(np.array([0.5]))[0] == pytest.approx(256.0)
    assert weights.theta(np.array([1e-6]))[0] > 1e20
    assert weights.theta(np.array([1.0 - 1e-6]))[0] > 1e20
    # tau stays finite at t = 0 but blows up at t = T
    assert np.isfinite(weights.tau(np.array([0.0]))[0])
    assert weights.tau(np.array([1.0]))[0] == np.inf


def test_m_envelope(weights):
    ts = np.linspace(0, 1, 513)
    base = ts**4 * (1 - ts) ** 4
    m = weights.m(ts)
    assert m[0] > 0
    assert np.all(m >= base - 1e-18)
    late = ts >= 0.5
    assert np.max(np.abs(m[late] - base[late])) < 1e-18


def test_envelopes_negative_and_separated(weights):
    ts = np.linspace(0.01, 0.99, 101)
    assert np.all(weights.A_star(ts) < 0)
    assert np.all(weights.A_hat(ts) < 0)
    assert np.all(3 * weights.A_star(ts) < 2 * weights.A_hat(ts))
    xs = np.linspace(0, 1, 101)
    tg, xg = np.meshgrid(ts, xs, indexing="ij")
    assert np.all(weights.A_weight(xg, tg) < 0)
    assert np.all(weights.phi_weight(xg, tg) < 0)


def test_zeta_ratio_constant(weights):
    ts = np.linspace(0.0, 0.999, 777)
    ratio = weights.zeta_star(ts) / weights.zeta_hat(ts)
    assert (ratio.max() - ratio.min()) / ratio.min() < 1e-12
    assert ratio[0] == pytest.approx(weights.zeta0, rel=1e-14)


def test_rho_blowup_at_final_time(weights):
    with np.errstate(over="ignore"):
        assert np.exp(weights.log_rho0(np.array([1.0 - 1e-9])))[0] > 1e100
    assert weights.log_rho0(np.array([1.0]))[0] == math.inf
    assert weights.inv_rho0_sq(np.array([1.0]))[0] == 0.0


@pytest.mark.parametrize("s,lam", [(1e-11, 2.0), (3e-11, 2.0), (1e-10, 2.0), (1e-11, 4.0), (1e-13, 8.0)])
def test_weight_products_linear_space(psi, s, lam):
    # with small s every weight (and its square) is representable, so the
    # algebra can be checked on the weights themselves rather than their logs
    ws = build_weights(psi, s=s, lam=lam, T=1.0)
    ts = np.linspace(0.0, 0.998, 1000)
    rho_hat_sq = ws.rho_hat(ts) ** 2
    prod = ws.rho0(ts) * ws.rho1(ts)
    assert np.max(np.abs(rho_hat_sq - prod) / prod) < 1e-12
    bar = ws.rho_bar(ts)
    tilde_prod = ws.rho_tilde(ts) * ws.rho1(ts) ** 2
    assert np.max(np.abs(tilde_prod - bar) / bar) < 1e-12


def test_weight_example_numbers():
    # direct arithmetic of the weight formulas: s=1, A* = -2, zeta* = 3
    s, A, z = 1.0, -2.0, 3.0
    rho0 = math.exp(-s * A)
    rho1 = math.exp(-s * A) * z**-1.5
    rho_hat = math.exp(-s * A) * z**-0.75
    assert rho0 == pytest.approx(7.389056, abs=1e-6)
    assert rho1 == pytest.approx(1.422025, abs=1e-6)
    assert rho_hat == pytest.approx(3.241514, abs=1e-6)
    assert rho_hat**2 == pytest.approx(rho0 * rho1, rel=1e-14)
    assert rho_hat**2 == pytest.approx(10.507412, abs=1e-5)


def test_fitted_constants_finite(weights):
    fc = weights.fitted_constants()
    assert all(np.isfinite(v) for v in fc.values())
    assert fc["tau_t_le_tau_54"] > 0


def test_probe_requires_trials(weights, coeffs, geom, grid_small):
    with pytest.raises(ValueError):
        probe_observability(weights, coeffs, geom, grid_small, trials=5)


def test_probe_homogeneity(weights, coeffs, geom):
    # both sides are quadratic in the data: doubling the terminal state
    # must leave every ratio unchanged
    grid = Grid(n=32, m=32, horizon=1.0)
    base = random_smooth_slice(grid, philox_rng(3, 0))

    rep1 = probe_observability(weights, coeffs, geom, grid, trials=10, draw=lambda k: (base, None))
    rep2 = probe_observability(
        weights, coeffs, geom, grid, trials=10, draw=lambda k: (2.0 * base, None)
    )
    assert rep1.log_c_emp == pytest.approx(rep2.log_c_emp, abs=1e-10)


def test_probe_skips_degenerate_trials(weights, coeffs, geom):
    grid = Grid(n=32, m=32, horizon=1.0)
    base = random_smooth_slice(grid, philox_rng(3, 0))
    rep = probe_observability(
        weights, coeffs, geom, grid, trials=10,
        draw=lambda k: (base if k % 2 == 0 else np.zeros(grid.n), None),
    )
    assert rep.n_skipped == 5


def test_observability_window_monotonicity(weights, coeffs):
    # same adjoint solutions, nested windows: a larger window only grows the
    # right-hand side, so the fitted constant cannot increase
    grid = Grid(n=48, m=48, horizon=1.0)
    consts = []
    for w1 in [(0.40, 0.60), (0.35, 0.65), (0.30, 0.70)]:
        g = ControlGeometry(omega=(0.25, 0.75), omega1=w1, alpha_prime=0.395, beta_prime=0.605)
        rep = probe_observability(weights, coeffs, g, grid, trials=12, rng_seed=5)
        consts.append(rep.log_c_emp)
    assert consts[0] >= consts[1] >= consts[2]


def test_probe_carleman_reports_both_weightings(weights, coeffs, geom):
    grid = Grid(n=32, m=48, horizon=1.0)
    reports = probe_carleman(
        weights, coeffs, geom, grid, trials=10, rng_seed=1, include_vanishing_variant=True
    )
    assert set(reports) == {"state_weighted", "source_flat", "vanishing_envelope"}
    for rep in reports.values():
        assert np.all(np.isfinite(rep.log_ratios))
        assert rep.c_emp >= 0.0


def test_probe_refit_stability(weights, coeffs, geom):
    grid = Grid(n=32, m=48, horizon=1.0)
    rep1 = probe_observability(weights, coeffs, geom, grid, trials=40, rng_seed=21)
    rep2 = probe_observability(weights, coeffs, geom, grid, trials=40, rng_seed=12021)
    assert abs(rep1.log_c_emp - rep2.log_c_emp) < math.log(2.0)


def test_doubling_s_soft_check(weights, psi, coeffs, geom):
    # refitting at doubled s should rarely exceed the original constant
    grid = Grid(n=32, m=48, horizon=1.0)
    rep1 = probe_observability(weights, coeffs, geom, grid, trials=20, rng_seed=2)
    ws2 = build_weights(psi, s=2 * weights.s, lam=weights.lam, T=1.0, m_margin=weights.m_margin)
    rep2 = probe_observability(ws2, coeffs, geom, grid, trials=20, rng_seed=2)
    frac = float(np.mean(rep2.log_ratios <= rep1.log_c_emp))
    # soft check, logged: at desk-scale s (far below the non-constructive
    # threshold) the fitted constant is not yet uniform in s
    print(f"doubled-s trials under the fitted constant: {frac:.0%}")
    assert np.isfinite(frac)
