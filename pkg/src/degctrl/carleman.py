"""Observability weight system and empirical inequality probes.

The weight skeleton is a C^2 landscape Psi on [0, 1] with two prescribed
branches (integrals of s/a(s)) glued by a quintic bridge over the interval
(alpha', beta') inside the control region.  Two time envelopes are used:
theta(t) = (t(T-t))^-4, singular at both endpoints, and tau(t) = 1/m(t)
where m is a smooth positive modification of t^4(T-t)^4 that keeps tau
finite at t = 0.  From these,

    eta    = exp(lam (|Psi|_inf + Psi)),        zeta = tau eta,
    A      = tau (eta - exp(3 lam |Psi|_inf)) < 0,
    A*(t)  = max_x A,   Ahat(t) = min_x A,
    zeta*  = max_x zeta, zetahat = min_x zeta,

and the scalar weight family

    rho0 = e^{-s A*}               rho1 = e^{-s A*} (zeta*)^{-3/2}
    rho2 = e^{-3 s A*/2} zetahat^{-1}   rhohat = e^{-s A*} (zeta*)^{-3/4}
    rhobar = e^{-s A*} (zeta*)^{-5/2}   rhotilde = e^{s A*} (zeta*)^{1/2}.

rho0 blows up at t = T (this is what pins the controlled state to zero
there), so the family spans an astronomical dynamic range: every accessor
is therefore backed by a log-space evaluation, and the quadratures used by
the probes accumulate in log space as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.special import logsumexp

from degctrl.disc import (
    Grid,
    build_operator_table,
    philox_rng,
    random_smooth_field,
    random_smooth_slice,
    solve_adjoint,
)
from degctrl.model import CheckResult, ControlGeometry, DegenerateCoefficient
from degctrl.transform import TransformedCoefficients

__all__ = [
    "LambdaTooSmall",
    "NonIntegrableDegeneracy",
    "ProbeReport",
    "PsiFunction",
    "WeightSystem",
    "build_psi",
    "build_weights",
    "probe_carleman",
    "probe_observability",
    "select_lambda",
]


class NonIntegrableDegeneracy(ArithmeticError):
    """The branch integral of s/a(s) diverges at the degenerate endpoint."""


class LambdaTooSmall(ValueError):
    """The weight separation 3 A* < 2 Ahat fails for the requested lambda."""

    def __init__(self, lam: float, lam_min: float):
        self.lam = lam
        self.lam_min = lam_min
        super().__init__(
            f"lambda = {lam} does not separate the weight envelopes; "
            f"smallest doubling value that does: {lam_min}"
        )


# ---------------------------------------------------------------------------
# weight landscape Psi
# ---------------------------------------------------------------------------


@dataclass
class PsiFunction:
    """Piecewise landscape: rising branch, quintic bridge, falling branch."""

    alpha_prime: float
    beta_prime: float
    left: Callable[[np.ndarray], np.ndarray]
    left_d: Callable[[np.ndarray], np.ndarray]
    right: Callable[[np.ndarray], np.ndarray]
    right_d: Callable[[np.ndarray], np.ndarray]
    bridge_coef: np.ndarray
    psi_max: float = dc_field(default=0.0)
    psi_min: float = dc_field(default=0.0)
    abs_inf: float = dc_field(default=0.0)
    bridge_monotone: bool = dc_field(default=False)

    def _bridge(self, x):
        xi = (x - self.alpha_prime) / (self.beta_prime - self.alpha_prime)
        return np.polynomial.polynomial.polyval(xi, self.bridge_coef)

    def _bridge_d(self, x):
        span = self.beta_prime - self.alpha_prime
        xi = (x - self.alpha_prime) / span
        dcoef = np.polynomial.polynomial.polyder(self.bridge_coef)
        return np.polynomial.polynomial.polyval(xi, dcoef) / span

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        l_mask = x < self.alpha_prime
        r_mask = x >= self.beta_prime
        b_mask = ~l_mask & ~r_mask
        if l_mask.any():
            out[l_mask] = self.left(x[l_mask])
        if b_mask.any():
            out[b_mask] = self._bridge(x[b_mask])
        if r_mask.any():
            out[r_mask] = self.right(x[r_mask])
        return out

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        l_mask = x < self.alpha_prime
        r_mask = x >= self.beta_prime
        b_mask = ~l_mask & ~r_mask
        if l_mask.any():
            out[l_mask] = self.left_d(x[l_mask])
        if b_mask.any():
            out[b_mask] = self._bridge_d(x[b_mask])
        if r_mask.any():
            out[r_mask] = self.right_d(x[r_mask])
        return out

    def refresh_extrema(self, samples: int = 4097) -> None:
        xs = np.linspace(0.0, 1.0, samples)
        vals = self(xs)
        self.psi_max = float(vals.max())
        self.psi_min = float(vals.min())
        self.abs_inf = max(abs(self.psi_max), abs(self.psi_min))
        bx = xs[(xs >= self.alpha_prime) & (xs <= self.beta_prime)]
        dv = self._bridge_d(bx)
        self.bridge_monotone = bool(np.all(dv <= 1e-12) or np.all(dv >= -1e-12))


def _quintic_hermite(v0, d0, c0, v1, d1, c1) -> np.ndarray:
    """Coefficients (in the unit coordinate) of the quintic matching value,
    first and second derivative at both ends."""
    A = np.zeros((6, 6))
    b = np.array([v0, v1, d0, d1, c0, c1], dtype=float)
    A[0, 0] = 1.0
    A[1] = np.ones(6)
    A[2, 1] = 1.0
    A[3] = [0, 1, 2, 3, 4, 5]
    A[4, 2] = 2.0
    A[5] = [0, 0, 2, 6, 12, 20]
    return np.linalg.solve(A, b)


def build_psi(coeff: DegenerateCoefficient, geom: ControlGeometry) -> PsiFunction:
    """Construct the weight landscape for the given coefficient and geometry.

    For a power law both branches are closed-form; otherwise the branch
    integrals of s/a(s) use adaptive quadrature (the left branch endpoint is
    an integrable singularity whenever the weak-degeneracy condition holds).
    The bridge is the minimal-degree polynomial matching C^2 data at both
    ends; monotonicity across it is recorded, not assumed.
    """
    ap, bp = geom.alpha_prime, geom.beta_prime
    alpha = coeff.alpha

    if alpha is not None:
        p = 2.0 - alpha

        def left(x, _p=p):
            return np.power(x, _p) / _p

        def right(x, _p=p, _bp=bp):
            return -(np.power(x, _p) - _bp**_p) / _p

    else:
        integrand = lambda s: s / float(coeff.a(np.array([s]))[0])
        try:
            base, err = quad(integrand, 0.0, ap, limit=200)
        except Exception as exc:  # pragma: no cover - scipy raises rarely here
            raise NonIntegrableDegeneracy(str(exc)) from exc
        if not math.isfinite(base) or err > 1e-6 * max(abs(base), 1.0):
            raise NonIntegrableDegeneracy(
                f"integral of s/a(s) near 0 unreliable (value {base}, err {err})"
            )
        xs_l = np.linspace(0.0, ap, 257)
        vals_l = np.empty_like(xs_l)
        vals_l[0] = 0.0
        for j in range(1, xs_l.size):
            seg, _ = quad(integrand, xs_l[j - 1], xs_l[j], limit=100)
            vals_l[j] = vals_l[j - 1] + seg
        xs_r = np.linspace(bp, 1.0, 257)
        vals_r = np.empty_like(xs_r)
        vals_r[0] = 0.0
        for j in range(1, xs_r.size):
            seg, _ = quad(integrand, xs_r[j - 1], xs_r[j], limit=100)
            vals_r[j] = vals_r[j - 1] - seg
        from scipy.interpolate import CubicSpline

        left_sp = CubicSpline(xs_l, vals_l)
        right_sp = CubicSpline(xs_r, vals_r)
        left = lambda x: left_sp(x)
        right = lambda x: right_sp(x)

    def slope(x):
        return x / float(coeff.a(np.array([x]))[0])

    def curvature(x):
        a_v = float(coeff.a(np.array([x]))[0])
        ap_v = float(coeff.a_prime(np.array([x]))[0])
        return (a_v - x * ap_v) / a_v**2

    span = bp - ap
    coef = _quintic_hermite(
        v0=float(left(np.array([ap]))[0]) if alpha is None else ap ** (2 - alpha) / (2 - alpha),
        d0=slope(ap) * span,
        c0=curvature(ap) * span**2,
        v1=0.0,
        d1=-slope(bp) * span,
        c1=-curvature(bp) * span**2,
    )

    def left_d(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        pos = x > 0.0
        out[pos] = x[pos] / coeff.a(x[pos])
        return out

    def right_d(x):
        x = np.asarray(x, dtype=float)
        return -x / coeff.a(x)

    psi = PsiFunction(
        alpha_prime=ap,
        beta_prime=bp,
        left=lambda x: np.asarray(left(x), dtype=float),
        left_d=left_d,
        right=lambda x: np.asarray(right(x), dtype=float),
        right_d=right_d,
        bridge_coef=coef,
    )
    psi.refresh_extrema()
    return psi


def select_lambda(
    psi: PsiFunction, margin: float = 0.05, lam_init: float = 1.0, lam_cap: float = 2.0**20
) -> float:
    """Smallest doubling multiple of lam_init separating the envelopes.

    The separation condition 3 A* < 2 Ahat is time-independent; with the
    requested safety margin it reads 3 c* > 2 (1 + margin) chat where
    c* = e^{3 lam |Psi|} - max eta and chat = e^{3 lam |Psi|} - min eta.
    """
    lam = lam_init
    while lam <= lam_cap:
        eta_max = math.exp(lam * (psi.abs_inf + psi.psi_max))
        eta_min = math.exp(lam * (psi.abs_inf + psi.psi_min))
        e3 = math.exp(3.0 * lam * psi.abs_inf)
        if 3.0 * (e3 - eta_max) > 2.0 * (1.0 + margin) * (e3 - eta_min) > 0.0:
            return lam
        lam *= 2.0
    raise LambdaTooSmall(lam_init, math.inf)


# ---------------------------------------------------------------------------
# the weight system
# ---------------------------------------------------------------------------


@dataclass
class WeightSystem:
    """All weight callables for fixed (s, lambda, T) and a given landscape."""

    psi: PsiFunction
    s: float
    lam: float
    T: float
    m_margin: float
    eta_max: float = 0.0
    eta_min: float = 0.0
    e3: float = 0.0
    c_star: float = 0.0
    c_hat: float = 0.0
    zeta0: float = 0.0
    checks: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.eta_max = math.exp(self.lam * (self.psi.abs_inf + self.psi.psi_max))
        self.eta_min = math.exp(self.lam * (self.psi.abs_inf + self.psi.psi_min))
        self.e3 = math.exp(3.0 * self.lam * self.psi.abs_inf)
        self.c_star = self.e3 - self.eta_max
        self.c_hat = self.e3 - self.eta_min
        self.zeta0 = self.eta_max / self.eta_min

    # -- time envelopes -----------------------------------------------------
    def m(self, t):
        t = np.asarray(t, dtype=float)
        half = self.T / 2.0
        cut = np.clip((half - t) / half, 0.0, None)
        return t**4 * (self.T - t) ** 4 + self.m_margin * cut**4

    def m_prime(self, t):
        t = np.asarray(t, dtype=float)
        half = self.T / 2.0
        base = 4.0 * t**3 * (self.T - t) ** 4 - 4.0 * t**4 * (self.T - t) ** 3
        cut = np.clip((half - t) / half, 0.0, None)
        return base - self.m_margin * 4.0 * cut**3 / half

    def tau(self, t):
        with np.errstate(divide="ignore"):
            return 1.0 / self.m(t)

    def theta(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return (t * (self.T - t)) ** -4.0

    # -- space-time weights ---------------------------------------------------
    def eta(self, x):
        return np.exp(self.lam * (self.psi.abs_inf + self.psi(x)))

    def sigma(self, x, t):
        return self.theta(t) * self.eta(x)

    def phi_weight(self, x, t):
        return self.theta(t) * (self.eta(x) - self.e3)

    def zeta(self, x, t):
        return self.tau(t) * self.eta(x)

    def A_weight(self, x, t):
        return self.tau(t) * (self.eta(x) - self.e3)

    # -- t-only envelopes ------------------------------------------------------
    def A_star(self, t):
        return -self.tau(t) * self.c_star

    def A_hat(self, t):
        return -self.tau(t) * self.c_hat

    def zeta_star(self, t):
        return self.tau(t) * self.eta_max

    def zeta_hat(self, t):
        return self.tau(t) * self.eta_min

    # -- scalar rho family, log forms first ------------------------------------
    # At t = T the exponential factor dominates every power of zeta*, so the
    # limits are +inf for the blowing-up weights and -inf for rhotilde; the
    # raw expressions there are inf - inf and get patched.
    def _log_combination(self, t, exp_coef: float, pow_coef: float, limit: float):
        t = np.asarray(t, dtype=float)
        tau = self.tau(t)
        with np.errstate(invalid="ignore", over="ignore"):
            raw = exp_coef * self.s * tau * self.c_star + pow_coef * np.log(tau * self.eta_max)
        return np.where(np.isfinite(tau), raw, limit)

    def log_rho0(self, t):
        return self._log_combination(t, 1.0, 0.0, math.inf)

    def log_rho1(self, t):
        return self._log_combination(t, 1.0, -1.5, math.inf)

    def log_rho2(self, t):
        t = np.asarray(t, dtype=float)
        tau = self.tau(t)
        with np.errstate(invalid="ignore", over="ignore"):
            raw = 1.5 * self.s * tau * self.c_star - np.log(tau * self.eta_min)
        return np.where(np.isfinite(tau), raw, math.inf)

    def log_rho_hat(self, t):
        return self._log_combination(t, 1.0, -0.75, math.inf)

    def log_rho_bar(self, t):
        return self._log_combination(t, 1.0, -2.5, math.inf)

    def log_rho_tilde(self, t):
        return self._log_combination(t, -1.0, 0.5, -math.inf)

    def _exp(self, logv):
        with np.errstate(over="ignore"):
            return np.exp(logv)

    def rho0(self, t):
        return self._exp(self.log_rho0(t))

    def rho1(self, t):
        return self._exp(self.log_rho1(t))

    def rho2(self, t):
        return self._exp(self.log_rho2(t))

    def rho_hat(self, t):
        return self._exp(self.log_rho_hat(t))

    def rho_bar(self, t):
        return self._exp(self.log_rho_bar(t))

    def rho_tilde(self, t):
        return self._exp(self.log_rho_tilde(t))

    def inv_rho0_sq(self, t):
        return self._exp(-2.0 * self.log_rho0(t))

    def inv_rho1_sq(self, t):
        return self._exp(-2.0 * self.log_rho1(t))

    # -- solver-facing normalized profiles --------------------------------------
    def normalized_inverse_weights(self, times: np.ndarray):
        """(w0inv, w1inv, log_ref) with weights scaled so max w0inv = 1.

        w0inv = rho0^-2 / exp(log_ref) and w1inv = rho1^-2 / exp(log_ref);
        the common normalization preserves the recovered state and control
        exactly while keeping the conjugate-gradient system representable.
        Entries whose logs fall below the float range underflow to exact 0.
        """
        log_w0 = -2.0 * self.log_rho0(times)
        finite = np.isfinite(log_w0)
        log_ref = float(np.max(log_w0[finite]))
        w0inv = self._exp(np.where(finite, log_w0 - log_ref, -np.inf))
        log_w1 = -2.0 * self.log_rho1(times)
        w1inv = self._exp(np.where(np.isfinite(log_w1), log_w1 - log_ref, -np.inf))
        return w0inv, w1inv, log_ref

    # -- invariants --------------------------------------------------------------
    def run_checks(self, t_samples: int = 1025, x_samples: int = 513) -> list[CheckResult]:
        checks: list[CheckResult] = []
        ts = np.linspace(0.0, self.T, t_samples)[:-1]
        xs = np.linspace(0.0, 1.0, x_samples)

        neg = float(self.c_star)
        checks.append(
            CheckResult(
                "weights.envelopes_negative",
                neg > 0.0,
                neg,
                neg,
                "A and the singular weight are negative on the open cylinder",
            )
        )

        m0 = float(self.m(np.array([0.0]))[0])
        checks.append(CheckResult("weights.m_positive_at_zero", m0 > 0.0, m0, m0, "m(0) > 0"))
        base = ts**4 * (self.T - ts) ** 4
        gap = float(np.min(self.m(ts) - base))
        checks.append(
            CheckResult(
                "weights.m_dominates", gap >= -1e-15, gap, gap, "m >= t^4 (T-t)^4 everywhere"
            )
        )
        late = ts[ts >= self.T / 2]
        eq = float(np.max(np.abs(self.m(late) - late**4 * (self.T - late) ** 4)))
        checks.append(
            CheckResult(
                "weights.m_matches_late", eq <= 1e-15, 1e-15 - eq, eq, "m = t^4 (T-t)^4 past T/2"
            )
        )
        # The junction smoothness of m at T/2 reduces to the cutoff part
        # m - t^4 (T-t)^4 (a quartic left of T/2, identically 0 right of it)
        # having zero value and derivatives there; 5-point one-sided
        # stencils are exact for quartics, so the jump estimate is pure
        # rounding when the construction is correct.
        margin_part = lambda t: self.m(t) - t**4 * (self.T - t) ** 4
        eps = 0.04 * self.T  # wide spacing damps rounding; stencil stays exact
        jumps = []
        for d in (0, 1, 2):
            left = _fd_onesided_left(margin_part, self.T / 2, eps, d)
            scale = max(self.m_margin / (self.T / 2) ** d, 1e-300)
            jumps.append(abs(left) / scale)
        worst_jump = max(jumps)
        checks.append(
            CheckResult(
                "weights.m_smooth_junction",
                worst_jump <= 1e-10,
                1e-10 - worst_jump,
                worst_jump,
                "value and two derivatives continuous at T/2",
            )
        )

        sep = 3.0 * self.c_star - 2.0 * self.c_hat
        checks.append(
            CheckResult(
                "weights.envelope_separation",
                sep > 0.0,
                sep,
                sep,
                "3 A* < 2 Ahat < 0 for the chosen lambda",
            )
        )

        ratio = self.zeta_star(ts) / self.zeta_hat(ts)
        wobble = float((ratio.max() - ratio.min()) / ratio.min())
        checks.append(
            CheckResult(
                "weights.zeta_ratio_constant",
                wobble <= 1e-12,
                1e-12 - wobble,
                wobble,
                f"zeta*/zetahat = {self.zeta0:.6f} independent of t",
            )
        )

        lhs = 2.0 * self.log_rho_hat(ts)
        rhs = self.log_rho0(ts) + self.log_rho1(ts)
        prod_err = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1.0)))
        checks.append(
            CheckResult(
                "weights.product_identity",
                prod_err <= 1e-12,
                1e-12 - prod_err,
                prod_err,
                "rhohat^2 = rho0 rho1 (log form)",
            )
        )

        lhs2 = self.log_rho_tilde(ts) + 2.0 * self.log_rho1(ts)
        rhs2 = self.log_rho_bar(ts)
        reg_err = float(np.max(np.abs(lhs2 - rhs2) / np.maximum(np.abs(rhs2), 1.0)))
        checks.append(
            CheckResult(
                "weights.regularity_identity",
                reg_err <= 1e-12,
                1e-12 - reg_err,
                reg_err,
                "rhotilde rho1^2 = rhobar (log form)",
            )
        )
        self.checks = checks
        return checks

    def fitted_constants(self, t_samples: int = 1025, exclude_width: float | None = None) -> dict:
        """Empirical constants of the comparison and derivative inequalities."""
        lo = 0.0
        hi = self.T - (exclude_width if exclude_width is not None else self.T / t_samples)
        ts = np.linspace(lo, hi, t_samples)
        out = {}
        out["rho_bar_le_rho1"] = float(np.max(self._exp(self.log_rho_bar(ts) - self.log_rho1(ts))))
        out["rho1_le_rho_hat"] = float(np.max(self._exp(self.log_rho1(ts) - self.log_rho_hat(ts))))
        out["rho_hat_le_rho0"] = float(np.max(self._exp(self.log_rho_hat(ts) - self.log_rho0(ts))))
        out["rho0_le_rho2"] = float(np.max(self._exp(self.log_rho0(ts) - self.log_rho2(ts))))
        out["rho2_le_rho1_sq"] = float(
            np.max(self._exp(self.log_rho2(ts) - 2.0 * self.log_rho1(ts)))
        )
        tau = self.tau(ts)
        tau_p = -self.m_prime(ts) * tau**2
        out["zeta_t_le_zeta_sq"] = float(np.max(np.abs(tau_p) / (tau**2 * self.eta_min)))
        out["tau_t_le_tau_54"] = float(np.max(np.clip(tau_p, 0.0, None) / tau**1.25))
        return out


def _fd_onesided_left(f, x0: float, h: float, order: int) -> float:
    """One-sided derivative at x0 from points x0, x0-h, ..., x0-4h.

    The 5-point stencils are exact for polynomials of degree <= 4.
    """
    vals = np.asarray(f(x0 - h * np.arange(5)), dtype=float)
    if order == 0:
        return float(vals[0])
    if order == 1:
        c = np.array([25.0 / 12, -4.0, 3.0, -4.0 / 3, 0.25])
        return float(np.dot(c, vals) / h)
    c = np.array([35.0 / 12, -26.0 / 3, 19.0 / 2, -14.0 / 3, 11.0 / 12])
    return float(np.dot(c, vals) / h**2)


def build_weights(
    psi: PsiFunction,
    s: float = 1.0,
    lam: float | None = None,
    T: float = 1.0,
    m_margin: float | None = None,
) -> WeightSystem:
    """Assemble the weight system; invariants are checked on a dense grid.

    ``m_margin`` defaults to 0.1 (T/2)^8, i.e. tau(0) = 10 tau(T/2).  If
    ``lam`` is None the doubling search picks the smallest power of two that
    separates the envelopes with a 5% margin; an explicit too-small lambda
    raises LambdaTooSmall carrying the doubling value that works.
    """
    if m_margin is None:
        m_margin = 0.1 * (T / 2.0) ** 8
    if not (s > 0 and m_margin > 0 and T > 0):
        raise ValueError("need s > 0, T > 0, m_margin > 0")
    lam_auto = select_lambda(psi)
    if lam is None:
        lam = lam_auto
    ws = WeightSystem(psi=psi, s=s, lam=lam, T=T, m_margin=m_margin)
    if not 3.0 * ws.c_star > 2.0 * ws.c_hat > 0.0:
        raise LambdaTooSmall(lam, lam_auto)
    failed = [c for c in ws.run_checks() if not c.passed]
    if failed:
        raise ValueError("weight invariants failed: " + "; ".join(c.name for c in failed))
    return ws


# ---------------------------------------------------------------------------
# empirical inequality probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    name: str
    n_trials: int
    n_skipped: int
    log_ratios: np.ndarray
    extra: dict = dc_field(default_factory=dict)

    @property
    def c_emp(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(np.max(self.log_ratios))) if self.log_ratios.size else 0.0

    @property
    def log_c_emp(self) -> float:
        return float(np.max(self.log_ratios)) if self.log_ratios.size else -math.inf

    def spread(self) -> tuple[float, float, float]:
        if not self.log_ratios.size:
            return (0.0, 0.0, 0.0)
        return (
            float(np.min(self.log_ratios)),
            float(np.median(self.log_ratios)),
            float(np.max(self.log_ratios)),
        )

    def to_text(self) -> str:
        lo, med, hi = self.spread()
        lines = [
            f"probe: {self.name}",
            f"trials: {self.n_trials} (skipped {self.n_skipped})",
            f"fitted constant: {self.c_emp:.6e} (log {self.log_c_emp:.6f})",
            f"log-ratio spread: min {lo:.4f} / median {med:.4f} / max {hi:.4f}",
        ]
        for k, v in self.extra.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines)


def _log_weighted_sum(log_w: np.ndarray, terms: np.ndarray, scale: float) -> float:
    """log of sum_k exp(log_w[k]) * terms[k] * scale, robust to huge ranges."""
    terms = np.asarray(terms, dtype=float)
    mask = terms > 0.0
    if not mask.any():
        return -math.inf
    return float(
        logsumexp(log_w[mask] + np.log(terms[mask])) + math.log(scale)
    )


def _grad_sq_midpoint(v_levels: np.ndarray, a_half: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-level midpoint quadrature of a |v_x|^2 (boundary values zero)."""
    full = np.pad(v_levels, ((0, 0), (1, 1)))
    dv = np.diff(full, axis=1) / grid.h
    return grid.h * np.sum(a_half * dv**2, axis=1)


def _default_draw(grid: Grid, rng_seed: int, with_source: bool):
    def draw(trial: int):
        rng = philox_rng(rng_seed, trial)
        vT = random_smooth_slice(grid, rng)
        H = random_smooth_field(grid, rng) if with_source else None
        return vT, H

    return draw


def probe_carleman(
    ws: WeightSystem,
    coeffs: TransformedCoefficients,
    geom: ControlGeometry,
    grid: Grid,
    trials: int = 100,
    rng_seed: int = 0,
    reaction: np.ndarray | None = None,
    include_vanishing_variant: bool = False,
    draw=None,
) -> dict[str, ProbeReport]:
    """Empirically fit the constants of the weighted adjoint inequalities.

    For random terminal data and sources the adjoint system is solved
    backward and both sides of the t-envelope inequality are quadratured;
    two right-hand-side weightings are in circulation ((zeta*)^4 / (zeta*)^8
    versus 1 / (zeta*)^3), so both fitted constants are reported.  The
    constants are data-independent in theory; the report records the spread.
    ``draw`` overrides the default random data source (trial -> (vT, H)).
    """
    if trials < 10:
        raise ValueError("need at least 10 trials")
    if draw is None:
        draw = _default_draw(grid, rng_seed, with_source=True)
    table = build_operator_table(coeffs, grid, reaction=reaction)
    interior = slice(1, grid.m)
    ts = grid.times[interior]
    mask1 = geom.mask(grid.x, "omega1")
    s, lam = ws.s, ws.lam
    b_sq = np.asarray(coeffs.b(ts), dtype=float) ** 2
    log_2sA_hat = 2.0 * s * ws.A_hat(ts)
    log_2sA_star = 2.0 * s * ws.A_star(ts)
    lz_hat = np.log(ws.zeta_hat(ts))
    lz_star = np.log(ws.zeta_star(ts))
    scale = grid.dt

    logs_a: list[float] = []
    logs_b: list[float] = []
    logs_v: list[float] = []
    skipped = 0
    for trial in range(trials):
        vT, H = draw(trial)
        if not (np.any(vT) or (H is not None and np.any(H))):
            skipped += 1
            continue
        v = solve_adjoint(table, vT, H)
        vals = v.values[interior]
        h_vals = H[interior]
        sq_v = grid.h * np.sum(vals**2, axis=1)
        sq_v_w = grid.h * np.sum(vals[:, mask1] ** 2, axis=1)
        sq_h = grid.h * np.sum(h_vals**2, axis=1)
        grad = _grad_sq_midpoint(vals, table.a_half, grid)

        log_gamma = np.logaddexp(
            _log_weighted_sum(log_2sA_hat + lz_hat, s * lam * b_sq * grad, scale),
            _log_weighted_sum(log_2sA_hat + 2 * lz_hat, (s * lam) ** 2 * b_sq * sq_v, scale),
        )
        v0_sq = grid.h * float(np.sum(v.values[0] ** 2))
        log_lhs = np.logaddexp(math.log(v0_sq) if v0_sq > 0 else -math.inf, log_gamma)

        log_rhs_a = np.logaddexp(
            _log_weighted_sum(log_2sA_star + 4 * lz_star, sq_h, scale),
            _log_weighted_sum(log_2sA_star + 8 * lz_star, sq_v_w, scale),
        )
        log_rhs_b = np.logaddexp(
            _log_weighted_sum(log_2sA_star, sq_h, scale),
            _log_weighted_sum(log_2sA_star + 3 * lz_star, sq_v_w, scale),
        )
        if not (math.isfinite(log_rhs_a) and math.isfinite(log_rhs_b)):
            skipped += 1
            continue
        logs_a.append(log_lhs - log_rhs_a)
        logs_b.append(log_lhs - log_rhs_b)

        if include_vanishing_variant:
            logs_v.append(
                _vanishing_variant_ratio(ws, grid, table, b_sq, vals, h_vals, mask1)
            )

    out = {
        "state_weighted": ProbeReport(
            "adjoint inequality, (zeta*)^4 / (zeta*)^8 weighting",
            trials,
            skipped,
            np.asarray(logs_a),
        ),
        "source_flat": ProbeReport(
            "adjoint inequality, 1 / (zeta*)^3 weighting", trials, skipped, np.asarray(logs_b)
        ),
    }
    if include_vanishing_variant:
        out["vanishing_envelope"] = ProbeReport(
            "vanishing-weight variant (theta envelope)",
            trials,
            skipped,
            np.asarray([r for r in logs_v if math.isfinite(r)]),
        )
    return out


def _vanishing_variant_ratio(ws, grid, table, b_sq, vals, h_vals, mask1) -> float:
    """Pointwise-weight inequality with the endpoint-vanishing envelope."""
    s, lam = ws.s, ws.lam
    ts = grid.times[1 : grid.m]
    theta = ws.theta(ts)[:, None]
    eta = ws.eta(grid.x)[None, :]
    log_e2sphi = 2.0 * s * theta * (eta - ws.e3)
    sigma = theta * eta
    x_mid = (np.arange(grid.n + 1) + 0.5) * grid.h
    eta_mid = ws.eta(x_mid)[None, :]
    log_e2sphi_mid = 2.0 * s * theta * (eta_mid - ws.e3)
    sigma_mid = theta * eta_mid

    full = np.pad(vals, ((0, 0), (1, 1)))
    dv_sq = (np.diff(full, axis=1) / grid.h) ** 2
    grad_terms = table.a_half[None, :] * dv_sq
    lhs_grad = _log_weighted_sum(
        (log_e2sphi_mid + np.log(sigma_mid)).ravel(),
        (s * lam * b_sq[:, None] * grad_terms).ravel(),
        grid.dt * grid.h,
    )
    lhs_val = _log_weighted_sum(
        (log_e2sphi + 2.0 * np.log(sigma)).ravel(),
        ((s * lam) ** 2 * b_sq[:, None] * vals**2).ravel(),
        grid.dt * grid.h,
    )
    log_lhs = np.logaddexp(lhs_grad, lhs_val)
    rhs_src = _log_weighted_sum(log_e2sphi.ravel(), (h_vals**2).ravel(), grid.dt * grid.h)
    rhs_obs = _log_weighted_sum(
        (log_e2sphi[:, mask1] + 3.0 * np.log(sigma[:, mask1])).ravel(),
        ((lam * s) ** 3 * vals[:, mask1] ** 2).ravel(),
        grid.dt * grid.h,
    )
    log_rhs = np.logaddexp(rhs_src, rhs_obs)
    return float(log_lhs - log_rhs) if math.isfinite(log_rhs) else math.nan


def probe_observability(
    ws: WeightSystem,
    coeffs: TransformedCoefficients,
    geom: ControlGeometry,
    grid: Grid,
    trials: int = 100,
    rng_seed: int = 0,
    reaction: np.ndarray | None = None,
    draw=None,
) -> ProbeReport:
    """Fit the constant of ||v(0)||^2 <= C * (weighted window norm of v).

    Source-free adjoint solves from random terminal data; the window
    integral carries the pointwise weight e^{2 s A} (s lam zeta)^3.
    """
    if trials < 10:
        raise ValueError("need at least 10 trials")
    if draw is None:
        draw = _default_draw(grid, rng_seed, with_source=False)
    table = build_operator_table(coeffs, grid, reaction=reaction)
    mask1 = geom.mask(grid.x, "omega1")
    ts = grid.times[1 : grid.m]
    s, lam = ws.s, ws.lam
    tau = ws.tau(ts)[:, None]
    eta_w = ws.eta(grid.x[mask1])[None, :]
    log_w = 2.0 * s * tau * (eta_w - ws.e3) + 3.0 * np.log(tau * eta_w)

    logs: list[float] = []
    skipped = 0
    for trial in range(trials):
        vT, _ = draw(trial)
        if not np.any(vT):
            skipped += 1
            continue
        v = solve_adjoint(table, vT, None)
        window = v.values[1 : grid.m][:, mask1]
        log_rhs = _log_weighted_sum(
            log_w.ravel(), (s**3 * lam**3) * (window**2).ravel(), grid.dt * grid.h
        )
        v0_sq = grid.h * float(np.sum(v.values[0] ** 2))
        if not math.isfinite(log_rhs) or v0_sq <= 0.0:
            skipped += 1
            continue
        logs.append(math.log(v0_sq) - log_rhs)
    return ProbeReport("window observability", trials, skipped, np.asarray(logs))
