"""Problem data and structural validation.

A problem instance couples four ingredients: a diffusion coefficient a(x)
that degenerates at x = 0, a C^1 reaction term F(x, t, r), the motion
ell(t) of the right endpoint, and the control geometry (the control window
and the auxiliary interval used to build the observability weight).  The
structural hypotheses on these objects (weak degeneracy x a'(x) <= K a(x)
with K < 1, the self-similarity a(f(t) y) = g(t) a(y), bounded logarithmic
derivatives of ell and of the rescaled diffusivity b(t) = g(t)/ell(t)^2,
quadratic accuracy of the linearization of F) are checked by dense sampling;
``validate_problem`` reports one measured margin per condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CheckResult",
    "ControlGeometry",
    "DegenerateCoefficient",
    "DegenerateDomain",
    "DomainMotion",
    "NonFiniteSample",
    "Nonlinearity",
    "OutOfRange",
    "ValidationReport",
    "power_law_metadata",
    "validate_problem",
]


class OutOfRange(ValueError):
    """A declared parameter lies outside its admissible range."""


class NonFiniteSample(ArithmeticError):
    """A user callable returned NaN or infinity on the validation sample."""


class DegenerateDomain(ValueError):
    """The moving interval collapses: ell(t) <= 0 somewhere on [0, T]."""


@dataclass(frozen=True)
class DegenerateCoefficient:
    """Diffusion law a(x) with a(0) = 0, together with its scaling data.

    ``a`` and ``a_prime`` must accept numpy arrays.  ``K`` is the declared
    weak-degeneracy constant (x a' <= K a).  ``f_scale``/``g_scale`` realize
    the self-similarity a(f(t) y) = g(t) a(y); for a pure power law they are
    tied to the domain motion (f = ell, g = ell**alpha) and may be left None
    until a motion is available.
    """

    a: Callable[[np.ndarray], np.ndarray]
    a_prime: Callable[[np.ndarray], np.ndarray]
    K: float
    alpha: float | None = None
    f_scale: Callable[[np.ndarray], np.ndarray] | None = None
    g_scale: Callable[[np.ndarray], np.ndarray] | None = None
    nondegenerate_override: bool = False

    def bind_motion(self, motion: "DomainMotion") -> "DegenerateCoefficient":
        """Return a copy whose scaling pair (f, g) follows ``motion``.

        Only meaningful for power laws, where g = f**alpha holds for any
        positive f.  Custom coefficients must supply their own pair.
        """
        if self.alpha is None:
            return self
        alpha = self.alpha
        return DegenerateCoefficient(
            a=self.a,
            a_prime=self.a_prime,
            K=self.K,
            alpha=alpha,
            f_scale=motion.ell,
            g_scale=lambda t, _a=alpha: motion.ell(t) ** _a,
            nondegenerate_override=self.nondegenerate_override,
        )


def power_law_metadata(
    alpha: float,
    motion: "DomainMotion | None" = None,
    allow_nondegenerate: bool = False,
) -> DegenerateCoefficient:
    """Coefficient a(x) = x**alpha for 0 <= alpha < 1.

    alpha = 0 gives the constant coefficient a = 1, which violates a(0) = 0;
    it is admitted only with ``allow_nondegenerate=True`` as a sanity mode
    for classical heat-equation regression tests.  When ``motion`` is given
    the scaling pair is bound immediately (f = ell, g = ell**alpha).
    """
    if not 0.0 <= alpha < 1.0:
        raise OutOfRange(f"power-law exponent must lie in [0, 1), got {alpha}")
    if alpha == 0.0 and not allow_nondegenerate:
        raise OutOfRange(
            "alpha = 0 is the non-degenerate sanity mode; "
            "pass allow_nondegenerate=True to use it"
        )

    def a(x, _al=alpha):
        x = np.asarray(x, dtype=float)
        return np.ones_like(x) if _al == 0.0 else np.power(x, _al)

    def a_prime(x, _al=alpha):
        x = np.asarray(x, dtype=float)
        if _al == 0.0:
            return np.zeros_like(x)
        with np.errstate(divide="ignore"):
            return _al * np.power(x, _al - 1.0)

    coeff = DegenerateCoefficient(
        a=a,
        a_prime=a_prime,
        K=alpha,
        alpha=alpha,
        nondegenerate_override=(alpha == 0.0),
    )
    return coeff.bind_motion(motion) if motion is not None else coeff


@dataclass(frozen=True)
class DomainMotion:
    """Right endpoint ell(t) of the space interval over the horizon [0, T].

    ``C_ell`` and ``C_b`` are optional declared bounds on ell'/ell and on
    b'/b; validation measures the actual maxima and compares when bounds are
    declared, otherwise it just records them.
    """

    ell: Callable[[np.ndarray], np.ndarray]
    ell_prime: Callable[[np.ndarray], np.ndarray]
    T: float
    C_ell: float | None = None
    C_b: float | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise OutOfRange(f"horizon must be positive, got {self.T}")

    @staticmethod
    def affine(ell0: float, rate: float, T: float, **kw) -> "DomainMotion":
        return DomainMotion(
            ell=lambda t: ell0 + rate * np.asarray(t, dtype=float),
            ell_prime=lambda t: np.full_like(np.asarray(t, dtype=float), rate),
            T=T,
            **kw,
        )

    @staticmethod
    def exponential(ell0: float, rate: float, T: float, **kw) -> "DomainMotion":
        return DomainMotion(
            ell=lambda t: ell0 * np.exp(rate * np.asarray(t, dtype=float)),
            ell_prime=lambda t: ell0 * rate * np.exp(rate * np.asarray(t, dtype=float)),
            T=T,
            **kw,
        )

    @staticmethod
    def constant(ell0: float, T: float, **kw) -> "DomainMotion":
        return DomainMotion.affine(ell0, 0.0, T, **kw)

    def b(self, coeff: DegenerateCoefficient) -> Callable[[np.ndarray], np.ndarray]:
        """Rescaled diffusivity b(t) = g(t) / ell(t)^2."""
        g = coeff.g_scale
        if g is None:
            if coeff.alpha is None:
                raise OutOfRange("custom coefficient needs an explicit g_scale")
            g = lambda t, _al=coeff.alpha: self.ell(t) ** _al
        return lambda t: g(t) / self.ell(t) ** 2


@dataclass(frozen=True)
class Nonlinearity:
    """Reaction term F(x, t, r) with explicit partial derivative in r.

    ``C_quad`` bounds the linearization remainder:
    |F(x,t,r1) - F(x,t,r2) - D3F(x,t,r2)(r1 - r2)| <= C_quad |r1 - r2|^2.
    ``d3f_bound`` is the declared sup of |D3F| on the sampled range.
    """

    F: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    D3F: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    C_quad: float
    d3f_bound: float
    name: str = "custom"

    @staticmethod
    def linear(c: float = 0.0) -> "Nonlinearity":
        """F = c * r.  The linearization is exact (C_quad = 0)."""
        return Nonlinearity(
            F=lambda x, t, r: c * r,
            D3F=lambda x, t, r: c * np.ones_like(np.asarray(r, dtype=float)),
            C_quad=0.0,
            d3f_bound=abs(c),
            name="linear",
        )

    @staticmethod
    def sine() -> "Nonlinearity":
        """F = sin r, D3F = cos r; Taylor remainder constant 1/2."""
        return Nonlinearity(
            F=lambda x, t, r: np.sin(r),
            D3F=lambda x, t, r: np.cos(r),
            C_quad=0.5,
            d3f_bound=1.0,
            name="sine",
        )

    @staticmethod
    def saturating_cubic() -> "Nonlinearity":
        """F = r^3 / (1 + r^2), globally Lipschitz with bounded curvature."""

        def f(x, t, r):
            r = np.asarray(r, dtype=float)
            return r**3 / (1.0 + r**2)

        def d3f(x, t, r):
            r = np.asarray(r, dtype=float)
            return (3.0 * r**2 + r**4) / (1.0 + r**2) ** 2

        # sup |d^2F/dr^2| = max |6r - 2r^3| / (1+r^2)^3 = 1.456 (at r = 0.4),
        # so the quadratic-remainder constant is 0.728; sup D3F = 9/8 at r^2 = 3.
        return Nonlinearity(F=f, D3F=d3f, C_quad=0.75, d3f_bound=1.125, name="saturating_cubic")

    @staticmethod
    def by_name(name: str, c: float = 0.0) -> "Nonlinearity":
        table = {
            "linear": lambda: Nonlinearity.linear(c),
            "sine": Nonlinearity.sine,
            "saturating_cubic": Nonlinearity.saturating_cubic,
        }
        try:
            return table[name]()
        except KeyError:
            raise OutOfRange(f"unknown nonlinearity {name!r}; known: {sorted(table)}") from None


@dataclass(frozen=True)
class ControlGeometry:
    """Control window geometry on the unit interval.

    ``omega`` is the nominal control region, ``omega1`` the (compactly
    included) window that actually carries the control, and
    ``(alpha_prime, beta_prime)`` the interval on which the observability
    weight switches between its two closed-form branches.
    """

    omega: tuple[float, float]
    omega1: tuple[float, float]
    alpha_prime: float
    beta_prime: float

    def __post_init__(self):
        a, b = self.omega
        a1, b1 = self.omega1
        if not (0.0 < a < b < 1.0):
            raise OutOfRange(f"omega must be an interval inside (0, 1), got {self.omega}")
        if not (a < a1 < b1 < b):
            raise OutOfRange("closure of omega1 must be contained in omega")
        if not (0.0 < self.alpha_prime < self.beta_prime < 1.0):
            raise OutOfRange("need 0 < alpha' < beta' < 1")
        if not (a <= self.alpha_prime and self.beta_prime <= b):
            raise OutOfRange("[alpha', beta'] must be contained in omega")

    @property
    def omega_prime(self) -> tuple[float, float]:
        return (self.alpha_prime, self.beta_prime)

    @staticmethod
    def default(omega1: tuple[float, float] = (0.35, 0.65)) -> "ControlGeometry":
        """Window omega1 with omega padded outward and the branch interval
        shrunk 15% inward from omega1."""
        a1, b1 = omega1
        pad = 0.3 * (b1 - a1)
        shrink = 0.15 * (b1 - a1)
        return ControlGeometry(
            omega=(max(a1 - pad, 1e-3), min(b1 + pad, 1.0 - 1e-3)),
            omega1=omega1,
            alpha_prime=a1 + shrink,
            beta_prime=b1 - shrink,
        )

    def mask(self, x: np.ndarray, which: str = "omega1") -> np.ndarray:
        lo, hi = {"omega": self.omega, "omega1": self.omega1, "omega_prime": self.omega_prime}[which]
        return (x > lo) & (x < hi)


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one sampled hypothesis check.

    ``margin`` is signed distance to violation (positive = pass) in the
    natural units of the check; ``value`` is the measured extremum itself.
    """

    name: str
    passed: bool
    margin: float
    value: float
    detail: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:36s} margin={self.margin:+.3e}  {self.detail}"


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, *args, **kw):
        self.checks.append(CheckResult(*args, **kw))

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [str(c) for c in self.checks]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _finite_or_raise(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteSample(f"{what} returned non-finite values on the sample grid")
    return arr


def validate_problem(
    coeff: DegenerateCoefficient,
    motion: DomainMotion,
    nl: Nonlinearity,
    geom: ControlGeometry,
    samples: int = 1024,
) -> ValidationReport:
    """Check every structural hypothesis by dense sampling.

    The degeneracy conditions are sampled both on the unit interval and on
    (0, max ell] since the coefficient is used on both before and after the
    rescaling.  All checks are deterministic for a fixed ``samples``.
    """
    if samples < 16:
        raise OutOfRange(f"need at least 16 samples per axis, got {samples}")

    coeff = coeff.bind_motion(motion)
    rep = ValidationReport()
    ts = np.linspace(0.0, motion.T, samples)

    ell = _finite_or_raise(motion.ell(ts), "ell")
    if np.any(ell <= 0.0):
        raise DegenerateDomain("ell(t) <= 0 on the sampled horizon")
    ell_max = float(ell.max())

    # -- diffusion coefficient ------------------------------------------------
    xs = np.concatenate(
        [np.linspace(0.0, 1.0, samples), np.linspace(0.0, ell_max, samples)]
    )
    xs_pos = xs[xs > 0.0]
    a_vals = _finite_or_raise(coeff.a(xs_pos), "a")
    a0 = float(np.asarray(coeff.a(np.array([0.0]))).ravel()[0])
    if coeff.nondegenerate_override:
        rep.add(
            "coefficient.zero_at_origin",
            True,
            0.0,
            a0,
            "override: constant-coefficient sanity mode, a(0) != 0 accepted",
        )
    else:
        rep.add(
            "coefficient.zero_at_origin",
            abs(a0) <= 1e-14,
            1e-14 - abs(a0),
            a0,
            "a(0) = 0",
        )
    rep.add(
        "coefficient.positive",
        bool(np.all(a_vals > 0.0)),
        float(a_vals.min()),
        float(a_vals.min()),
        "a > 0 away from the origin",
    )
    ap_vals = _finite_or_raise(coeff.a_prime(xs_pos), "a_prime")
    rep.add(
        "coefficient.monotone",
        bool(np.all(ap_vals >= -1e-14)),
        float(ap_vals.min()),
        float(ap_vals.min()),
        "a' >= 0",
    )

    rep.add(
        "coefficient.K_range",
        0.0 <= coeff.K < 1.0,
        1.0 - coeff.K,
        coeff.K,
        "declared K in [0, 1)",
    )
    ratio = xs_pos * ap_vals / a_vals
    worst = float(ratio.max())
    rep.add(
        "coefficient.weak_degeneracy",
        (worst <= coeff.K + 1e-12) and (0.0 <= coeff.K < 1.0),
        coeff.K - worst,
        worst,
        f"max x a'/a = {worst:.6f} vs K = {coeff.K}",
    )

    if coeff.f_scale is not None and coeff.g_scale is not None:
        t_grid = np.linspace(0.0, motion.T, 33)
        y_grid = np.linspace(1e-3, 1.0, 65)
        tg, yg = np.meshgrid(t_grid, y_grid, indexing="ij")
        lhs = _finite_or_raise(coeff.a(coeff.f_scale(tg) * yg), "a(f y)")
        rhs = _finite_or_raise(coeff.g_scale(tg) * coeff.a(yg), "g a(y)")
        resid = float(np.max(np.abs(lhs - rhs) / np.abs(coeff.a(yg))))
        rep.add(
            "coefficient.scaling_identity",
            resid <= 1e-12,
            1e-12 - resid,
            resid,
            "a(f(t) y) = g(t) a(y), relative residual",
        )
    else:
        rep.add(
            "coefficient.scaling_identity",
            False,
            -math.inf,
            math.nan,
            "no (f, g) scaling pair supplied",
        )

    # -- reaction term ---------------------------------------------------------
    x_rs = np.linspace(0.0, ell_max, 17)
    t_rs = np.linspace(0.0, motion.T, 9)
    r_rs = np.linspace(-2.0, 2.0, 41)
    xg, tg = np.meshgrid(x_rs, t_rs, indexing="ij")
    f0 = _finite_or_raise(nl.F(xg, tg, np.zeros_like(xg)), "F")
    worst0 = float(np.max(np.abs(f0)))
    rep.add(
        "nonlinearity.vanishes_at_zero",
        worst0 <= 1e-14,
        1e-14 - worst0,
        worst0,
        "F(x, t, 0) = 0",
    )

    worst_rem = 0.0
    for r2 in r_rs[::4]:
        dr = r_rs - r2
        mask = np.abs(dr) > 1e-9
        rem = np.abs(
            nl.F(xg[..., None], tg[..., None], r_rs)
            - nl.F(xg[..., None], tg[..., None], r2)
            - nl.D3F(xg[..., None], tg[..., None], r2) * dr
        )
        ratio_r = rem[..., mask] / dr[mask] ** 2
        worst_rem = max(worst_rem, float(ratio_r.max()))
    rep.add(
        "nonlinearity.quadratic_remainder",
        worst_rem <= nl.C_quad + 1e-10,
        nl.C_quad - worst_rem,
        worst_rem,
        f"max remainder/|dr|^2 = {worst_rem:.4f} vs C_quad = {nl.C_quad}",
    )
    d3 = _finite_or_raise(nl.D3F(xg[..., None], tg[..., None], r_rs), "D3F")
    worst_d3 = float(np.max(np.abs(d3)))
    rep.add(
        "nonlinearity.derivative_bounded",
        worst_d3 <= nl.d3f_bound + 1e-12,
        nl.d3f_bound - worst_d3,
        worst_d3,
        f"max |D3F| = {worst_d3:.4f} vs declared {nl.d3f_bound}",
    )

    # -- domain motion ---------------------------------------------------------
    rep.add("motion.positive", True, float(ell.min()), float(ell.min()), "ell > 0 on [0, T]")
    ellp = _finite_or_raise(motion.ell_prime(ts), "ell_prime")
    ell_ratio = float(np.max(ellp / ell))
    if motion.C_ell is not None:
        rep.add(
            "motion.expansion_ratio",
            ell_ratio <= motion.C_ell + 1e-12,
            motion.C_ell - ell_ratio,
            ell_ratio,
            f"max ell'/ell vs declared {motion.C_ell}",
        )
    else:
        rep.add(
            "motion.expansion_ratio",
            np.isfinite(ell_ratio),
            math.inf,
            ell_ratio,
            "max ell'/ell (recorded; no declared bound)",
        )

    b_fn = motion.b(coeff)
    b_vals = _finite_or_raise(b_fn(ts), "b")
    rep.add(
        "motion.diffusivity_positive",
        bool(np.all(b_vals > 0.0)),
        float(b_vals.min()),
        float(b_vals.min()),
        "b(t) = g/ell^2 > 0",
    )
    # b'/b via central differences on the sample grid; b is our own derived
    # quantity, so this does not differentiate a user callable near x = 0.
    db = np.gradient(b_vals, ts)
    b_ratio = float(np.max(db / b_vals))
    if motion.C_b is not None:
        rep.add(
            "motion.diffusivity_ratio",
            b_ratio <= motion.C_b + 1e-6,
            motion.C_b - b_ratio,
            b_ratio,
            f"max b'/b vs declared {motion.C_b}",
        )
    else:
        rep.add(
            "motion.diffusivity_ratio",
            np.isfinite(b_ratio),
            math.inf,
            b_ratio,
            "max b'/b (recorded; no declared bound)",
        )

    # -- geometry ---------------------------------------------------------------
    a_o, b_o = geom.omega
    a_1, b_1 = geom.omega1
    ok = a_o < a_1 < b_1 < b_o and a_o <= geom.alpha_prime < geom.beta_prime <= b_o
    rep.add(
        "geometry.inclusions",
        ok,
        min(a_1 - a_o, b_o - b_1),
        min(a_1 - a_o, b_o - b_1),
        "closure(omega1) in omega, [alpha', beta'] in omega",
    )

    return rep
