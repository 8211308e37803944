"""Rescaling of the moving interval onto the unit cylinder.

The map x = xbar / ell(t) sends (0, ell(t)) onto (0, 1).  Under it, together
with the coefficient scaling a(ell(t) x) = g(t) a(x), the equation

    u_t - (a(xbar) u_xbar)_xbar + F(xbar, t, u) = h 1_w u

becomes, for y(x, t) = u(ell(t) x, t),

    y_t - b(t) (a(x) y_x)_x - B(x, t) sqrt(a) y_x + F(ell(t) x, t, y) = h 1_w y

with b(t) = g(t)/ell(t)^2 and B(x, t) = ell'(t) x / (ell(t) sqrt(a(x))).
The drift coefficient B sqrt(a) = (ell'/ell) x is polynomial regardless of
the degeneracy, which is what the solvers actually use; B itself is only
needed where the writing keeps the sqrt(a) factor explicit, and is extended
by continuity with B(0, t) = 0 (valid for any power law with exponent < 2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from degctrl.model import DegenerateCoefficient, DomainMotion, Nonlinearity, OutOfRange

__all__ = [
    "DiffeomorphismTables",
    "GridMismatch",
    "MissingTrajectory",
    "PhysicalSlice",
    "SingularB",
    "TimeOutOfRange",
    "TransformedCoefficients",
    "build_transform",
    "pull_back_initial",
    "push_forward_state",
]


class MissingTrajectory(ValueError):
    """The linearized reaction c(x, t) was requested without a trajectory."""


class SingularB(ValueError):
    """The drift B = ell' x / (ell sqrt(a)) would be unbounded."""


class GridMismatch(ValueError):
    """Sampled physical data does not span the expected interval."""


class TimeOutOfRange(ValueError):
    """Evaluation time outside [0, T]."""


@dataclass(frozen=True)
class PhysicalSlice:
    """A state sampled on the physical (moving-domain) grid at one time."""

    x: np.ndarray
    values: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class DiffeomorphismTables:
    """Derivatives of the rescaling map psi(xbar, t) = xbar / ell(t).

    The second space derivative of psi vanishes identically for this map,
    so no first-order term from map curvature enters the transformed
    equation.
    """

    motion: DomainMotion

    def tau(self, x, t):
        """Unit -> physical: xbar = ell(t) x."""
        return self.motion.ell(t) * np.asarray(x, dtype=float)

    def psi(self, xbar, t):
        """Physical -> unit: x = xbar / ell(t)."""
        return np.asarray(xbar, dtype=float) / self.motion.ell(t)

    def psi_xbar(self, t):
        return 1.0 / self.motion.ell(t)

    def psi_t(self, x, t):
        return -np.asarray(x, dtype=float) * self.motion.ell_prime(t) / self.motion.ell(t)

    @staticmethod
    def psi_xbar2(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class TransformedCoefficients:
    """Coefficient callables of the fixed-cylinder equations.

    ``drift(x, t)`` is B sqrt(a) = (ell'/ell) x, the form used by the
    discretization.  ``c`` (the linearized reaction along a trajectory) is
    available only when a trajectory was supplied to ``build_transform``.
    ``m_b``/``M_b`` record min/max of b over the horizon.
    """

    coeff: DegenerateCoefficient
    motion: DomainMotion
    nl: Nonlinearity | None
    b: Callable[[np.ndarray], np.ndarray]
    trajectory: "object | None" = None  # disc.StateField, kept untyped to avoid a cycle
    m_b: float = 0.0
    M_b: float = 0.0

    def ell_ratio(self, t):
        return self.motion.ell_prime(t) / self.motion.ell(t)

    def drift(self, x, t):
        """B sqrt(a) = (ell'/ell) x; bounded up to the degenerate endpoint."""
        return self.ell_ratio(t) * np.asarray(x, dtype=float)

    def B(self, x, t):
        """Drift over sqrt(a), with the continuous extension B(0, t) = 0."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        pos = x > 0.0
        out[pos] = self.ell_ratio(t) * x[pos] / np.sqrt(self.coeff.a(x[pos]))
        return out

    def F_pulled(self, x, t, r):
        if self.nl is None:
            return np.zeros_like(np.asarray(r, dtype=float))
        return self.nl.F(self.motion.ell(t) * np.asarray(x, dtype=float), t, r)

    def D3F_pulled(self, x, t, r):
        if self.nl is None:
            return np.zeros_like(np.asarray(r, dtype=float))
        return self.nl.D3F(self.motion.ell(t) * np.asarray(x, dtype=float), t, r)

    def c(self, x, t):
        """Linearized reaction ell'/ell + D3F(ell x, t, ytilde) along the
        stored trajectory (nearest time level, linear interpolation in x)."""
        if self.trajectory is None:
            raise MissingTrajectory("c(x, t) needs the trajectory ytilde")
        grid = self.trajectory.grid
        n_level = int(round(t / grid.dt))
        n_level = min(max(n_level, 0), grid.m)
        ytilde = np.interp(np.asarray(x, dtype=float), grid.x, self.trajectory.values[n_level])
        return self.ell_ratio(t) + self.D3F_pulled(x, t, ytilde)

    def reaction_table(self, grid) -> np.ndarray:
        """D3F(ell(t) x, t, ytilde) at all grid nodes; zeros without data.

        This is the reaction of the linearized state equation (the extra
        ell'/ell of the adjoint arises from transposing the drift, not
        here).
        """
        if self.nl is None:
            return np.zeros((grid.m + 1, grid.n))
        if self.trajectory is None:
            ytab = np.zeros((grid.m + 1, grid.n))
        else:
            ytab = self.trajectory.values
        out = np.empty((grid.m + 1, grid.n))
        for n, t in enumerate(grid.times):
            out[n] = self.D3F_pulled(grid.x, t, ytab[n])
        return out


def build_transform(
    coeff: DegenerateCoefficient,
    motion: DomainMotion,
    nl: Nonlinearity | None = None,
    trajectory=None,
) -> tuple[DiffeomorphismTables, TransformedCoefficients]:
    """Build the map tables and the fixed-cylinder coefficients.

    ``trajectory`` (a space-time field on the unit cylinder) is only needed
    when the linearized reaction c(x, t) will be requested.
    """
    coeff = coeff.bind_motion(motion)
    if coeff.alpha is not None and coeff.alpha >= 2.0:
        raise SingularB(f"drift unbounded for exponent {coeff.alpha} >= 2")
    b_fn = motion.b(coeff)
    ts = np.linspace(0.0, motion.T, 1025)
    b_vals = np.asarray(b_fn(ts), dtype=float)
    if np.any(~np.isfinite(b_vals)) or np.any(b_vals <= 0.0):
        raise OutOfRange("b(t) = g/ell^2 must be positive and finite on [0, T]")
    tables = DiffeomorphismTables(motion=motion)
    coeffs = TransformedCoefficients(
        coeff=coeff,
        motion=motion,
        nl=nl,
        b=b_fn,
        trajectory=trajectory,
        m_b=float(b_vals.min()),
        M_b=float(b_vals.max()),
    )
    return tables, coeffs


def pull_back_initial(u0: PhysicalSlice, motion: DomainMotion, grid) -> np.ndarray:
    """Initial state on (0, ell(0)) -> interior values on the unit grid.

    Monotone cubic interpolation; exact when the physical sample points are
    the images ell(0) * x_i of the unit nodes.
    """
    ell0 = float(motion.ell(0.0))
    x = np.asarray(u0.x, dtype=float)
    if x[0] > 1e-12 * ell0 or x[-1] < ell0 * (1.0 - 1e-12):
        raise GridMismatch(
            f"initial data sampled on [{x[0]}, {x[-1]}], expected to span (0, {ell0})"
        )
    interp = PchipInterpolator(x, np.asarray(u0.values, dtype=float), extrapolate=False)
    target = ell0 * grid.x
    vals = interp(np.clip(target, x[0], x[-1]))
    return np.asarray(vals, dtype=float)


def push_forward_state(
    y_slice: np.ndarray,
    motion: DomainMotion,
    t: float,
    grid,
    x_target: np.ndarray | None = None,
) -> PhysicalSlice:
    """One cylinder slice -> the physical state u(xbar, t) = y(xbar/ell, t).

    Without ``x_target`` the values are returned on the image nodes
    ell(t) * x_i (no interpolation).  With a target grid the slice is
    resampled by monotone cubic interpolation.
    """
    if not 0.0 <= t <= motion.T * (1.0 + 1e-12):
        raise TimeOutOfRange(f"t = {t} outside [0, {motion.T}]")
    ell_t = float(motion.ell(t))
    if x_target is None:
        return PhysicalSlice(x=ell_t * grid.x, values=np.asarray(y_slice, dtype=float), t=t)
    x_full = np.concatenate([[0.0], grid.x, [1.0]])
    y_full = np.concatenate([[0.0], np.asarray(y_slice, dtype=float), [0.0]])
    interp = PchipInterpolator(ell_t * x_full, y_full, extrapolate=False)
    xt = np.asarray(x_target, dtype=float)
    if xt.min() < 0.0 or xt.max() > ell_t * (1.0 + 1e-12):
        raise GridMismatch(f"target grid leaves (0, {ell_t})")
    return PhysicalSlice(x=xt, values=np.asarray(interp(np.clip(xt, 0.0, ell_t)), dtype=float), t=t)
