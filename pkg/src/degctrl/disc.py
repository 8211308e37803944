"""Finite-volume discretization on the unit cylinder and implicit steppers.

Interior nodes x_i = i h, h = 1/(N+1); the boundary nodes x = 0, 1 carry
homogeneous Dirichlet data and are eliminated.  The degenerate diffusion is
discretized with midpoint coefficients a_{i+1/2}, so a is never evaluated at
the degenerate endpoint and a' is never needed.  The drift -(ell'/ell) x y_x
is upwinded on the sign of ell'/ell (first order), time stepping is backward
Euler, and the discrete adjoint step is the exact transpose of the forward
step, which is what makes the dual control solves symmetric.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import solve_banded

from degctrl.model import ControlGeometry, DegenerateCoefficient
from degctrl.transform import TransformedCoefficients

__all__ = [
    "DegenerateOperator",
    "Grid",
    "LinearSolveFailure",
    "OperatorTable",
    "StateField",
    "TrajectoryDegenerate",
    "assemble_operator",
    "build_operator_table",
    "inner_h",
    "l2_Q",
    "norm_h1a",
    "norm_h2a",
    "norm_l2",
    "philox_rng",
    "random_smooth_field",
    "random_smooth_slice",
    "read_field_binary",
    "solve_adjoint",
    "solve_linear_forward",
    "solve_semilinear_forward",
    "solve_trajectory",
    "step_adjoint_backward",
    "step_forward",
    "time_integral_interior",
    "write_field_binary",
    "write_field_csv",
]

_MAGIC = b"DGC1"


class LinearSolveFailure(ArithmeticError):
    """A tridiagonal solve produced non-finite values."""


class TrajectoryDegenerate(UserWarning):
    """The trajectory dips below the configured floor on the control window."""


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid: N interior nodes, M backward-Euler steps."""

    n: int
    m: int
    horizon: float

    def __post_init__(self):
        if self.n < 8 or self.m < 8:
            raise ValueError(f"need n >= 8 and m >= 8, got n={self.n}, m={self.m}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.m

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.h, 1.0 - self.h, self.n)

    @property
    def x_full(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 2)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.m + 1)


@dataclass
class StateField:
    """A grid function: either one time slice (n,) or space-time (m+1, n)."""

    grid: Grid
    values: np.ndarray
    kind: Literal["state", "adjoint", "control", "weight"] = "state"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        ok_shapes = {(self.grid.n,), (self.grid.m + 1, self.grid.n)}
        if self.values.shape not in ok_shapes:
            raise ValueError(f"field shape {self.values.shape} does not match grid")

    @property
    def is_spacetime(self) -> bool:
        return self.values.ndim == 2

    def slice(self, n_level: int) -> np.ndarray:
        return self.values[n_level] if self.is_spacetime else self.values

    def full(self, n_level: int | None = None) -> np.ndarray:
        """Slice padded with the homogeneous boundary values."""
        v = self.slice(n_level) if n_level is not None else self.values
        if v.ndim == 1:
            return np.concatenate([[0.0], v, [0.0]])
        return np.pad(v, ((0, 0), (1, 1)))


# ---------------------------------------------------------------------------
# spatial operators
# ---------------------------------------------------------------------------


def _stiffness_diags(a_fn, grid: Grid):
    """Diagonals of S = -(a(x) d/dx .)_x with midpoint coefficients.

    S is symmetric positive definite; only a((i+1/2) h) for i = 0..n is
    evaluated, all strictly inside (0, 1).
    """
    h = grid.h
    a_half = np.asarray(a_fn((np.arange(grid.n + 1) + 0.5) * h), dtype=float)
    di = (a_half[:-1] + a_half[1:]) / h**2
    lo = np.zeros(grid.n)
    up = np.zeros(grid.n)
    lo[1:] = -a_half[1:-1] / h**2
    up[:-1] = -a_half[1:-1] / h**2
    return lo, di, up, a_half


def _drift_diags(rate: float, grid: Grid):
    """Upwind diagonals of the advection term -(rate * x) d/dx."""
    w = rate * grid.x
    lo = np.zeros(grid.n)
    di = np.zeros(grid.n)
    up = np.zeros(grid.n)
    h = grid.h
    if rate >= 0.0:
        di += w / h
        up[:-1] += -w[:-1] / h
    else:
        di += -w / h
        lo[1:] += w[1:] / h
    return lo, di, up


def tridiag_matvec(lo, di, up, v):
    """Apply a tridiagonal operator; diagonals and v broadcast over leading axes."""
    r = di * v
    r[..., :-1] += up[..., :-1] * v[..., 1:]
    r[..., 1:] += lo[..., 1:] * v[..., :-1]
    return r


def tridiag_matvec_T(lo, di, up, v):
    """Apply the transpose of the tridiagonal operator given by (lo, di, up)."""
    r = di * v
    r[..., 1:] += up[..., :-1] * v[..., :-1]
    r[..., :-1] += lo[..., 1:] * v[..., 1:]
    return r


def _banded(lo, di, up):
    ab = np.zeros((3, di.shape[-1]))
    ab[0, 1:] = up[:-1]
    ab[1] = di
    ab[2, :-1] = lo[1:]
    return ab


def _solve_tridiag(lo, di, up, rhs):
    out = solve_banded((1, 1), _banded(lo, di, up), rhs, check_finite=False)
    if not np.all(np.isfinite(out)):
        raise LinearSolveFailure("non-finite values in tridiagonal solve")
    return out


@dataclass
class DegenerateOperator:
    """The spatial operator b(t) S + D(t) + R at one time, split by part.

    ``stiffness_*`` realizes -(a y_x)_x (unscaled by b), ``drift_*`` the
    upwinded -(ell'/ell) x y_x, ``reaction`` the diagonal term.
    """

    grid: Grid
    b_t: float
    stiffness_lo: np.ndarray
    stiffness_di: np.ndarray
    stiffness_up: np.ndarray
    drift_lo: np.ndarray
    drift_di: np.ndarray
    drift_up: np.ndarray
    reaction: np.ndarray

    @property
    def diags(self):
        lo = self.b_t * self.stiffness_lo + self.drift_lo
        di = self.b_t * self.stiffness_di + self.drift_di + self.reaction
        up = self.b_t * self.stiffness_up + self.drift_up
        return lo, di, up

    def apply(self, v: np.ndarray) -> np.ndarray:
        return tridiag_matvec(*self.diags, v)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return tridiag_matvec_T(*self.diags, v)

    def stiffness_matrix(self):
        import scipy.sparse as sp

        return sp.diags(
            [self.stiffness_lo[1:], self.stiffness_di, self.stiffness_up[:-1]],
            offsets=[-1, 0, 1],
            format="csr",
        )


def assemble_operator(
    coeffs: TransformedCoefficients,
    grid: Grid,
    t: float,
    reaction: np.ndarray | None = None,
) -> DegenerateOperator:
    """Assemble the spatial operator of the cylinder equation at time t."""
    s_lo, s_di, s_up, _ = _stiffness_diags(coeffs.coeff.a, grid)
    rate = float(coeffs.ell_ratio(t))
    d_lo, d_di, d_up = _drift_diags(rate, grid)
    if reaction is None:
        reaction = np.zeros(grid.n)
    return DegenerateOperator(
        grid=grid,
        b_t=float(coeffs.b(t)),
        stiffness_lo=s_lo,
        stiffness_di=s_di,
        stiffness_up=s_up,
        drift_lo=d_lo,
        drift_di=d_di,
        drift_up=d_up,
        reaction=np.asarray(reaction, dtype=float),
    )


@dataclass
class OperatorTable:
    """A(t_n) for every time level, as (m+1, n) diagonal arrays.

    ``step_*`` are the diagonals of I + dt A(t_n).  ``apply``/``apply_T``
    act on batches of slices (leading axis = time level), which is what the
    space-time residual operators of the control solver need.
    """

    grid: Grid
    lo: np.ndarray
    di: np.ndarray
    up: np.ndarray
    a_half: np.ndarray

    @property
    def step_lo(self):
        return self.grid.dt * self.lo

    @property
    def step_di(self):
        return 1.0 + self.grid.dt * self.di

    @property
    def step_up(self):
        return self.grid.dt * self.up

    def apply(self, n_level, v):
        return tridiag_matvec(self.lo[n_level], self.di[n_level], self.up[n_level], v)

    def apply_T(self, n_level, v):
        return tridiag_matvec_T(self.lo[n_level], self.di[n_level], self.up[n_level], v)

    def step_solve(self, n_level: int, rhs: np.ndarray) -> np.ndarray:
        """Solve (I + dt A(t_n)) y = rhs."""
        return _solve_tridiag(
            self.step_lo[n_level], self.step_di[n_level], self.step_up[n_level], rhs
        )

    def step_solve_T(self, n_level: int, rhs: np.ndarray) -> np.ndarray:
        """Solve (I + dt A(t_n))^T v = rhs."""
        lo, di, up = self.step_lo[n_level], self.step_di[n_level], self.step_up[n_level]
        lo_t = np.zeros_like(lo)
        up_t = np.zeros_like(up)
        lo_t[1:] = up[:-1]
        up_t[:-1] = lo[1:]
        return _solve_tridiag(lo_t, di, up_t, rhs)


def build_operator_table(
    coeffs: TransformedCoefficients,
    grid: Grid,
    reaction: np.ndarray | None = None,
    control_mult: np.ndarray | None = None,
) -> OperatorTable:
    """Tabulate A(t_n) = b(t_n) S + D(t_n) + R(t_n) - diag(control_mult).

    ``reaction`` and ``control_mult`` are (m+1, n) arrays (or None); the
    bilinear control multiplier enters with a minus sign because it sits on
    the right-hand side of the equation.
    """
    s_lo, s_di, s_up, a_half = _stiffness_diags(coeffs.coeff.a, grid)
    mp1, n = grid.m + 1, grid.n
    lo = np.empty((mp1, n))
    di = np.empty((mp1, n))
    up = np.empty((mp1, n))
    b_vals = np.asarray(coeffs.b(grid.times), dtype=float)
    for k, t in enumerate(grid.times):
        rate = float(coeffs.ell_ratio(t))
        d_lo, d_di, d_up = _drift_diags(rate, grid)
        lo[k] = b_vals[k] * s_lo + d_lo
        di[k] = b_vals[k] * s_di + d_di
        up[k] = b_vals[k] * s_up + d_up
    if reaction is not None:
        di += np.asarray(reaction, dtype=float)
    if control_mult is not None:
        di -= np.asarray(control_mult, dtype=float)
    return OperatorTable(grid=grid, lo=lo, di=di, up=up, a_half=a_half)


# ---------------------------------------------------------------------------
# steppers
# ---------------------------------------------------------------------------


def step_forward(
    y_n: np.ndarray,
    coeffs: TransformedCoefficients,
    grid: Grid,
    t_n: float,
    source: np.ndarray | None = None,
    bilinear_term: np.ndarray | None = None,
    reaction: np.ndarray | None = None,
) -> np.ndarray:
    """One backward-Euler step t_n -> t_n + dt.

    Coefficients, source and the bilinear multiplier are taken at the target
    time.  Solves (I + dt (b S + D + R - diag(bilinear))) y' = y_n + dt src.
    """
    t_new = t_n + grid.dt
    op = assemble_operator(coeffs, grid, t_new, reaction=reaction)
    lo, di, up = op.diags
    if bilinear_term is not None:
        di = di - np.asarray(bilinear_term, dtype=float)
    rhs = np.asarray(y_n, dtype=float).copy()
    if source is not None:
        rhs += grid.dt * np.asarray(source, dtype=float)
    return _solve_tridiag(grid.dt * lo, 1.0 + grid.dt * di, grid.dt * up, rhs)


def step_adjoint_backward(
    v_np1: np.ndarray,
    coeffs: TransformedCoefficients,
    grid: Grid,
    t_n: float,
    source: np.ndarray | None = None,
    reaction: np.ndarray | None = None,
) -> np.ndarray:
    """One adjoint step t_{n+1} -> t_n: the exact transpose of step_forward.

    Solves (I + dt A(t_n))^T v = v_{n+1} + dt H.  Transposing the upwind
    drift produces a consistent discretization of +((ell'/ell) x v)_x, i.e.
    the divergence-form adjoint drift plus the ell'/ell reaction shift.
    """
    op = assemble_operator(coeffs, grid, t_n, reaction=reaction)
    lo, di, up = op.diags
    rhs = np.asarray(v_np1, dtype=float).copy()
    if source is not None:
        rhs += grid.dt * np.asarray(source, dtype=float)
    lo_s, di_s, up_s = grid.dt * lo, 1.0 + grid.dt * di, grid.dt * up
    lo_t = np.zeros_like(lo_s)
    up_t = np.zeros_like(up_s)
    lo_t[1:] = up_s[:-1]
    up_t[:-1] = lo_s[1:]
    return _solve_tridiag(lo_t, di_s, up_t, rhs)


def solve_linear_forward(
    table: OperatorTable,
    y0: np.ndarray,
    sources: np.ndarray | None = None,
) -> StateField:
    """March the linear equation; sources[n] drives the step into level n."""
    grid = table.grid
    out = np.zeros((grid.m + 1, grid.n))
    out[0] = np.asarray(y0, dtype=float)
    for n in range(1, grid.m + 1):
        rhs = out[n - 1].copy()
        if sources is not None:
            rhs += grid.dt * sources[n]
        out[n] = table.step_solve(n, rhs)
    return StateField(grid=grid, values=out, kind="state")


def solve_adjoint(
    table: OperatorTable,
    vT: np.ndarray,
    H: np.ndarray | None = None,
) -> StateField:
    """March the adjoint equation backward from v(T) = vT.

    Each step solves the transpose of the corresponding forward step, so
    the discrete duality <forward(y), v> = <y, adjoint(v)> is exact.
    """
    grid = table.grid
    out = np.zeros((grid.m + 1, grid.n))
    out[grid.m] = np.asarray(vT, dtype=float)
    for n in range(grid.m - 1, -1, -1):
        rhs = out[n + 1].copy()
        if H is not None:
            rhs += grid.dt * H[n]
        out[n] = table.step_solve_T(n, rhs)
    return StateField(grid=grid, values=out, kind="adjoint")


def solve_semilinear_forward(
    coeffs: TransformedCoefficients,
    grid: Grid,
    y0: np.ndarray,
    nl=None,
    control_mult: np.ndarray | None = None,
    sources: np.ndarray | None = None,
    newton_tol: float = 1e-10,
    newton_max: int = 8,
) -> StateField:
    """Backward Euler for the semilinear equation, Newton solve per step.

    The reaction F(ell(t) x, t, y) is treated implicitly; the bilinear term
    control_mult[n] * y likewise.  Each Newton iteration freezes the
    coefficient matrix at the current iterate (tridiagonal factorization
    per iteration).
    """
    table = build_operator_table(coeffs, grid)
    out = np.zeros((grid.m + 1, grid.n))
    out[0] = np.asarray(y0, dtype=float)
    x = grid.x
    for n in range(1, grid.m + 1):
        t = grid.times[n]
        rhs = out[n - 1].copy()
        if sources is not None:
            rhs += grid.dt * sources[n]
        hmul = control_mult[n] if control_mult is not None else None
        y = out[n - 1].copy()
        for _ in range(newton_max):
            fy = coeffs.F_pulled(x, t, y) if nl is not None else 0.0
            resid = y + grid.dt * table.apply(n, y) + grid.dt * fy - rhs
            if hmul is not None:
                resid -= grid.dt * hmul * y
            if np.linalg.norm(resid, ord=np.inf) <= newton_tol * max(
                1.0, np.linalg.norm(y, ord=np.inf)
            ):
                break
            jac_di = table.step_di[n].copy()
            if nl is not None:
                jac_di += grid.dt * coeffs.D3F_pulled(x, t, y)
            if hmul is not None:
                jac_di -= grid.dt * hmul
            y = y - _solve_tridiag(table.step_lo[n], jac_di, table.step_up[n], resid)
        out[n] = y
    return StateField(grid=grid, values=out, kind="state")


def solve_trajectory(
    y0_tilde: np.ndarray,
    coeffs: TransformedCoefficients,
    grid: Grid,
    nl=None,
    geom: ControlGeometry | None = None,
    floor: float | None = None,
) -> tuple[StateField, dict]:
    """Uncontrolled semilinear solve; records the window minimum of |ytilde|.

    Trajectory tracking divides by ytilde on the control window, so a value
    below ``floor`` there triggers a TrajectoryDegenerate warning (the solve
    still completes).
    """
    field = solve_semilinear_forward(coeffs, grid, y0_tilde, nl=nl)
    diag: dict = {}
    if geom is not None:
        mask = geom.mask(grid.x, "omega1")
        window_min = float(np.min(np.abs(field.values[:, mask]))) if mask.any() else 0.0
        diag["min_abs_on_window"] = window_min
        if floor is not None and window_min < floor:
            warnings.warn(
                f"trajectory minimum {window_min:.3e} on the control window is below "
                f"the floor {floor:.3e}; bilinear recovery will clamp",
                TrajectoryDegenerate,
                stacklevel=2,
            )
    return field, diag


# ---------------------------------------------------------------------------
# inner products, norms, quadrature
# ---------------------------------------------------------------------------


def inner_h(u: np.ndarray, v: np.ndarray, grid: Grid) -> float:
    """L2(0,1) inner product of interior slices (trapezoid, zero boundary)."""
    return grid.h * float(np.dot(np.ravel(u), np.ravel(v)))


def norm_l2(u: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(max(inner_h(u, u, grid), 0.0)))


def norm_h1a(y: np.ndarray, coeff: DegenerateCoefficient, grid: Grid) -> float:
    """Weighted norm (||y||^2 + ||sqrt(a) y_x||^2)^(1/2).

    Gradient part by midpoint quadrature of a_{i+1/2} |dy/h|^2 over the
    n+1 cells, including the boundary cells with zero Dirichlet values.
    """
    a_half = np.asarray(coeff.a((np.arange(grid.n + 1) + 0.5) * grid.h), dtype=float)
    y_full = np.concatenate([[0.0], np.asarray(y, dtype=float), [0.0]])
    dy = np.diff(y_full) / grid.h
    grad_sq = grid.h * float(np.sum(a_half * dy**2))
    return float(np.sqrt(inner_h(y, y, grid) + grad_sq))


def norm_h2a(y: np.ndarray, coeff: DegenerateCoefficient, grid: Grid) -> float:
    """H1a norm plus the L2 norm of (a y_x)_x (stiffness stencil)."""
    s_lo, s_di, s_up, _ = _stiffness_diags(coeff.a, grid)
    sy = tridiag_matvec(s_lo, s_di, s_up, np.asarray(y, dtype=float))
    return float(np.sqrt(norm_h1a(y, coeff, grid) ** 2 + inner_h(sy, sy, grid)))


def l2_Q(field: StateField | np.ndarray, grid: Grid | None = None) -> float:
    """Space-time L2 norm, trapezoid in time."""
    if isinstance(field, StateField):
        grid, values = field.grid, field.values
    else:
        values = np.asarray(field, dtype=float)
    w = np.ones(values.shape[0])
    w[0] = w[-1] = 0.5
    sq = grid.h * np.sum(values**2, axis=1)
    return float(np.sqrt(grid.dt * float(np.dot(w, sq))))


def time_integral_interior(per_level: np.ndarray, grid: Grid) -> float:
    """Rectangle rule over the interior time nodes t_1 .. t_{m-1}.

    Weighted time integrands are singular (or vanish) at t = 0, T; all
    weighted space-time integrals use this rule.
    """
    return grid.dt * float(np.sum(per_level[1 : grid.m]))


# ---------------------------------------------------------------------------
# randomness and field I/O
# ---------------------------------------------------------------------------


def philox_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on (seed, stream): parallel trials are
    order-independent and reproducible."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def random_smooth_slice(grid: Grid, rng: np.random.Generator, modes: int = 8) -> np.ndarray:
    """Random low-frequency slice sum_k g_k / k * sin(k pi x)."""
    ks = np.arange(1, modes + 1)
    g = rng.standard_normal(modes) / ks
    return np.sin(np.pi * np.outer(ks, grid.x)).T @ g


def random_smooth_field(
    grid: Grid, rng: np.random.Generator, modes: tuple[int, int] = (8, 4)
) -> np.ndarray:
    """Random smooth space-time field on the full (m+1, n) grid."""
    kx, kt = modes
    ks = np.arange(1, kx + 1)
    js = np.arange(kt)
    coef = rng.standard_normal((kt, kx)) / (np.outer(js + 1, ks))
    sx = np.sin(np.pi * np.outer(ks, grid.x))  # (kx, n)
    ct = np.cos(np.pi * np.outer(js, grid.times / grid.horizon))  # (kt, m+1)
    return ct.T @ coef @ sx


def write_field_csv(path, field: StateField) -> None:
    """Rows (t, x, value) over the full grid including the boundary nodes."""
    grid = field.grid
    full = field.full()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x,value\n")
        if field.is_spacetime:
            for n, t in enumerate(grid.times):
                for x, v in zip(grid.x_full, full[n]):
                    fh.write(f"{t:.17g},{x:.17g},{v:.17g}\n")
        else:
            for x, v in zip(grid.x_full, full):
                fh.write(f"0,{x:.17g},{v:.17g}\n")


def write_field_binary(path, field: StateField) -> None:
    """16-byte header (magic 'DGC1', uint32 N, uint32 M, 4 reserved bytes),
    then the interior values as row-major float64."""
    grid = field.grid
    values = field.values if field.is_spacetime else field.values[None, :]
    header = _MAGIC + struct.pack("<II", grid.n, grid.m) + b"\x00" * 4
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field_binary(path, horizon: float = 1.0, kind: str = "state") -> StateField:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != _MAGIC:
            raise ValueError(f"bad magic {header[:4]!r} in {path}")
        n, m = struct.unpack("<II", header[4:12])
        data = np.frombuffer(fh.read(), dtype="<f8")
    grid = Grid(n=n, m=m, horizon=horizon)
    values = data.reshape(-1, n)
    if values.shape[0] == 1:
        values = values[0]
    return StateField(grid=grid, values=values.copy(), kind=kind)
