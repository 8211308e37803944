"""Null control of the linearized equation by a weighted dual least-squares solve.

Continuous construction.  With L the linearized forward operator and L* its
adjoint, the control is obtained from the unique minimizer phi of

    b(phi, phi') = int_Q rho0^-2 (L* phi)(L* phi')
                 + int_{w1 x (0,T)} rho1^-2 phi phi'
    <l, phi'>   = int z0 phi'(0) + int_Q G phi'

after which  z = rho0^-2 L* phi  and  htilde = -rho1^-2 phi 1_{w1}.  Because
rho0 blows up at t = T, the factor rho0^-2 vanishes there and the recovered
state is pinned to zero at the final time.

Discrete realization (discretize-then-optimize).  Let M_n = I + dt A(t_n)
be the backward-Euler step matrices and let Phi = (phi^1 .. phi^M) carry one
multiplier per time level.  Define

    (L* Phi)^n = (M_n^T phi^n - phi^{n+1}) / dt,   phi^{M+1} := 0.

Summation by parts gives the exact discrete Green identity: the Euclidean
transpose of L* is the forward residual operator with zero initial datum.
Consequently the conjugate-gradient solution of the normal equations yields
a state that satisfies the discrete forward recursion with the recovered
control *exactly* (up to the CG residual), with z^M = 0 enforced through
rho0^-2(T) = 0.  An independent forward march with the recovered control is
still run as the certificate.

The inverse weights are normalized by their maximum over the time levels
(the recovered z and htilde are invariant under this common scaling) and
time levels on which both normalized inverse weights underflow to zero are
dropped from the unknowns; their multipliers are fixed to zero, which
perturbs the functional below any achievable CG tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from degctrl.carleman import WeightSystem
from degctrl.disc import (
    Grid,
    OperatorTable,
    StateField,
    build_operator_table,
    norm_h1a,
    norm_l2,
    solve_linear_forward,
    tridiag_matvec,
    tridiag_matvec_T,
)
from degctrl.model import ControlGeometry
from degctrl.transform import TransformedCoefficients

__all__ = [
    "CGStalled",
    "ControlProblemLinear",
    "ControlSolution",
    "WeightOverflow",
    "check_additional_estimates",
    "check_control_regularity",
    "check_estimate_31",
    "solve_null_control",
]

_UNDERFLOW_FLOOR = 1e-280


class CGStalled(ArithmeticError):
    """Conjugate gradient failed to reach the tolerance."""

    def __init__(self, message: str, history: np.ndarray, diagnostics: dict):
        self.history = history
        self.diagnostics = diagnostics
        super().__init__(message)


class WeightOverflow(ArithmeticError):
    """A weighted quadrature produced non-finite values."""


@dataclass
class ControlProblemLinear:
    """Data and knobs of one linear null-control solve.

    ``z0`` is the initial deviation, ``G`` an optional space-time source
    (levels 0..M; level n drives the step into t_n).  ``reaction`` is the
    linearized reaction table (D3F along the trajectory); None means zero.
    """

    z0: np.ndarray
    G: np.ndarray | None
    ws: WeightSystem
    coeffs: TransformedCoefficients
    geom: ControlGeometry
    grid: Grid
    reaction: np.ndarray | None = None
    cg_tol: float = 1e-10
    cg_max_iter: int = 2000
    preconditioner: str = "sweep"  # none | mass | jacobi | sweep
    epsilon: float = 0.0
    terminal_tol_factor: float = 1e-3

    def kappa0(self) -> float:
        """||rho2 G||^2 + ||z0||^2 (interior-node rectangle rule in time)."""
        k = norm_l2(self.z0, self.grid) ** 2
        if self.G is not None:
            k += _weighted_sq_spacetime(self.log_rho2_levels(), self.G, self.grid)
        return k

    def kappa1(self) -> float:
        k = norm_h1a(self.z0, self.coeffs.coeff, self.grid) ** 2
        if self.G is not None:
            k += _weighted_sq_spacetime(self.log_rho2_levels(), self.G, self.grid)
        return k

    def log_rho2_levels(self) -> np.ndarray:
        return np.asarray(self.ws.log_rho2(self.grid.times), dtype=float)


@dataclass
class ControlSolution:
    """Recovered state, control, dual variable and solve diagnostics.

    ``phi_hat_scaled`` is exp(log_scale) * phi_hat: the dual variable in the
    normalized frame actually solved (the true multiplier can be far outside
    float range; every downstream formula needs only weighted products).
    """

    z: StateField
    h_tilde: StateField
    phi_hat_scaled: np.ndarray
    log_scale: float
    z_resim: StateField
    diagnostics: dict = dc_field(default_factory=dict)

    @property
    def h_bilinear(self):  # set by the trajectory-tracking driver
        return self.diagnostics.get("h_bilinear")


# ---------------------------------------------------------------------------
# space-time residual operators
# ---------------------------------------------------------------------------


class _DualOperator:
    """Matrix-free application of the normal-equation operator.

    Acts on multipliers Phi of shape (m_act, n) attached to time levels
    1..m_act.  ``apply_Lstar`` is the adjoint residual stencil and
    ``apply_L0`` the forward residual stencil with zero initial datum; they
    are exact Euclidean transposes of each other, which keeps the operator
    symmetric to machine precision.
    """

    def __init__(self, table: OperatorTable, grid: Grid, m_act: int, w0inv, w1inv, mask, eps):
        self.grid = grid
        self.m_act = m_act
        lv = slice(1, m_act + 1)
        self.Mlo = table.step_lo[lv]
        self.Mdi = table.step_di[lv]
        self.Mup = table.step_up[lv]
        self.w0 = w0inv[:, None]
        self.w1 = (w1inv[:, None] * mask[None, :]).astype(float)
        self.eps = eps
        self.dt = grid.dt

    def apply_Lstar(self, phi: np.ndarray) -> np.ndarray:
        out = tridiag_matvec_T(self.Mlo, self.Mdi, self.Mup, phi)
        out[:-1] -= phi[1:]
        return out / self.dt

    def apply_L0(self, psi: np.ndarray) -> np.ndarray:
        out = tridiag_matvec(self.Mlo, self.Mdi, self.Mup, psi)
        out[1:] -= psi[:-1]
        return out / self.dt

    def __call__(self, phi: np.ndarray) -> np.ndarray:
        y = self.apply_Lstar(phi)
        y *= self.w0
        out = self.apply_L0(y)
        out += self.w1 * phi
        if self.eps:
            out += self.eps * phi
        return self.dt * out

    def diagonal(self) -> np.ndarray:
        """Exact diagonal of the operator (for the full Jacobi option)."""
        row_sq = self.Mdi**2
        row_sq[:, :-1] += self.Mup[:, :-1] ** 2
        row_sq[:, 1:] += self.Mlo[:, 1:] ** 2
        diag = self.w0 * row_sq / self.dt**2
        diag[1:] += self.w0[:-1] / self.dt**2
        diag += self.w1
        if self.eps:
            diag += self.eps
        return self.dt * diag

    def sweep_preconditioner(self):
        """Block symmetric Gauss-Seidel in time with exact level blocks.

        The level-diagonal block of the operator,

            D_j = [w0_j M_j M_j^T + w0_{j-1} I]/dt + dt w1_j diag(mask),

        is pentadiagonal and symmetric positive definite (a tiny relative
        ridge keeps that true on levels whose weights underflow); it is
        Cholesky-factored once.  One application performs the forward block
        substitution with the subdiagonal coupling -w0_{j-1} M_{j-1}^T/dt,
        a diagonal scaling, and the transposed backward substitution, so the
        preconditioner is symmetric positive definite as conjugate gradients
        require.
        """
        from scipy.linalg import cho_solve_banded, cholesky_banded

        m_act, n = self.m_act, self.Mdi.shape[1]
        w0 = self.w0[:, 0]
        factors = []
        for j in range(m_act):
            lo, di, up = self.Mlo[j], self.Mdi[j], self.Mup[j]
            pent_di = (lo**2 + di**2 + up**2) * w0[j]
            pent_s1 = (di[:-1] * lo[1:] + up[:-1] * di[1:]) * w0[j]
            pent_s2 = (up[:-2] * lo[2:]) * w0[j]
            ab = np.zeros((3, n))
            ab[2] = pent_di / self.dt + self.dt * self.w1[j]
            if j >= 1:
                ab[2] += w0[j - 1] / self.dt
            if self.eps:
                ab[2] += self.dt * self.eps
            ab[1, 1:] = pent_s1 / self.dt
            ab[0, 2:] = pent_s2 / self.dt
            ab[2] += 1e-14 * float(ab[2].max())
            factors.append(cholesky_banded(ab, lower=False, check_finite=False))

        def apply_inv(r: np.ndarray) -> np.ndarray:
            u = np.empty_like(r)
            u[0] = cho_solve_banded((factors[0], False), r[0], check_finite=False)
            for j in range(1, m_act):
                rhs = r[j] + (w0[j - 1] / self.dt) * tridiag_matvec_T(
                    self.Mlo[j - 1], self.Mdi[j - 1], self.Mup[j - 1], u[j - 1]
                )
                u[j] = cho_solve_banded((factors[j], False), rhs, check_finite=False)
            z = u
            for j in range(m_act - 2, -1, -1):
                corr = (w0[j] / self.dt) * tridiag_matvec(
                    self.Mlo[j], self.Mdi[j], self.Mup[j], z[j + 1]
                )
                z[j] += cho_solve_banded((factors[j], False), corr, check_finite=False)
            return z

        return apply_inv


def _cg(op, b, x0, tol, max_iter, precond):
    """Preconditioned conjugate gradient with relative-residual stopping.

    ``precond`` is either a positive array (Jacobi) or a callable applying
    the inverse of a symmetric positive definite preconditioner.
    """
    apply_prec = precond if callable(precond) else (lambda r, _p=precond: r / _p)
    b_norm = float(np.sqrt(np.vdot(b, b).real))
    if b_norm == 0.0:
        return np.zeros_like(b), np.zeros(0), 0
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - op(x) if x0 is not None else b.copy()
    z = apply_prec(r)
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    history = []
    x_best = x.copy()
    res_best = np.inf
    k_best = 0
    for k in range(max_iter):
        res = float(np.sqrt(np.vdot(r, r).real)) / b_norm
        history.append(res)
        if res < res_best:
            res_best, k_best = res, k
            np.copyto(x_best, x)
        if res <= tol:
            return x, np.asarray(history), k
        Ap = op(p)
        alpha = rz / float(np.vdot(p, Ap).real)
        x += alpha * p
        r -= alpha * Ap
        z = apply_prec(r)
        rz_new = float(np.vdot(r, z).real)
        p = z + (rz_new / rz) * p
        rz = rz_new
    history.append(res_best)
    if res_best <= tol:
        return x_best, np.asarray(history), k_best
    raise CGStalled(
        f"no convergence to {tol:.1e} within {max_iter} iterations "
        f"(best residual {res_best:.3e} at iteration {k_best})",
        np.asarray(history),
        {"best_residual": res_best, "best_iteration": k_best},
    )


def solve_null_control(
    p: ControlProblemLinear, phi_warm: np.ndarray | None = None
) -> ControlSolution:
    """Solve the weighted dual problem and recover (z, htilde).

    Returns the dual-recovered state (z^M = 0 by the weight convention), the
    control supported on the window, and an independent forward re-simulation
    driven by the recovered control as the null-control certificate.
    """
    grid = p.grid
    table = build_operator_table(p.coeffs, grid, reaction=p.reaction)
    times = grid.times
    w0inv_all, w1inv_all, log_ref = p.ws.normalized_inverse_weights(times)
    w0inv = w0inv_all[1:]
    w1inv = w1inv_all[1:]
    if not (np.all(np.isfinite(w0inv)) and np.all(np.isfinite(w1inv))):
        raise WeightOverflow("inverse weights are not finite on the grid")

    # Active window: drop trailing levels where both normalized inverse
    # weights underflow; their multipliers are pinned to zero.
    alive = np.maximum(w0inv, w1inv) >= _UNDERFLOW_FLOOR
    m_act = int(np.max(np.nonzero(alive)[0])) + 1 if alive.any() else grid.m
    m_act = min(m_act + 1, grid.m)

    mask = p.geom.mask(grid.x, "omega1").astype(float)
    op = _DualOperator(table, grid, m_act, w0inv[:m_act], w1inv[:m_act], mask, p.epsilon)

    b = np.zeros((m_act, grid.n))
    if p.G is not None:
        b += grid.dt * np.asarray(p.G, dtype=float)[1 : m_act + 1]
    b[0] += np.asarray(p.z0, dtype=float)

    # The dual variable spans an enormous dynamic range (its late-time
    # components grow like the inverse weights), so the system is solved in
    # symmetrically scaled unknowns Phi_s = diag(B)^(1/2) Phi: in that frame
    # the solution components are comparable and conjugate-gradient inner
    # products no longer annihilate the small directions.
    d = op.diagonal()
    scale = 1.0 / np.sqrt(np.maximum(d, 1e-300 * float(d.max())))
    op_scaled = lambda v: scale * op(scale * v)
    b_scaled = scale * b

    if p.preconditioner == "sweep":
        inner = op.sweep_preconditioner()
        precond = lambda r: inner(r / scale) / scale
    elif p.preconditioner == "jacobi":
        precond = np.ones_like(b)  # the scaling is exactly Jacobi
    elif p.preconditioner == "mass":
        precond = scale**2 * (1.0 + grid.dt * op.w1 * np.ones((m_act, grid.n)))
    elif p.preconditioner == "none":
        precond = np.ones_like(b)
    else:
        raise ValueError(f"unknown preconditioner {p.preconditioner!r}")

    if phi_warm is not None and phi_warm.shape == b.shape:
        x0 = phi_warm / scale
    else:
        x0 = None
    phi_s, history, iters = _cg(op_scaled, b_scaled, x0, p.cg_tol, p.cg_max_iter, precond)
    phi = scale * phi_s

    # recovery in the normalized frame: the scaling cancels exactly
    z_levels = op.w0 * op.apply_Lstar(phi)
    h_levels = -op.w1 * phi
    z_values = np.zeros((grid.m + 1, grid.n))
    z_values[0] = p.z0
    z_values[1 : m_act + 1] = z_levels
    h_values = np.zeros((grid.m + 1, grid.n))
    h_values[1 : m_act + 1] = h_levels

    z = StateField(grid=grid, values=z_values, kind="state")
    h_tilde = StateField(grid=grid, values=h_values, kind="control")

    sources = h_values.copy()
    if p.G is not None:
        sources = sources + np.asarray(p.G, dtype=float)
    z_resim = solve_linear_forward(table, p.z0, sources)

    z0_norm = norm_l2(p.z0, grid)
    terminal = norm_l2(z_resim.values[-1], grid)
    diag = {
        "cg_iters": iters,
        "cg_residual": float(history[-1]) if history.size else 0.0,
        "cg_history": history,
        "active_levels": m_act,
        "log_weight_scale": log_ref,
        "terminal_norm_dual": norm_l2(z_values[-1], grid),
        "terminal_norm": terminal,
        "terminal_ratio": terminal / z0_norm if z0_norm > 0 else 0.0,
        "terminal_tol": p.terminal_tol_factor * z0_norm,
        "control_norm": _l2_Q_right(h_values, grid),
        "state_norm": _l2_Q_right(z_values, grid),
        "kappa0": p.kappa0(),
    }
    return ControlSolution(
        z=z,
        h_tilde=h_tilde,
        phi_hat_scaled=phi,
        log_scale=log_ref,
        z_resim=z_resim,
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# weighted quadratures and estimate checks
# ---------------------------------------------------------------------------


def _l2_Q_right(values: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(grid.dt * grid.h * np.sum(values[1:] ** 2)))


def _weighted_sq_spacetime(log_w: np.ndarray, values: np.ndarray, grid: Grid) -> float:
    """int w(t)^2 |f|^2 over interior time nodes, robust to huge weights.

    Per-level terms are assembled as exp(2 log w + log ||f||^2); levels with
    zero field contribute zero even where the weight is unbounded.
    """
    sq = grid.h * np.sum(np.asarray(values, dtype=float) ** 2, axis=1)
    out = 0.0
    for n in range(1, grid.m):
        if sq[n] > 0.0:
            term = 2.0 * log_w[n] + math.log(sq[n])
            out += math.exp(term) if term < 700.0 else math.inf
    return grid.dt * out


def _weighted_sup(log_w: np.ndarray, per_level_sq: np.ndarray, lo: int, hi: int) -> float:
    out = 0.0
    for n in range(lo, hi):
        if per_level_sq[n] > 0.0:
            term = 2.0 * log_w[n] + math.log(per_level_sq[n])
            out = max(out, math.exp(term) if term < 700.0 else math.inf)
    return out


def check_estimate_31(sol: ControlSolution, p: ControlProblemLinear) -> float:
    """Ratio of the weighted state/control energy to kappa0.

    LHS = int rho0^2 |z|^2 + int_{w1} rho1^2 |htilde|^2.  Both sides are
    quadratic in the data, so the ratio is scale-invariant; across random
    data it probes the stability constant of the construction.
    """
    grid = p.grid
    k0 = p.kappa0()
    log_r0 = np.asarray(p.ws.log_rho0(grid.times), dtype=float)
    log_r1 = np.asarray(p.ws.log_rho1(grid.times), dtype=float)
    lhs = _weighted_sq_spacetime(log_r0, sol.z.values, grid) + _weighted_sq_spacetime(
        log_r1, sol.h_tilde.values, grid
    )
    if k0 == 0.0:
        return 0.0
    if not math.isfinite(lhs):
        raise WeightOverflow("weighted energy overflowed; reduce s")
    sol.diagnostics["estimate_ratio_31"] = lhs / k0
    return lhs / k0


def check_additional_estimates(sol: ControlSolution, p: ControlProblemLinear) -> dict:
    """Ratios of the auxiliary weighted bounds to kappa0/kappa1.

    sup_t rhohat^2 ||z||^2 and int rhohat^2 a |z_x|^2 against kappa0;
    sup_t rho1^2 ||sqrt(a) z_x||^2 and int rho1^2 (|z_t|^2 + |(a z_x)_x|^2)
    against kappa1 (the latter requires z0 in the weighted H1 space, which
    every discrete slice is).
    """
    grid = p.grid
    z = sol.z.values
    a_half = np.asarray(p.coeffs.coeff.a((np.arange(grid.n + 1) + 0.5) * grid.h), dtype=float)
    full = np.pad(z, ((0, 0), (1, 1)))
    dv = np.diff(full, axis=1) / grid.h
    grad_sq = grid.h * np.sum(a_half * dv**2, axis=1)  # ||sqrt(a) z_x||^2 per level
    val_sq = grid.h * np.sum(z**2, axis=1)

    log_rh = np.asarray(p.ws.log_rho_hat(grid.times), dtype=float)
    log_r1 = np.asarray(p.ws.log_rho1(grid.times), dtype=float)

    sup_hat = _weighted_sup(log_rh, val_sq, 0, grid.m)
    int_hat = grid.dt * sum(
        math.exp(2.0 * log_rh[n] + math.log(grad_sq[n])) if grad_sq[n] > 0 else 0.0
        for n in range(1, grid.m)
    )
    sup_1 = _weighted_sup(log_r1, grad_sq, 0, grid.m)

    zt = np.diff(z, axis=0) / grid.dt  # z_t at levels 1..m (backward differences)
    s_lo = np.zeros(grid.n)
    s_di = (a_half[:-1] + a_half[1:]) / grid.h**2
    s_lo[1:] = -a_half[1:-1] / grid.h**2
    s_up = np.zeros(grid.n)
    s_up[:-1] = -a_half[1:-1] / grid.h**2
    szz = tridiag_matvec(s_lo, s_di, s_up, z)  # -(a z_x)_x per level
    zt_sq = np.zeros(grid.m + 1)
    zt_sq[1:] = grid.h * np.sum(zt**2, axis=1)
    s_sq = grid.h * np.sum(szz**2, axis=1)
    int_1 = grid.dt * sum(
        math.exp(2.0 * log_r1[n] + math.log(zt_sq[n] + s_sq[n]))
        if (zt_sq[n] + s_sq[n]) > 0
        else 0.0
        for n in range(1, grid.m)
    )

    k0, k1 = p.kappa0(), p.kappa1()
    out = {
        "sup_rho_hat_state": sup_hat,
        "int_rho_hat_gradient": int_hat,
        "sup_rho1_gradient": sup_1,
        "int_rho1_time_and_flux": int_1,
        "kappa0": k0,
        "kappa1": k1,
        "ratio_37": (sup_hat + int_hat) / k0 if k0 > 0 else 0.0,
        "ratio_38": (sup_1 + int_1) / k1 if k1 > 0 else 0.0,
    }
    sol.diagnostics["additional_estimates"] = out
    return out


def check_control_regularity(sol: ControlSolution, p: ControlProblemLinear) -> dict:
    """Smoothed-control bound: rhobar htilde measured in the strong norm.

    First verifies the exponent identity rhotilde rho1^2 = rhobar (log form,
    pointwise in t), then evaluates rhobar htilde stably as
    -rhotilde phi_hat on the window and reports its L2-in-time second-order
    norm plus sup-in-time first-order norm against ||z0|| + ||rho2 G||.
    """
    grid = p.grid
    times = grid.times[:-1]  # every factor degenerates at t = T
    log_tilde = np.asarray(p.ws.log_rho_tilde(times), dtype=float)
    log_r1 = np.asarray(p.ws.log_rho1(times), dtype=float)
    log_bar = np.asarray(p.ws.log_rho_bar(times), dtype=float)
    ident = float(
        np.max(np.abs(log_tilde + 2.0 * log_r1 - log_bar) / np.maximum(np.abs(log_bar), 1.0))
    )

    # rhobar htilde = -rhotilde phi_hat on the window; in the normalized
    # frame phi_scaled = e^{log_ref} phi_hat, so multiply by the shifted log
    # (rhotilde vanishes at t = T, where the factor underflows to 0).
    mask = p.geom.mask(grid.x, "omega1").astype(float)
    m_act = sol.phi_hat_scaled.shape[0]
    w = np.zeros((grid.m + 1, grid.n))
    shifted = p.ws.log_rho_tilde(grid.times[1 : m_act + 1]) - sol.log_scale
    with np.errstate(over="ignore"):
        factor = np.exp(shifted)
    w[1 : m_act + 1] = -factor[:, None] * sol.phi_hat_scaled * mask[None, :]

    full = np.pad(w, ((0, 0), (1, 1)))
    lap = (full[:, 2:] - 2.0 * full[:, 1:-1] + full[:, :-2]) / grid.h**2
    grad = np.diff(full, axis=1) / grid.h
    lap_sq = grid.h * np.sum(lap**2, axis=1)
    grad_sq = grid.h * np.sum(grad**2, axis=1)
    val_sq = grid.h * np.sum(w**2, axis=1)
    int_norm = math.sqrt(
        grid.dt * float(np.sum((val_sq + grad_sq + lap_sq)[1 : grid.m]))
    )
    sup_norm = math.sqrt(float(np.max((val_sq + grad_sq)[: grid.m])))
    u_norm = int_norm + sup_norm

    k = norm_l2(p.z0, grid)
    if p.G is not None:
        k += math.sqrt(_weighted_sq_spacetime(p.log_rho2_levels(), p.G, grid))
    out = {
        "identity_residual": ident,
        "u_norm": u_norm,
        "data_norm": k,
        "ratio": u_norm / k if k > 0 else 0.0,
    }
    sol.diagnostics["control_regularity"] = out
    return out
