"""Trajectory tracking for the semilinear equation by an outer fixed point.

Writing y = z + ytilde around an uncontrolled trajectory turns tracking
into null control of the deviation z, whose equation differs from the
linearization along ytilde by two frozen terms: the quadratic remainder of
the reaction and the bilinear product h z.  The scheme iterates

    G^k = h^k z^k 1_w - R(z^k) (+ clamp correction),
    (z^{k+1}, htilde^{k+1}) = weighted linear null control with data (z0, G^k),
    h^{k+1} = htilde^{k+1} / ytilde  on the window,

which is the standard numerical reading of the local-inversion argument:
every iterate is exactly the linear construction, and a fixed point solves
the semilinear deviation equation with z(T) = 0.  The division by ytilde is
guarded by a floor; where the floor binds, the mismatch h ytilde - htilde
is folded into G so that a converged iterate is still exactly consistent
with the bilinear re-simulation.

For a vanishing trajectory the bilinear recovery is impossible and the
driver falls back to the additive-control variant (the control enters as a
source, the target is the zero state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from degctrl.carleman import WeightSystem
from degctrl.control_linear import (
    ControlProblemLinear,
    ControlSolution,
    solve_null_control,
    _weighted_sq_spacetime,
)
from degctrl.disc import (
    Grid,
    StateField,
    build_operator_table,
    norm_h1a,
    norm_l2,
    solve_semilinear_forward,
    solve_trajectory,
)
from degctrl.model import ControlGeometry, DegenerateCoefficient, DomainMotion, Nonlinearity
from degctrl.transform import PhysicalSlice, TransformedCoefficients, build_transform, pull_back_initial

__all__ = [
    "ControlProblemNonlinear",
    "FixedPointConfig",
    "FixedPointDiverged",
    "MappingResiduals",
    "NonlinearMapping",
    "NonlinearSolution",
    "TrajectoryFloorViolated",
    "evaluate_mapping",
    "find_smallness_eps",
    "nonlinear_remainder",
    "solve_trajectory_tracking",
]


class FixedPointDiverged(RuntimeError):
    """Successive iterate changes grew for several consecutive sweeps."""

    def __init__(self, message: str, history: list):
        self.history = history
        super().__init__(message)


class TrajectoryFloorViolated(ValueError):
    """The trajectory vanishes or changes sign on the control window."""


@dataclass
class FixedPointConfig:
    max_outer: int = 50
    tol_fp: float = 1e-8
    damping: float = 1.0
    smallness_eps: float | None = None
    trajectory_floor: float = 1e-2

    def __post_init__(self):
        if not (self.tol_fp > 0 and self.max_outer >= 1 and 0.0 < self.damping <= 1.0):
            raise ValueError("need tol_fp > 0, max_outer >= 1, damping in (0, 1]")


@dataclass
class ControlProblemNonlinear:
    """Static data shared by every outer iteration."""

    coeff: DegenerateCoefficient
    motion: DomainMotion
    nl: Nonlinearity
    geom: ControlGeometry
    grid: Grid
    ws: WeightSystem
    cg_tol: float = 1e-10
    cg_max_iter: int = 2000
    preconditioner: str = "sweep"
    epsilon: float = 0.0


@dataclass
class MappingResiduals:
    A1_residual: float
    A2_residual: float
    Y_norm: float


@dataclass
class NonlinearSolution:
    z: StateField
    h_tilde: StateField
    h_bilinear: StateField | None
    y: StateField
    ytilde: StateField
    mode: str
    converged: bool
    iterations: int
    tracking_error: float
    history: list = dc_field(default_factory=list)
    diagnostics: dict = dc_field(default_factory=dict)


def nonlinear_remainder(
    z: np.ndarray,
    y_tilde: np.ndarray,
    nl: Nonlinearity,
    motion: DomainMotion,
    grid: Grid,
) -> np.ndarray:
    """R(z) = F(., z + ytilde) - F(., ytilde) - D3F(., ytilde) z, pointwise."""
    z = np.asarray(z, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    out = np.empty_like(z)
    for n, t in enumerate(grid.times):
        xbar = motion.ell(t) * grid.x
        out[n] = (
            nl.F(xbar, t, z[n] + y_tilde[n])
            - nl.F(xbar, t, y_tilde[n])
            - nl.D3F(xbar, t, y_tilde[n]) * z[n]
        )
    return out


class NonlinearMapping:
    """Discrete realization of the deviation mapping and its derivative.

    A1(z, h) is the full residual of the semilinear deviation equation with
    bilinear control, evaluated with the same stencils as the solvers; A2 is
    the initial slice.  The derivative drops the quadratic remainder and
    carries the three bilinear cross terms.
    """

    def __init__(
        self,
        coeffs: TransformedCoefficients,
        ytilde: StateField,
        geom: ControlGeometry,
        ws: WeightSystem,
        grid: Grid,
    ):
        self.coeffs = coeffs
        self.ytilde = ytilde
        self.geom = geom
        self.ws = ws
        self.grid = grid
        self.table = build_operator_table(coeffs, grid)  # principal part only
        self.mask = geom.mask(grid.x, "omega1").astype(float)

    def _principal(self, z: np.ndarray) -> np.ndarray:
        """(z_t + b S z + drift z) at levels 1..m."""
        grid = self.grid
        out = np.empty((grid.m, grid.n))
        for n in range(1, grid.m + 1):
            out[n - 1] = (z[n] - z[n - 1]) / grid.dt + self.table.apply(n, z[n])
        return out

    def A1(self, z: np.ndarray, h: np.ndarray) -> np.ndarray:
        grid = self.grid
        out = self._principal(z)
        yt = self.ytilde.values
        for n in range(1, grid.m + 1):
            t = grid.times[n]
            x = grid.x
            out[n - 1] += self.coeffs.F_pulled(x, t, z[n] + yt[n]) - self.coeffs.F_pulled(
                x, t, yt[n]
            )
            out[n - 1] -= h[n] * self.mask * (z[n] + yt[n])
        return out

    def A2(self, z: np.ndarray) -> np.ndarray:
        return z[0]

    def derivative(
        self, z: np.ndarray, h: np.ndarray, zbar: np.ndarray, hbar: np.ndarray
    ) -> np.ndarray:
        grid = self.grid
        out = self._principal(zbar)
        yt = self.ytilde.values
        for n in range(1, grid.m + 1):
            t = grid.times[n]
            d3 = self.coeffs.D3F_pulled(grid.x, t, z[n] + yt[n])
            out[n - 1] += d3 * zbar[n]
            out[n - 1] -= self.mask * (hbar[n] * z[n] + h[n] * zbar[n] + hbar[n] * yt[n])
        return out

    def linearized_source(self, z: np.ndarray, h: np.ndarray) -> np.ndarray:
        """The source G for which (z, htilde = h ytilde) solves the
        linearized equation: G = z_t + A0 z + D3F(ytilde) z - h ytilde 1."""
        grid = self.grid
        out = self._principal(z)
        yt = self.ytilde.values
        for n in range(1, grid.m + 1):
            t = grid.times[n]
            d3 = self.coeffs.D3F_pulled(grid.x, t, yt[n])
            out[n - 1] += d3 * z[n] - h[n] * self.mask * yt[n]
        return out

    def residuals(self, z: np.ndarray, h: np.ndarray, z0: np.ndarray) -> MappingResiduals:
        grid = self.grid
        log_r2 = np.asarray(self.ws.log_rho2(grid.times), dtype=float)
        a1 = np.zeros((grid.m + 1, grid.n))
        a1[1:] = self.A1(z, h)
        a1_res = math.sqrt(_weighted_sq_spacetime(log_r2, a1, grid))
        diff0 = z[0] - np.asarray(z0, dtype=float)
        a2_res = norm_h1a(diff0, self.coeffs.coeff, grid)

        log_r0 = np.asarray(self.ws.log_rho0(grid.times), dtype=float)
        log_r1 = np.asarray(self.ws.log_rho1(grid.times), dtype=float)
        g = np.zeros((grid.m + 1, grid.n))
        g[1:] = self.linearized_source(z, h)
        hyt = h * self.mask[None, :] * self.ytilde.values
        y_sq = (
            _weighted_sq_spacetime(log_r0, z, grid)
            + _weighted_sq_spacetime(log_r1, hyt, grid)
            + _weighted_sq_spacetime(log_r2, g, grid)
            + norm_h1a(z[0], self.coeffs.coeff, grid) ** 2
        )
        return MappingResiduals(A1_residual=a1_res, A2_residual=a2_res, Y_norm=math.sqrt(y_sq))


def evaluate_mapping(
    z: np.ndarray, h: np.ndarray, mapping: NonlinearMapping, z0: np.ndarray
) -> MappingResiduals:
    """Residuals of the deviation mapping at (z, h) against the data z0."""
    return mapping.residuals(z, h, z0)


def _as_unit_slice(data, motion: DomainMotion, grid: Grid) -> np.ndarray:
    if isinstance(data, PhysicalSlice):
        return pull_back_initial(data, motion, grid)
    data = np.asarray(data, dtype=float)
    if data.shape != (grid.n,):
        raise ValueError(f"expected a unit-grid slice of shape ({grid.n},)")
    return data


def solve_trajectory_tracking(
    u0,
    traj_u0,
    config: FixedPointConfig,
    p: ControlProblemNonlinear,
    ytilde: StateField | None = None,
) -> NonlinearSolution:
    """Drive the semilinear state to the trajectory at the final time.

    ``u0`` and ``traj_u0`` are initial states, either PhysicalSlice on
    (0, ell(0)) or arrays on the unit grid.  Returns the converged deviation
    and controls together with the certificate re-simulation: the semilinear
    equation marched independently with the bilinear (or additive) control,
    whose terminal distance to the trajectory is the reported error.
    """
    grid, geom, nl, motion = p.grid, p.geom, p.nl, p.motion
    _, coeffs_plain = build_transform(p.coeff, motion, nl)
    y0 = _as_unit_slice(u0, motion, grid)
    yt0 = _as_unit_slice(traj_u0, motion, grid)

    if ytilde is None:
        ytilde, traj_diag = solve_trajectory(
            yt0, coeffs_plain, grid, nl=nl, geom=geom, floor=config.trajectory_floor
        )
    else:
        mask_idx = geom.mask(grid.x, "omega1")
        traj_diag = {"min_abs_on_window": float(np.min(np.abs(ytilde.values[:, mask_idx])))}

    mask = geom.mask(grid.x, "omega1").astype(float)
    mask_idx = mask.astype(bool)
    window_vals = ytilde.values[:, mask_idx]
    additive = bool(np.max(np.abs(ytilde.values)) == 0.0)
    if not additive:
        if np.min(window_vals) <= 0.0 < np.max(window_vals) or np.max(np.abs(window_vals)) == 0.0:
            raise TrajectoryFloorViolated(
                "trajectory vanishes or changes sign on the control window; "
                "bilinear recovery is undefined"
            )
        sign = np.sign(window_vals)
        denom = np.zeros_like(ytilde.values)
        denom[:, mask_idx] = sign * np.maximum(np.abs(window_vals), config.trajectory_floor)
    z0 = y0 - yt0
    # data outside the discovered smallness radius is still attempted; both
    # values are recorded in the diagnostics for the caller to compare
    z0_h1a = norm_h1a(z0, p.coeff, grid)

    _, coeffs = build_transform(p.coeff, motion, nl, trajectory=ytilde)
    reaction = coeffs.reaction_table(grid)

    G = None
    z_prev = None
    h_prev = None
    phi_warm = None
    history: list[dict] = []
    sol: ControlSolution | None = None
    grow = 0
    converged = False
    z_it = None
    h_it = None
    for k in range(config.max_outer):
        plin = ControlProblemLinear(
            z0=z0,
            G=G,
            ws=p.ws,
            coeffs=coeffs,
            geom=geom,
            grid=grid,
            reaction=reaction,
            cg_tol=p.cg_tol,
            cg_max_iter=p.cg_max_iter,
            preconditioner=p.preconditioner,
            epsilon=p.epsilon,
        )
        sol = solve_null_control(plin, phi_warm=phi_warm)
        phi_warm = sol.phi_hat_scaled
        z_new, h_new = sol.z.values, sol.h_tilde.values
        if z_it is not None and config.damping < 1.0:
            z_new = (1.0 - config.damping) * z_it + config.damping * z_new
            h_new = (1.0 - config.damping) * h_it + config.damping * h_new
        if z_it is not None:
            denom_norm = max(math.sqrt(grid.dt * grid.h * float(np.sum(z_it**2))), 1e-30)
            change = (
                math.sqrt(grid.dt * grid.h * float(np.sum((z_new - z_it) ** 2))) / denom_norm
            )
        elif not np.any(z_new):
            change = 0.0  # zero deviation: already on the trajectory
        else:
            change = math.inf
        z_it, h_it = z_new, h_new
        history.append(
            {
                "iteration": k,
                "change": change,
                "control_norm": sol.diagnostics["control_norm"],
                "terminal_ratio": sol.diagnostics["terminal_ratio"],
                "cg_iters": sol.diagnostics["cg_iters"],
            }
        )
        if change <= config.tol_fp:
            converged = True
            break
        if len(history) >= 2 and math.isfinite(history[-2]["change"]):
            grow = grow + 1 if change > history[-2]["change"] else 0
            if grow >= 5:
                raise FixedPointDiverged(
                    f"iterate change grew for 5 consecutive sweeps (last {change:.3e}); "
                    "the data may be outside the contraction regime",
                    history,
                )
        # refresh the frozen source
        R = nonlinear_remainder(z_it, ytilde.values, nl, motion, grid)
        if additive:
            G = -R
        else:
            h_bil = np.divide(h_it, denom, out=np.zeros_like(h_it), where=mask_idx[None, :])
            G = h_bil * z_it * mask[None, :] - R
            G += (h_bil * ytilde.values - h_it) * mask[None, :]

    assert sol is not None and z_it is not None and h_it is not None

    # certificate: independent semilinear march with the recovered control
    if additive:
        y_ctrl = solve_semilinear_forward(coeffs_plain, grid, z0 + yt0, nl=nl, sources=h_it)
        h_bil_field = None
        tracking_error = norm_l2(y_ctrl.values[-1], grid)
    else:
        h_bil = np.divide(h_it, denom, out=np.zeros_like(h_it), where=mask_idx[None, :])
        y_ctrl = solve_semilinear_forward(
            coeffs_plain, grid, z0 + yt0, nl=nl, control_mult=h_bil * mask[None, :]
        )
        h_bil_field = StateField(grid=grid, values=h_bil, kind="control")
        tracking_error = norm_l2(y_ctrl.values[-1] - ytilde.values[-1], grid)

    diag = {
        "z0_norm": norm_l2(z0, grid),
        "z0_h1a": z0_h1a,
        "smallness_eps": config.smallness_eps,
        "trajectory_min_on_window": traj_diag.get("min_abs_on_window"),
        "floor_clamped": bool(
            not additive and np.any(np.abs(window_vals) < config.trajectory_floor)
        ),
        "control_norm": sol.diagnostics["control_norm"],
        "terminal_ratio_linear": sol.diagnostics["terminal_ratio"],
        "tracking_error": tracking_error,
    }
    return NonlinearSolution(
        z=StateField(grid=grid, values=z_it, kind="state"),
        h_tilde=StateField(grid=grid, values=h_it, kind="control"),
        h_bilinear=h_bil_field,
        y=y_ctrl,
        ytilde=ytilde,
        mode="additive" if additive else "tracking",
        converged=converged,
        iterations=len(history),
        tracking_error=tracking_error,
        history=history,
        diagnostics=diag,
    )


def find_smallness_eps(
    traj_u0,
    z0_shape: np.ndarray,
    config: FixedPointConfig,
    p: ControlProblemNonlinear,
    lo: float = 1e-4,
    hi: float = 1.0,
    probes: int = 6,
    probe_outer: int = 20,
) -> tuple[float, list]:
    """Bisect for the largest deviation scale the fixed point still handles.

    ``z0_shape`` is a unit-grid profile; the probe data is
    traj_u0 + scale * z0_shape.  A probe counts as converged when the
    iteration settles within ``probe_outer`` sweeps.  Returns the scale in
    weighted-H1 units (the norm of scale * z0_shape) and the probe log.
    """
    grid, motion = p.grid, p.motion
    yt0 = _as_unit_slice(traj_u0, motion, grid)
    probe_cfg = FixedPointConfig(
        max_outer=probe_outer,
        tol_fp=config.tol_fp,
        damping=config.damping,
        trajectory_floor=config.trajectory_floor,
    )
    _, coeffs_plain = build_transform(p.coeff, motion, p.nl)
    ytilde, _ = solve_trajectory(
        yt0, coeffs_plain, grid, nl=p.nl, geom=p.geom, floor=probe_cfg.trajectory_floor
    )

    def attempt(scale: float) -> bool:
        try:
            out = solve_trajectory_tracking(
                yt0 + scale * z0_shape, yt0, probe_cfg, p, ytilde=ytilde
            )
        except (FixedPointDiverged, ArithmeticError):
            return False
        return out.converged

    log: list = []
    if attempt(hi):
        eps = norm_h1a(hi * z0_shape, p.coeff, grid)
        log.append((hi, True))
        return eps, log
    log.append((hi, False))
    if not attempt(lo):
        log.append((lo, False))
        return 0.0, log
    log.append((lo, True))
    good, bad = lo, hi
    for _ in range(probes):
        mid = math.sqrt(good * bad)
        ok = attempt(mid)
        log.append((mid, ok))
        if ok:
            good = mid
        else:
            bad = mid
    return norm_h1a(good * z0_shape, p.coeff, grid), log
