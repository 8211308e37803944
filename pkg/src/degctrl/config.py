"""Structured text configuration for the command-line front end.

A run is described by an INI file with sections coefficient, motion,
nonlinearity, geometry, discretization, control and output.  Initial data
are small shape expressions like ``1 + 0.5*sin_pi`` evaluated on the unit
grid.  Parsing failures raise ConfigParse with the offending section/field.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from degctrl.carleman import PsiFunction, WeightSystem, build_psi, build_weights, select_lambda
from degctrl.disc import Grid
from degctrl.model import (
    ControlGeometry,
    DegenerateCoefficient,
    DomainMotion,
    Nonlinearity,
    OutOfRange,
    power_law_metadata,
)

__all__ = ["ConfigParse", "RunSetup", "SolverParams", "load_config", "parse_shape"]


class ConfigParse(ValueError):
    """Unusable configuration file; message carries section and field."""


_SHAPES = {
    "one": lambda x: np.ones_like(x),
    "sin_pi": lambda x: np.sin(np.pi * x),
    "sin_2pi": lambda x: np.sin(2 * np.pi * x),
    "sin_3pi": lambda x: np.sin(3 * np.pi * x),
    "parabola": lambda x: x * (1.0 - x),
}


def parse_shape(expr: str, x: np.ndarray) -> np.ndarray:
    """Evaluate a sum of ``coef*name`` terms (or bare numbers) on x."""
    out = np.zeros_like(np.asarray(x, dtype=float))
    for raw in expr.replace("-", "+-").split("+"):
        term = raw.strip()
        if not term:
            continue
        sign = 1.0
        if term.startswith("-"):
            sign, term = -1.0, term[1:].strip()
        if "*" in term:
            coef_s, name = (p.strip() for p in term.split("*", 1))
            try:
                coef = float(coef_s)
            except ValueError:
                raise ConfigParse(f"bad coefficient {coef_s!r} in shape {expr!r}") from None
        else:
            coef, name = 1.0, term
        if name in _SHAPES:
            out += sign * coef * _SHAPES[name](x)
        else:
            try:
                out += sign * coef * float(name)
            except ValueError:
                raise ConfigParse(
                    f"unknown shape {name!r} in {expr!r}; known: {sorted(_SHAPES)}"
                ) from None
    return out


@dataclass
class SolverParams:
    s: float = 5e-4
    lam: float | None = None  # None = doubling search
    m_margin_factor: float = 0.1
    cg_tol: float = 1e-10
    cg_max_iter: int = 2000
    preconditioner: str = "sweep"
    epsilon: float = 0.0
    terminal_tol_factor: float = 1e-3
    trajectory_floor: float = 1e-2
    max_outer: int = 50
    tol_fp: float = 1e-8
    damping: float = 1.0
    seed: int = 12345
    trials: int = 100
    z0: str = "1.0*sin_pi"
    trajectory0: str = "1 + 0.5*sin_pi"
    y0: str = "1.0*sin_pi"


@dataclass
class RunSetup:
    coeff: DegenerateCoefficient
    motion: DomainMotion
    nl: Nonlinearity
    geom: ControlGeometry
    grid: Grid
    params: SolverParams
    figures: bool = True
    figure_dpi: int = 140
    config_text: str = ""
    sweep_axes: dict = dc_field(default_factory=dict)
    sweep_task: str = "control-linear"

    @property
    def config_hash(self) -> str:
        return hashlib.blake2b(self.config_text.encode(), digest_size=8).hexdigest()

    def build_psi(self) -> PsiFunction:
        if not 0.0 <= self.coeff.K < 1.0:
            raise ConfigParse(
                f"weight construction needs weak degeneracy K in [0, 1), got K = {self.coeff.K}"
            )
        return build_psi(self.coeff, self.geom)

    def build_weights(self, psi: PsiFunction | None = None) -> WeightSystem:
        psi = psi or self.build_psi()
        lam = self.params.lam if self.params.lam is not None else select_lambda(psi)
        m_margin = self.params.m_margin_factor * (self.grid.horizon / 2.0) ** 8
        return build_weights(
            psi, s=self.params.s, lam=lam, T=self.grid.horizon, m_margin=m_margin
        )


def _power_law_unchecked(alpha: float, motion: DomainMotion) -> DegenerateCoefficient:
    """Raw power-law coefficient without the admissibility guard."""
    return DegenerateCoefficient(
        a=lambda x: np.power(np.asarray(x, dtype=float), alpha),
        a_prime=lambda x: alpha * np.power(np.asarray(x, dtype=float), alpha - 1.0),
        K=alpha,
        alpha=None,  # not an admissible power law; treated as custom
        f_scale=motion.ell,
        g_scale=lambda t: motion.ell(t) ** alpha,
    )


def _interval(raw: str, where: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigParse(f"{where}: expected 'lo, hi', got {raw!r}") from None
    return a, b


def _float_list(raw: str) -> list[float]:
    return [float(v) for v in raw.split(",") if v.strip()]


def load_config(path) -> RunSetup:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        cp.read_string(text, source=str(path))
    except OSError as exc:
        raise ConfigParse(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigParse(f"config syntax: {exc}") from exc

    def get(section, option, default=None, cast=str):
        if not cp.has_option(section, option):
            if default is None:
                raise ConfigParse(f"missing [{section}] {option}")
            return default
        raw = cp.get(section, option)
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError:
            raise ConfigParse(f"[{section}] {option}: cannot parse {raw!r}") from None

    kind = get("motion", "kind", "affine")
    T = get("discretization", "horizon", 1.0, float)
    ell0 = get("motion", "ell0", 1.0, float)
    rate = get("motion", "rate", 0.0, float)
    if kind == "affine":
        motion = DomainMotion.affine(ell0, rate, T)
    elif kind == "exponential":
        motion = DomainMotion.exponential(ell0, rate, T)
    elif kind == "constant":
        motion = DomainMotion.constant(ell0, T)
    else:
        raise ConfigParse(f"[motion] kind: unknown {kind!r}")

    ckind = get("coefficient", "kind", "power_law")
    if ckind != "power_law":
        raise ConfigParse(
            f"[coefficient] kind: only 'power_law' is configurable (got {ckind!r}); "
            "custom coefficients are code-level objects"
        )
    alpha = get("coefficient", "alpha", None, float)
    allow0 = get("coefficient", "allow_nondegenerate", False, bool)
    try:
        coeff = power_law_metadata(alpha, motion, allow_nondegenerate=allow0)
    except OutOfRange:
        # out-of-range exponents are still loadable so `validate` can report
        # the violation (solver paths refuse them when they build weights)
        coeff = _power_law_unchecked(alpha, motion)

    nkind = get("nonlinearity", "kind", "linear")
    c = get("nonlinearity", "c", 0.0, float)
    try:
        nl = Nonlinearity.by_name(nkind, c=c)
    except OutOfRange as exc:
        raise ConfigParse(f"[nonlinearity] kind: {exc}") from exc

    omega = _interval(get("geometry", "omega", "0.26, 0.74"), "[geometry] omega")
    omega1 = _interval(get("geometry", "omega1", "0.35, 0.65"), "[geometry] omega1")
    if cp.has_option("geometry", "omega_prime"):
        ap, bp = _interval(cp.get("geometry", "omega_prime"), "[geometry] omega_prime")
    else:
        shrink = 0.15 * (omega1[1] - omega1[0])
        ap, bp = omega1[0] + shrink, omega1[1] - shrink
    try:
        geom = ControlGeometry(omega=omega, omega1=omega1, alpha_prime=ap, beta_prime=bp)
    except OutOfRange as exc:
        raise ConfigParse(f"[geometry]: {exc}") from exc

    try:
        grid = Grid(
            n=get("discretization", "n", 64, int),
            m=get("discretization", "m", 128, int),
            horizon=T,
        )
    except ValueError as exc:
        raise ConfigParse(f"[discretization]: {exc}") from exc

    lam_raw = get("control", "lambda", "auto")
    params = SolverParams(
        s=get("control", "s", 5e-4, float),
        lam=None if str(lam_raw).strip() == "auto" else float(lam_raw),
        m_margin_factor=get("control", "m_margin_factor", 0.1, float),
        cg_tol=get("control", "cg_tol", 1e-10, float),
        cg_max_iter=get("control", "cg_max_iter", 2000, int),
        preconditioner=get("control", "preconditioner", "sweep"),
        epsilon=get("control", "epsilon", 0.0, float),
        terminal_tol_factor=get("control", "terminal_tol_factor", 1e-3, float),
        trajectory_floor=get("control", "trajectory_floor", 1e-2, float),
        max_outer=get("control", "max_outer", 50, int),
        tol_fp=get("control", "tol_fp", 1e-8, float),
        damping=get("control", "damping", 1.0, float),
        seed=get("control", "seed", 12345, int),
        trials=get("control", "trials", 100, int),
        z0=get("control", "z0", "1.0*sin_pi"),
        trajectory0=get("control", "trajectory0", "1 + 0.5*sin_pi"),
        y0=get("control", "y0", "1.0*sin_pi"),
    )

    sweep_axes: dict = {}
    sweep_task = "control-linear"
    if cp.has_section("sweep"):
        sweep_task = get("sweep", "task", "control-linear")
        for axis in ("s", "lambda", "alpha", "n", "m"):
            if cp.has_option("sweep", axis):
                vals = _float_list(cp.get("sweep", axis))
                sweep_axes[axis] = [int(v) if axis in ("n", "m") else v for v in vals]
        total = int(np.prod([len(v) for v in sweep_axes.values()])) if sweep_axes else 1
        if total > 10_000:
            raise ConfigParse(f"[sweep]: {total} combinations exceed the 10^4 cap")

    return RunSetup(
        coeff=coeff,
        motion=motion,
        nl=nl,
        geom=geom,
        grid=grid,
        params=params,
        figures=get("output", "figures", True, bool),
        figure_dpi=get("output", "figure_dpi", 140, int),
        config_text=text,
        sweep_axes=sweep_axes,
        sweep_task=sweep_task,
    )
