"""Batch front end: validate, solve, probe, sweep; CSV and figure reports.

Every subcommand reads one INI config, writes its delimited outputs, the
matching figures and a JSON manifest into the output directory, and exits
0 on success, 2 on validation failure, 3 on solver failure, 4 on a config
parse error.  Identical config and seed give byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from degctrl import __version__
from degctrl.carleman import LambdaTooSmall, probe_carleman, probe_observability
from degctrl.config import ConfigParse, RunSetup, load_config, parse_shape
from degctrl.control_linear import (
    CGStalled,
    ControlProblemLinear,
    WeightOverflow,
    check_additional_estimates,
    check_control_regularity,
    check_estimate_31,
    solve_null_control,
)
from degctrl.control_nonlinear import (
    ControlProblemNonlinear,
    FixedPointConfig,
    FixedPointDiverged,
    TrajectoryFloorViolated,
    solve_trajectory_tracking,
)
from degctrl.disc import (
    LinearSolveFailure,
    StateField,
    norm_l2,
    solve_semilinear_forward,
    solve_trajectory,
    write_field_binary,
    write_field_csv,
)
from degctrl.model import validate_problem
from degctrl.transform import build_transform, push_forward_state
from degctrl import figures

_SOLVER_ERRORS = (
    CGStalled,
    FixedPointDiverged,
    LinearSolveFailure,
    WeightOverflow,
    TrajectoryFloorViolated,
    LambdaTooSmall,
)

_SUBCOMMANDS = (
    "validate",
    "forward",
    "trajectory",
    "weights",
    "probe-carleman",
    "probe-observability",
    "control-linear",
    "control-nonlinear",
    "sweep",
)


class _Run:
    """Collects outputs and timings for the manifest."""

    def __init__(self, setup: RunSetup, out_dir: Path):
        self.setup = setup
        self.out = out_dir
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def csv(self, name: str, header: list[str], rows) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content, encoding="utf-8")
        return p

    def field(self, name: str, field: StateField, binary: bool = False) -> None:
        write_field_csv(self.path(name + ".csv"), field)
        if binary:
            write_field_binary(self.path(name + ".bin"), field)

    def figure(self, fn, *args, name: str, **kw) -> None:
        if self.setup.figures:
            fn(*args, self.path(name), dpi=self.setup.figure_dpi, **kw)

    def finish(self, subcommand: str, status: str) -> None:
        manifest = {
            "subcommand": subcommand,
            "status": status,
            "config_hash": self.setup.config_hash,
            "seed": self.setup.params.seed,
            "versions": {"degctrl": __version__, "numpy": np.__version__},
            "timings_s": {k: round(v, 4) for k, v in self.timings.items()},
            "outputs": self.outputs,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _timed(run: _Run, name: str):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            run.timings[name] = time.perf_counter() - self.t0

    return _Ctx()


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_validate(setup: RunSetup, run: _Run) -> int:
    with _timed(run, "validate"):
        rep = validate_problem(setup.coeff, setup.motion, setup.nl, setup.geom)
    run.csv(
        "validation.csv",
        ["check", "passed", "margin", "value", "detail"],
        [(c.name, int(c.passed), c.margin, c.value, c.detail.replace(",", ";")) for c in rep.checks],
    )
    run.text("report.txt", rep.to_text() + "\n")
    print(rep.to_text())
    return 0 if rep.passed else 2


def _coefficient_table_rows(setup: RunSetup, coeffs, stride: int = 4):
    grid = setup.grid
    for n in range(0, grid.m + 1, stride):
        t = grid.times[n]
        b = float(coeffs.b(t))
        for i in range(0, grid.n, stride):
            x = grid.x[i]
            c_val = float(coeffs.c(np.array([x]), t)[0]) if coeffs.trajectory is not None else 0.0
            yield (x, t, b, float(coeffs.B(np.array([x]), t)[0]), c_val)


def _cmd_forward(setup: RunSetup, run: _Run) -> int:
    _, coeffs = build_transform(setup.coeff, setup.motion, setup.nl)
    y0 = parse_shape(setup.params.y0, setup.grid.x)
    with _timed(run, "solve"):
        field = solve_semilinear_forward(coeffs, setup.grid, y0, nl=setup.nl)
    run.field("state", field, binary=True)
    coeffs.trajectory = field
    run.csv("coefficients.csv", ["x", "t", "b", "B", "c"], _coefficient_table_rows(setup, coeffs))
    run.figure(figures.field_heatmap, field, name="state.png", title="state")
    summary = (
        f"forward solve: n={setup.grid.n} m={setup.grid.m}\n"
        f"initial norm: {norm_l2(y0, setup.grid):.6e}\n"
        f"final norm:   {norm_l2(field.values[-1], setup.grid):.6e}\n"
    )
    run.text("report.txt", summary)
    print(summary, end="")
    return 0


def _cmd_trajectory(setup: RunSetup, run: _Run) -> int:
    _, coeffs = build_transform(setup.coeff, setup.motion, setup.nl)
    y0 = parse_shape(setup.params.trajectory0, setup.grid.x)
    with _timed(run, "solve"):
        field, diag = solve_trajectory(
            y0,
            coeffs,
            setup.grid,
            nl=setup.nl,
            geom=setup.geom,
            floor=setup.params.trajectory_floor,
        )
    run.field("trajectory", field, binary=True)
    run.figure(figures.field_heatmap, field, name="trajectory.png", title="trajectory")
    summary = (
        f"trajectory solve: n={setup.grid.n} m={setup.grid.m}\n"
        f"window minimum |ytilde|: {diag.get('min_abs_on_window', float('nan')):.6e}\n"
        f"floor: {setup.params.trajectory_floor:.3e}\n"
    )
    run.text("report.txt", summary)
    print(summary, end="")
    return 0


def _cmd_weights(setup: RunSetup, run: _Run) -> int:
    with _timed(run, "build"):
        psi = setup.build_psi()
        ws = setup.build_weights(psi)
    ts = np.linspace(0.0, setup.grid.horizon, 513)[:-1]
    with np.errstate(over="ignore"):
        rows = zip(
            ts,
            ws.A_star(ts),
            ws.A_hat(ts),
            ws.zeta_star(ts),
            ws.zeta_hat(ts),
            np.exp(ws.log_rho0(ts)),
            np.exp(ws.log_rho1(ts)),
            np.exp(ws.log_rho2(ts)),
            np.exp(ws.log_rho_hat(ts)),
            np.exp(ws.log_rho_bar(ts)),
        )
    header = ["t", "A_star", "A_hat", "zeta_star", "zeta_hat", "rho0", "rho1", "rho2", "rho_hat", "rho_bar"]
    run.csv("weights.csv", header, rows)
    run.csv(
        "weights_log.csv",
        ["t", "log_rho0", "log_rho1", "log_rho2", "log_rho_hat", "log_rho_bar", "log_rho_tilde"],
        zip(
            ts,
            ws.log_rho0(ts),
            ws.log_rho1(ts),
            ws.log_rho2(ts),
            ws.log_rho_hat(ts),
            ws.log_rho_bar(ts),
            ws.log_rho_tilde(ts),
        ),
    )
    run.figure(figures.weight_figure, ws, name="weights.png")
    run.figure(figures.psi_figure, psi, name="psi.png")
    lines = [f"lambda: {ws.lam}", f"s: {ws.s}", f"m_margin: {ws.m_margin:.6e}", ""]
    lines += [str(c) for c in ws.checks]
    lines.append("")
    lines += [f"{k}: {v:.6e}" for k, v in ws.fitted_constants().items()]
    run.text("report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_probe(setup: RunSetup, run: _Run, which: str) -> int:
    psi = setup.build_psi()
    ws = setup.build_weights(psi)
    _, coeffs = build_transform(setup.coeff, setup.motion, setup.nl)
    with _timed(run, "probe"):
        if which == "carleman":
            reports = probe_carleman(
                ws,
                coeffs,
                setup.geom,
                setup.grid,
                trials=setup.params.trials,
                rng_seed=setup.params.seed,
                include_vanishing_variant=True,
            )
        else:
            reports = {"observability": probe_observability(
                ws,
                coeffs,
                setup.geom,
                setup.grid,
                trials=setup.params.trials,
                rng_seed=setup.params.seed,
            )}
    for key, rep in reports.items():
        run.csv(f"ratios_{key}.csv", ["trial", "log_ratio"], list(enumerate(rep.log_ratios)))
    run.figure(figures.probe_figure, reports, name="probe.png")
    text = "\n\n".join(rep.to_text() for rep in reports.values()) + "\n"
    run.text("report.txt", text)
    print(text, end="")
    return 0


def _solve_linear(setup: RunSetup, ws, coeffs):
    z0 = parse_shape(setup.params.z0, setup.grid.x)
    prob = ControlProblemLinear(
        z0=z0,
        G=None,
        ws=ws,
        coeffs=coeffs,
        geom=setup.geom,
        grid=setup.grid,
        cg_tol=setup.params.cg_tol,
        cg_max_iter=setup.params.cg_max_iter,
        preconditioner=setup.params.preconditioner,
        epsilon=setup.params.epsilon,
        terminal_tol_factor=setup.params.terminal_tol_factor,
    )
    sol = solve_null_control(prob)
    check_estimate_31(sol, prob)
    check_additional_estimates(sol, prob)
    check_control_regularity(sol, prob)
    return prob, sol


def _cmd_control_linear(setup: RunSetup, run: _Run) -> int:
    psi = setup.build_psi()
    ws = setup.build_weights(psi)
    _, coeffs = build_transform(setup.coeff, setup.motion, setup.nl)
    with _timed(run, "solve"):
        prob, sol = _solve_linear(setup, ws, coeffs)
    d = sol.diagnostics
    run.field("control", sol.h_tilde)
    run.field("state", sol.z)
    run.field("state_resimulated", sol.z_resim)
    run.csv(
        "cg_history.csv",
        ["iteration", "relative_residual"],
        list(enumerate(d["cg_history"])),
    )
    run.figure(figures.field_heatmap, sol.z, name="state.png", title="controlled deviation")
    run.figure(figures.field_heatmap, sol.h_tilde, name="control.png", title="control")
    run.figure(figures.cg_history_figure, d["cg_history"], name="cg_history.png")
    add = d["additional_estimates"]
    reg = d["control_regularity"]
    lines = [
        f"terminal ||z(T)|| / ||z0|| (re-simulated): {d['terminal_ratio']:.6e}",
        f"terminal tolerance: {setup.params.terminal_tol_factor:.1e}",
        f"cg iterations: {d['cg_iters']} (residual {d['cg_residual']:.3e})",
        f"active time levels: {d['active_levels']} of {setup.grid.m}",
        f"control norm: {d['control_norm']:.6e}",
        f"weighted energy / kappa0: {d['estimate_ratio_31']:.6e}",
        f"auxiliary ratios: {add['ratio_37']:.6e} (state), {add['ratio_38']:.6e} (flux)",
        f"regularity identity residual: {reg['identity_residual']:.3e}",
        f"smoothed-control ratio: {reg['ratio']:.6e}",
    ]
    run.text("report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    ok = d["terminal_ratio"] <= setup.params.terminal_tol_factor
    return 0 if ok else 3


def _cmd_control_nonlinear(setup: RunSetup, run: _Run) -> int:
    ws = setup.build_weights()
    prob = ControlProblemNonlinear(
        coeff=setup.coeff,
        motion=setup.motion,
        nl=setup.nl,
        geom=setup.geom,
        grid=setup.grid,
        ws=ws,
        cg_tol=setup.params.cg_tol,
        cg_max_iter=setup.params.cg_max_iter,
        preconditioner=setup.params.preconditioner,
        epsilon=setup.params.epsilon,
    )
    cfg = FixedPointConfig(
        max_outer=setup.params.max_outer,
        tol_fp=setup.params.tol_fp,
        damping=setup.params.damping,
        trajectory_floor=setup.params.trajectory_floor,
    )
    yt0 = parse_shape(setup.params.trajectory0, setup.grid.x)
    z0 = parse_shape(setup.params.z0, setup.grid.x)
    with _timed(run, "solve"):
        sol = solve_trajectory_tracking(yt0 + z0, yt0, cfg, prob)
    run.csv(
        "iterations.csv",
        ["iteration", "change", "control_norm", "terminal_ratio", "cg_iters"],
        [
            (r["iteration"], r["change"], r["control_norm"], r["terminal_ratio"], r["cg_iters"])
            for r in sol.history
        ],
    )
    run.field("deviation", sol.z)
    run.field("control_additive", sol.h_tilde)
    if sol.h_bilinear is not None:
        run.field("control_bilinear", sol.h_bilinear)
    run.field("state_controlled", sol.y)
    run.field("trajectory", sol.ytilde)

    # moving-domain state on the deformed grid
    grid = setup.grid
    with open(run.path("state_physical.csv"), "w", encoding="utf-8") as fh:
        fh.write("t,xbar,u\n")
        for n, t in enumerate(grid.times):
            sl = push_forward_state(sol.y.values[n], setup.motion, t, grid)
            for xb, v in zip(sl.x, sl.values):
                fh.write(f"{t:.17g},{xb:.17g},{v:.17g}\n")

    run.figure(figures.iteration_history_figure, sol.history, name="iterations.png")
    run.figure(figures.field_heatmap, sol.z, name="deviation.png", title="deviation")
    run.figure(figures.field_heatmap, sol.y, name="state.png", title="controlled state")
    z0_norm = sol.diagnostics["z0_norm"]
    lines = [
        f"mode: {sol.mode}",
        f"converged: {sol.converged} in {sol.iterations} outer iterations",
        f"tracking error ||y(T) - ytilde(T)||: {sol.tracking_error:.6e}",
        f"tracking error / ||z0||: {sol.tracking_error / z0_norm if z0_norm else 0.0:.6e}",
        f"control norm: {sol.diagnostics['control_norm']:.6e}",
        f"trajectory window minimum: {sol.diagnostics['trajectory_min_on_window']}",
        f"floor clamped: {sol.diagnostics['floor_clamped']}",
    ]
    run.text("report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if sol.converged else 3


def _sweep_one(setup: RunSetup, combo: dict) -> dict:
    """Run one sweep combination, rebuilt from scratch for thread safety."""
    from degctrl.model import power_law_metadata

    row = dict(combo)
    alpha = combo.get("alpha", setup.coeff.alpha)
    n = int(combo.get("n", setup.grid.n))
    m = int(combo.get("m", setup.grid.m))
    from degctrl.disc import Grid

    grid = Grid(n=n, m=m, horizon=setup.grid.horizon)
    coeff = power_law_metadata(float(alpha), setup.motion, allow_nondegenerate=(alpha == 0))
    sub = RunSetup(
        coeff=coeff,
        motion=setup.motion,
        nl=setup.nl,
        geom=setup.geom,
        grid=grid,
        params=setup.params,
        figures=False,
        config_text=setup.config_text + repr(sorted(combo.items())),
    )
    if "s" in combo or "lambda" in combo:
        from dataclasses import replace

        sub.params = replace(
            setup.params,
            s=float(combo.get("s", setup.params.s)),
            lam=float(combo["lambda"]) if "lambda" in combo else setup.params.lam,
        )
    row["config_hash"] = sub.config_hash
    try:
        ws = sub.build_weights()
        _, coeffs = build_transform(sub.coeff, sub.motion, sub.nl)
        if setup.sweep_task == "control-linear":
            _, sol = _solve_linear(sub, ws, coeffs)
            d = sol.diagnostics
            row.update(
                status="ok",
                cg_iters=d["cg_iters"],
                terminal_ratio=d["terminal_ratio"],
                control_norm=d["control_norm"],
                estimate_ratio_31=d["estimate_ratio_31"],
            )
        elif setup.sweep_task == "probe-observability":
            rep = probe_observability(
                ws, coeffs, sub.geom, grid, trials=sub.params.trials, rng_seed=sub.params.seed
            )
            row.update(status="ok", log_c_emp=rep.log_c_emp, skipped=rep.n_skipped)
        else:
            raise ConfigParse(f"[sweep] task: unsupported {setup.sweep_task!r}")
    except _SOLVER_ERRORS + (ConfigParse, ValueError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _cmd_sweep(setup: RunSetup, run: _Run) -> int:
    import itertools
    from concurrent.futures import ThreadPoolExecutor

    axes = setup.sweep_axes or {}
    names = sorted(axes)
    combos = [dict(zip(names, vals)) for vals in itertools.product(*(axes[k] for k in names))]
    if not combos:
        combos = [{}]
    workers = int(os.environ.get("DEGCTRL_THREADS", "0")) or min(4, os.cpu_count() or 1)
    with _timed(run, "sweep"):
        with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
            rows = list(pool.map(lambda c: _sweep_one(setup, c), combos))
    cols = ["index"] + names + [
        "config_hash",
        "status",
        "cg_iters",
        "terminal_ratio",
        "control_norm",
        "estimate_ratio_31",
        "log_c_emp",
        "skipped",
        "error",
    ]
    table = [
        [i] + [row.get(c, "") for c in cols[1:]]
        for i, row in enumerate(rows)
    ]
    run.csv("sweep.csv", cols, table)
    n_err = sum(1 for r in rows if r.get("status") != "ok")
    summary = f"sweep: {len(rows)} combinations, {n_err} failures, task {setup.sweep_task}\n"
    run.text("report.txt", summary)
    print(summary, end="")
    return 0


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="degctrl",
        description="controls for boundary-degenerate parabolic equations on moving intervals",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="INI problem description")
        sp.add_argument("-o", "--out-dir", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        setup = load_config(args.config)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4

    out = Path(args.out_dir) if args.out_dir else Path("runs") / f"{args.subcommand}-{setup.config_hash}"
    run = _Run(setup, out)
    handlers = {
        "validate": _cmd_validate,
        "forward": _cmd_forward,
        "trajectory": _cmd_trajectory,
        "weights": _cmd_weights,
        "probe-carleman": lambda s, r: _cmd_probe(s, r, "carleman"),
        "probe-observability": lambda s, r: _cmd_probe(s, r, "observability"),
        "control-linear": _cmd_control_linear,
        "control-nonlinear": _cmd_control_nonlinear,
        "sweep": _cmd_sweep,
    }
    try:
        code = handlers[args.subcommand](setup, run)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        run.finish(args.subcommand, "config-error")
        return 4
    except _SOLVER_ERRORS as exc:
        run.text("error.txt", f"{type(exc).__name__}: {exc}\n")
        run.finish(args.subcommand, "solver-error")
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    run.finish(args.subcommand, "ok" if code == 0 else f"exit-{code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
