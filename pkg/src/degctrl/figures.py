"""Matplotlib rendering of run artifacts to image files.

Every CLI report path writes its figures next to the delimited output; all
functions return the written path so the manifest can reference it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from degctrl.carleman import ProbeReport, PsiFunction, WeightSystem
from degctrl.disc import StateField

__all__ = [
    "cg_history_figure",
    "field_heatmap",
    "iteration_history_figure",
    "probe_figure",
    "psi_figure",
    "slice_comparison_figure",
    "weight_figure",
]

_DPI = 140


def _save(fig, path, dpi):
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return str(path)


def weight_figure(ws: WeightSystem, path, dpi: int = _DPI) -> str:
    ts = np.linspace(0.0, ws.T, 801)[1:-1]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.5, 3.6), constrained_layout=True)
    ax0.plot(ts, ws.A_star(ts), label=r"$A^*$")
    ax0.plot(ts, ws.A_hat(ts), label=r"$\hat A$", ls="--")
    ax0.set_yscale("symlog")
    ax0.set_xlabel("t")
    ax0.set_title("time envelopes")
    ax0.legend()
    for name, fn in [
        ("rho0", ws.log_rho0),
        ("rho1", ws.log_rho1),
        ("rho2", ws.log_rho2),
        ("rho_hat", ws.log_rho_hat),
        ("rho_bar", ws.log_rho_bar),
    ]:
        ax1.plot(ts, fn(ts) / np.log(10.0), label=name)
    ax1.set_xlabel("t")
    ax1.set_ylabel(r"$\log_{10}$ weight")
    ax1.set_title("weight family")
    ax1.legend(fontsize=8)
    return _save(fig, path, dpi)


def psi_figure(psi: PsiFunction, path, dpi: int = _DPI) -> str:
    xs = np.linspace(0.0, 1.0, 801)
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    ax.plot(xs, psi(xs))
    for v in (psi.alpha_prime, psi.beta_prime):
        ax.axvline(v, color="k", lw=0.6, ls=":")
    ax.set_xlabel("x")
    ax.set_ylabel(r"$\Psi$")
    ax.set_title("weight landscape")
    return _save(fig, path, dpi)


def field_heatmap(field: StateField, path, title: str = "", dpi: int = _DPI) -> str:
    grid = field.grid
    fig, ax = plt.subplots(figsize=(5.6, 3.6), constrained_layout=True)
    data = field.full()
    pc = ax.pcolormesh(grid.x_full, grid.times, data, shading="nearest", cmap="RdBu_r")
    fig.colorbar(pc, ax=ax)
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    return _save(fig, path, dpi)


def slice_comparison_figure(grid, slices: dict, path, title: str = "", dpi: int = _DPI) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    for label, values in slices.items():
        ax.plot(grid.x, values, label=label)
    ax.set_xlabel("x")
    ax.legend()
    ax.set_title(title)
    return _save(fig, path, dpi)


def cg_history_figure(history: np.ndarray, path, dpi: int = _DPI) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.4), constrained_layout=True)
    ax.semilogy(np.arange(len(history)), history)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    ax.set_title("conjugate gradient history")
    return _save(fig, path, dpi)


def iteration_history_figure(history: list[dict], path, dpi: int = _DPI) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.4), constrained_layout=True)
    its = [row["iteration"] for row in history]
    changes = [row["change"] for row in history]
    finite = [(i, c) for i, c in zip(its, changes) if np.isfinite(c)]
    if finite:
        ax.semilogy([i for i, _ in finite], [c for _, c in finite], marker="o")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("relative change")
    ax.set_title("fixed-point history")
    return _save(fig, path, dpi)


def probe_figure(reports: dict[str, ProbeReport], path, dpi: int = _DPI) -> str:
    fig, ax = plt.subplots(figsize=(5.4, 3.4), constrained_layout=True)
    for name, rep in reports.items():
        if rep.log_ratios.size:
            ax.hist(rep.log_ratios / np.log(10.0), bins=20, alpha=0.6, label=name)
    ax.set_xlabel(r"$\log_{10}$ (left side / right side)")
    ax.set_ylabel("trials")
    ax.legend(fontsize=8)
    ax.set_title("empirical inequality ratios")
    return _save(fig, path, dpi)
