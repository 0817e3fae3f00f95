"""
Figures for the command-line reports, rendered to files with the Agg
backend. Every function takes the same arrays that are written to the
delimited output, so a figure never shows anything the tables do not hold.
"""
from __future__ import annotations

from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _triangle(ax, rows: np.ndarray, label: str, vmin=None, vmax=None):
    """Color a quantity over the ordered simplex, drawn in (w1, w2)."""
    w1, w2, z = rows[:, 0], rows[:, 1], rows[:, -1]
    if len(rows) >= 3 and np.ptp(w1) > 0 and np.ptp(w2) > 0:
        tri = mtri.Triangulation(w1, w2)
        art = ax.tripcolor(tri, z, shading="gouraud", cmap="viridis", vmin=vmin, vmax=vmax)
    else:
        art = ax.scatter(w1, w2, c=z, cmap="viridis", vmin=vmin, vmax=vmax)
    ax.set_xlabel("w1")
    ax.set_ylabel("w2")
    ax.figure.colorbar(art, ax=ax, label=label)
    return art


def plot_entropy_map(rows: np.ndarray, path) -> None:
    """rows: (w1, w2, w3, entropy_bits)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    _triangle(ax, rows, "entropy of M given w [bits]")
    ax.set_title("strain-matrix entropy")
    _save(fig, path)


def plot_error_maps(maps: Dict[float, np.ndarray], path) -> None:
    """One panel per noise level; rows (w1, w2, w3, e) on a shared scale."""
    vmax = max(float(r[:, -1].max()) for r in maps.values())
    fig, axes = plt.subplots(1, len(maps), figsize=(5 * len(maps), 4), squeeze=False)
    for ax, (gamma, rows) in zip(axes[0], sorted(maps.items(), reverse=True)):
        _triangle(ax, rows, "reconstruction error", 0.0, vmax)
        ax.set_title(f"gamma = {gamma:g}")
    _save(fig, path)


def plot_sorted_errors(curves: Dict[str, np.ndarray], baseline: float, title: str, path) -> None:
    """Sorted error curves keyed by label, with the random-pair baseline."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, errs in curves.items():
        ax.plot(np.arange(1, len(errs) + 1), np.sort(errs), label=label)
    ax.axhline(baseline, color="gray", linestyle="--", label="random pairs")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("sample (sorted)")
    ax.set_ylabel("reconstruction error")
    ax.set_title(title)
    ax.legend(fontsize="small")
    _save(fig, path)


def plot_posterior(M_mean, M_std, w_mean, w_std, path) -> None:
    """Heatmaps of the conditional mean and std of M and bars for w."""
    M_mean, M_std = np.asarray(M_mean), np.asarray(M_std)
    n = M_mean.shape[1]
    fig, axes = plt.subplots(1, 3, figsize=(11, 4), gridspec_kw={"width_ratios": [1, 1, 1.2]})
    for ax, A, name in ((axes[0], M_mean, "E[M | d]"), (axes[1], M_std, "std[M | d]")):
        im = ax.imshow(A, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0 if name.startswith("E") else 0.5)
        ax.set_xticks(range(n), [f"s{j + 1}" for j in range(n)])
        ax.set_ylabel("row")
        ax.set_title(name)
        fig.colorbar(im, ax=ax)
    axes[2].bar(range(n), w_mean, yerr=w_std, capsize=4)
    axes[2].set_xticks(range(n), [f"s{j + 1}" for j in range(n)])
    axes[2].set_ylim(0.0, 1.0)
    axes[2].set_title("E[w | d] +- std")
    _save(fig, path)


def plot_moi(discrepancies, bound: float, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ns = np.arange(1, len(discrepancies) + 1)
    ax.semilogy(ns, np.maximum(discrepancies, 1e-300), "o-", label="||M w - d||^2")
    ax.axhline(bound, color="gray", linestyle="--", label="sum of noise variances")
    ax.set_xticks(ns)
    ax.set_xlabel("number of strains n")
    ax.legend(fontsize="small")
    _save(fig, path)
