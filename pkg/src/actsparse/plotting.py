"""Figures for the CLI report path. Everything renders off-screen to files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_count_distribution(report, path) -> Path:
    """Histogram of selected-entry counts with the concentration bound marked."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        dev = report.counts - report.k
        ax.hist(dev, bins=min(50, max(5, int(np.ptp(dev)) + 1)), color="C0", alpha=0.8)
        for s in (-1, 1):
            if abs(report.bound) < 4 * max(1, np.abs(dev).max()):
                ax.axvline(s * report.bound, color="C3", ls="--", lw=1)
        ax.set_xlabel("count above threshold - k")
        ax.set_ylabel("trials")
        ax.set_title(f"d={report.d}, k={report.k}, {report.trials} trials, "
                     f"within bound {report.frac_within:.3f}")
        return _save(fig, path)


def plot_fit(report, path) -> Path:
    """Empirical histogram against the fitted Gaussian, with both cutoffs."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        edges = report.hist_edges
        widths = np.diff(edges)
        total = max(1, int(report.hist_counts.sum()))
        dens = report.hist_counts / (total * widths)
        ax.bar(edges[:-1], dens, width=widths, align="edge", color="C0", alpha=0.6,
               label="empirical")
        if not report.degenerate:
            grid = np.linspace(edges[0], edges[-1], 400)
            pdf = np.exp(-0.5 * ((grid - report.mean) / report.std) ** 2) / (
                report.std * math.sqrt(2 * math.pi))
            ax.plot(grid, pdf, color="C1", label="Gaussian fit")
        ax.axvline(report.empirical_cutoff, color="C2", ls="-", label="exact k-th largest")
        ax.axvline(report.fitted_cutoff, color="C3", ls="--", label="fitted threshold")
        ax.set_xlabel("activation value")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_sparsity(report, path) -> Path:
    """FFN nonzero fraction and attended tokens per decode position, one line per layer."""
    rows = report.rows()
    layers = sorted({r["layer"] for r in rows})
    with plt.rc_context(RC):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 3.8))
        for i in layers:
            rs = [r for r in rows if r["layer"] == i]
            pos = [r["position"] for r in rs]
            a0.plot(pos, [100 * r["ffn_nonzero_frac"] for r in rs], lw=1, label=f"layer {i}")
            a1.plot(pos, [r["attended_mean"] for r in rs], lw=1, label=f"layer {i}")
        a0.set_xlabel("position")
        a0.set_ylabel("FFN nonzeros (%)")
        a1.set_xlabel("position")
        a1.set_ylabel("attended tokens (head mean)")
        a0.legend(fontsize=8)
        return _save(fig, path)


def plot_bench(report, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        kernels = ["masked_matvec", "sparse_vecmat"]
        x = np.arange(len(kernels))
        for j, p in enumerate(("dense", "sparse")):
            t = [next(r.median_s for r in report.rows if r.kernel == kk and r.path == p)
                 for kk in kernels]
            ax.bar(x + (j - 0.5) * 0.38, [1e3 * v for v in t], width=0.38, label=p)
        ax.set_xticks(x, kernels)
        ax.set_ylabel("median wall time (ms)")
        ax.legend()
        return _save(fig, path)


def plot_flops(standard, spark, path) -> Path:
    """Stacked per-component FLOPs for the dense and sparse layer."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        names = ["ffn", "attn_dot", "attn_proj"]
        bottom = np.zeros(2)
        for n in names:
            vals = np.array([getattr(standard, n), getattr(spark, n)], dtype=float) / 1e6
            ax.bar(["standard", "sparse"], vals, bottom=bottom, label=n)
            bottom += vals
        ax.set_ylabel("MFLOPs per token per layer")
        ax.legend()
        return _save(fig, path)
