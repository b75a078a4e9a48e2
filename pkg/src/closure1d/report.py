"""Matplotlib figure rendering for the CLI report paths.

Every plotting helper writes a PNG next to the delimited output it
illustrates and returns the path. The Agg backend is forced so the
functions work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_snapshots",
    "plot_losses",
    "plot_coefficients",
    "plot_method_comparison",
    "plot_rollout_rmse",
    "plot_gradcheck",
]


def plot_snapshots(path, x, times, fields, n_curves=5, title=None):
    """A few field snapshots (state 0) over the run."""
    idx = np.unique(np.linspace(0, len(times) - 1, n_curves).astype(int))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i in idx:
        ax.plot(x, np.atleast_2d(fields[i])[0], label=f"t={times[i]:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(path, rows):
    """Train and validation loss curves per epoch (semilog)."""
    scns = sorted({r["scenario"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in scns:
        sub = [r for r in rows if r["scenario"] == name]
        ep = [r["epoch"] for r in sub]
        label = f" [{name}]" if len(scns) > 1 else ""
        ax.semilogy(ep, [max(r["train_loss"], 1e-300) for r in sub],
                    label="train" + label)
        vals = [r["val_loss"] for r in sub]
        if np.all(np.isfinite(vals)):
            ax.semilogy(ep, [max(v, 1e-300) for v in vals],
                        "--", label="val" + label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_coefficients(path, coeff_csv):
    """Bar chart of learned library coefficients, pruned bars hatched."""
    names, vals, pruned = [], [], []
    with open(coeff_csv) as fh:
        next(fh)
        for line in fh:
            term, c, p = line.strip().split(",")
            names.append(term)
            vals.append(float(c))
            pruned.append(bool(int(p)))
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(names)), 4))
    colors = ["lightgray" if p else "steelblue" for p in pruned]
    ax.bar(range(len(names)), vals, color=colors,
           hatch=["//" if p else "" for p in pruned])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("coefficient")
    ax.axhline(0.0, color="k", lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_method_comparison(path, series):
    """Per-snapshot rollout RMSE curves keyed by (scenario, window, method)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for (scn, window, method), (t, r) in sorted(series.items()):
        finite = np.isfinite(r)
        ax.semilogy(np.asarray(t)[finite], np.asarray(r)[finite],
                    label=f"{scn}/{window}/{method}")
    ax.set_xlabel("t")
    ax.set_ylabel("rollout RMSE")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rollout_rmse(path, rows):
    """rows: [scenario, window, method, t, rmse]."""
    fig, ax = plt.subplots(figsize=(7, 4))
    scns = sorted({r[0] for r in rows})
    for name in scns:
        sub = [r for r in rows if r[0] == name]
        t = np.array([r[3] for r in sub])
        v = np.array([r[4] for r in sub])
        finite = np.isfinite(v)
        ax.semilogy(t[finite], v[finite], marker=".", label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_gradcheck(path, rows):
    """Adjoint vs finite-difference gradient scatter with rel-error panel."""
    adj = np.array([r[1] for r in rows])
    fd = np.array([r[2] for r in rows])
    rel = np.array([r[3] for r in rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(fd, adj, "o", ms=3)
    lim = max(1e-300, np.max(np.abs(np.concatenate([adj, fd]))))
    ax1.plot([-lim, lim], [-lim, lim], "k--", lw=0.5)
    ax1.set_xlabel("finite difference")
    ax1.set_ylabel("adjoint")
    ax2.semilogy(np.maximum(rel, 1e-300), ".")
    ax2.set_xlabel("parameter id")
    ax2.set_ylabel("relative error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
