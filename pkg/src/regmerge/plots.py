"""Matplotlib figure rendering for the CLI report path.

Core merge/matching modules stay plot-free; the CLI calls these helpers to
drop PNG figures next to the JSON/CSV output of each experiment.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_method_bars(report, path) -> None:
    """Bar chart of macro-average score per method (in-domain and OOD)."""
    methods = list(report.macro_average)
    in_vals = [report.macro_average[m] for m in methods]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    pos = np.arange(len(methods))
    width = 0.38 if report.ood_macro_average else 0.7
    ax.bar(pos, in_vals, width, label="in-domain")
    if report.ood_macro_average:
        ood_vals = [report.ood_macro_average.get(m, np.nan) for m in methods]
        ax.bar(pos + width, ood_vals, width, label="OOD")
    ax.set_xticks(pos + (width / 2 if report.ood_macro_average else 0))
    ax.set_xticklabels(methods, rotation=30, ha="right")
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_pairwise_heatmaps(report, path) -> None:
    methods = list(report.pairwise_drop.get("methods", {}))
    if not methods:
        return
    fig, axes = plt.subplots(1, len(methods), figsize=(3.2 * len(methods), 3),
                             squeeze=False)
    for ax, name in zip(axes[0], methods):
        mat = np.array(report.pairwise_drop["methods"][name], dtype=np.float64)
        im = ax.imshow(mat, cmap="RdYlGn")
        ax.set_title(f"{name} (mean {report.pairwise_drop['mean_offdiag'][name]:+.3f})",
                     fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_curve(report, path, x_key) -> None:
    rows = report.tables
    if not rows:
        return
    xs = [r[x_key] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [r["in_domain"] for r in rows], marker="o", label="in-domain")
    if not all(np.isnan(r.get("ood", np.nan)) for r in rows):
        ax.plot(xs, [r["ood"] for r in rows], marker="s", label="OOD")
    if x_key == "max_batches":
        ax.set_xscale("log")
    ax.set_xlabel(x_key)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_greedy_curve(report, path) -> None:
    steps = report.greedy
    if not steps:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = np.arange(len(steps))
    ys = [s["metric"] for s in steps]
    accepted = [s["accepted"] for s in steps]
    ax.plot(xs, ys, color="gray", lw=0.8)
    ax.scatter(xs[[i for i, a in enumerate(accepted) if a]],
               [y for y, a in zip(ys, accepted) if a], color="tab:green",
               label="accepted", zorder=3)
    if not all(accepted):
        ax.scatter(xs[[i for i, a in enumerate(accepted) if not a]],
                   [y for y, a in zip(ys, accepted) if not a], color="tab:red",
                   label="rejected", zorder=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([s["candidate"] for s in steps])
    ax.set_xlabel("candidate")
    ax.set_ylabel("validation score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_matching_heatmaps(grids: dict, path) -> None:
    """Heatmaps of ground-metric / activation-similarity matrices."""
    if not grids:
        return
    names = list(grids)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3),
                             squeeze=False)
    for ax, name in zip(axes[0], names):
        im = ax.imshow(np.asarray(grids[name], dtype=np.float64), cmap="viridis")
        ax.set_title(name, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
