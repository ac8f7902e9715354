"""Figures for the ``analyze`` report.  Everything renders to files (Agg)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

rc = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def angular_histograms(panels, path):
    """Polar angle histograms, one column per labelled feature set and one row
    per projection plane.

    ``panels`` maps a label to an ``(n_planes, n_bins)`` count array.  Radii
    are scaled so every curve encloses the same area (proportional to n).
    """
    labels = list(panels)
    n_planes = next(iter(panels.values())).shape[0]
    with plt.rc_context(rc):
        fig, axes = plt.subplots(n_planes, len(labels), subplot_kw={"projection": "polar"},
                                 figsize=(2.2 * len(labels), 2.2 * n_planes), squeeze=False)
        for j, label in enumerate(labels):
            counts = np.asarray(panels[label], dtype=float)
            n_bins = counts.shape[1]
            theta = np.linspace(-np.pi, np.pi, n_bins + 1)
            for i in range(n_planes):
                ax = axes[i][j]
                # area of a bin sector ~ r^2, so r ~ sqrt(count)
                radius = np.sqrt(counts[i] / counts[i].sum() * n_bins)
                ax.fill(np.append(theta[:-1] + np.pi / n_bins, theta[0] + np.pi / n_bins),
                        np.append(radius, radius[0]), alpha=0.5)
                ax.set_yticklabels([])
                ax.set_xticklabels([])
                if i == 0:
                    ax.set_title(label)
        _save(fig, path)


def distance_histograms(panels, path, bins=50):
    """NN-1 vs NN-k distance histograms, one panel per labelled feature set.

    ``panels`` maps a label to a :class:`~catalyzer.searcheval.UniformityStats`.
    """
    with plt.rc_context(rc):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.4), squeeze=False)
        for ax, (label, stats) in zip(axes[0], panels.items()):
            edges, h1, hk = stats.histograms(bins)
            ax.stairs(h1, edges, fill=True, alpha=0.5, label="1st NN")
            ax.stairs(hk, edges, fill=True, alpha=0.5, label=f"{stats.k_far}-th NN")
            ax.set_title(f"{label}: overlap {100 * stats.probability:.1f}%")
            ax.set_xlabel("distance")
            ax.legend(frameon=False)
        axes[0][0].set_ylabel("count")
        _save(fig, path)


def epsilon_curves(curves, path):
    """Mean range-search result count vs recall of the true nearest neighbor."""
    with plt.rc_context(rc):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        for label, curve in curves.items():
            ax.plot(np.maximum(curve.mean_results, 1e-1), curve.recall, marker=".", label=label)
        ax.set_xscale("log")
        ax.set_xlabel("mean results per query")
        ax.set_ylabel("NN recall")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3, linewidth=0.5)
        ax.legend(frameon=False)
        _save(fig, path)
