"""PNG figures written next to the CSV artifacts."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402


def _save(fig, path):
    with io.atomic_open(path, "wb") as fh:
        fig.savefig(fh, format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_density(est, path, reference=None, xlabel="fast coordinate"):
    """Histogram estimate as a step curve, optionally over a reference density."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.stairs(est.density, est.edges, label="estimate")
    if reference is not None:
        x = np.linspace(est.edges[0], est.edges[-1], 2000)
        ax.plot(x, reference(x), lw=1, label="reference")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    return _save(fig, path)


def plot_samples(points, path, background=None, color=None, labels=("x1", "x2")):
    """Scatter of the first two columns; optional grey background cloud."""
    pts = np.asarray(points)
    fig, ax = plt.subplots(figsize=(5, 4))
    if background is not None:
        bg = np.asarray(background)
        ax.scatter(bg[:, 0], bg[:, 1], s=1, c="0.8", rasterized=True)
    if color is None:
        ax.scatter(pts[:, 0], pts[:, 1], s=2, rasterized=True)
    else:
        sc = ax.scatter(pts[:, 0], pts[:, 1], s=2, c=color, cmap="viridis", rasterized=True)
        fig.colorbar(sc, ax=ax)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    return _save(fig, path)


def plot_convergence(summary, path):
    """Mean L1 error against budget, one line per method, with std error bars."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({m for m, _ in summary}):
        budgets = sorted(b for m, b in summary if m == method)
        mean = [summary[(method, b)]["mean"] for b in budgets]
        std = [summary[(method, b)]["std"] for b in budgets]
        ax.errorbar(budgets, mean, yerr=std, marker="o", capsize=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("force evaluations")
    ax.set_ylabel("L1 error")
    ax.legend()
    return _save(fig, path)


def plot_training(history, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("d_loss", "g_loss"):
        ax.plot(history.get(key, []), label=key)
    ax.set_xlabel("epoch")
    ax.legend()
    return _save(fig, path)


def plot_path(times, path_values, path, reference=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(times, path_values, label="effective ODE")
    if reference is not None:
        ax.plot(reference[0], reference[1], "--", label="ensemble mean")
        ax.legend()
    ax.set_xlabel("t")
    ax.set_ylabel("slow coordinate")
    return _save(fig, path)
