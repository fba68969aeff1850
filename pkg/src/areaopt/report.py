"""Figure rendering for the report commands.

Every report command writes its delimited data first and then renders a
matching PNG next to it; figures are plain matplotlib line charts with no
interactivity.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _style(ax, xlabel, ylabel, title=None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)


def convergence_figure(series: dict[str, np.ndarray], path) -> None:
    """One monitor-value line per moment-source series (mean over seeds)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, values in series.items():
        iters = np.arange(len(values))
        style = {"linewidth": 2.2, "color": "black"} if label == "exact" else {}
        ax.plot(iters, values, marker="o", markersize=3, label=label, **style)
    _style(ax, "iteration", "entropy-regularized expected reward",
           "Convergence vs. moment sample size")
    ax.legend(title="moments")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def comparison_figure(rows: list[dict], path) -> None:
    """Reward and machine-entropy curves for each method with CI bands."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4.0))
    methods = sorted({r["method"] for r in rows})
    for method in methods:
        sub = sorted((r for r in rows if r["method"] == method),
                     key=lambda r: r["samples_observed"])
        x = np.array([r["samples_observed"] for r in sub])
        reward = np.array([r["avg_reward"] for r in sub])
        lo = np.array([r["ci90_low"] for r in sub])
        hi = np.array([r["ci90_high"] for r in sub])
        entropy = np.array([r["entropy"] for r in sub])
        line, = ax1.plot(x, reward, label=method)
        ax1.fill_between(x, lo, hi, alpha=0.2, color=line.get_color())
        ax2.plot(x, entropy, label=method)
    _style(ax1, "samples observed", "average reward", "Reward")
    _style(ax2, "samples observed", "machine causal entropy (nats)", "Entropy")
    ax1.legend()
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def scaling_figure(rows: list[dict], path) -> None:
    """Update timings (log-log) and model storage against the horizon."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4.0))
    x = np.array([r["T"] for r in rows])
    for key, label in (("dual_update_ms", "estimation update"),
                       ("machine_opt_ms", "machine optimization")):
        ax1.loglog(x, [r[key] for r in rows], marker="o", label=label)
    _style(ax1, "horizon T", "time per update (ms)", "Update time")
    ax1.legend()
    ax2.plot(x, [r["peak_model_entries"] for r in rows], marker="o")
    _style(ax2, "horizon T", "stored model entries", "Model storage")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
