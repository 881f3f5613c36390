"""Figure rendering for the CLI report paths.

Every plot lands next to the machine-readable output it illustrates; the
delimited files stay the source of truth and none of the figures feed back
into any computation.
"""

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def plot_training_history(report, path):
    """Train/validation NLL per epoch with the restored best epoch marked."""
    train = list(report["train_nll"] if isinstance(report, dict) else report.train_nll)
    val = list(report["val_nll"] if isinstance(report, dict) else report.val_nll)
    best = report["best_epoch"] if isinstance(report, dict) else report.best_epoch
    epochs = np.arange(1, len(train) + 1)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(epochs, train, label="train", color="#1f77b4")
    ax.plot(epochs, val, label="validation", color="#d62728")
    if 1 <= best <= len(val):
        ax.axvline(best, color="#555555", linewidth=0.8, linestyle="--")
        ax.scatter([best], [val[best - 1]], color="#d62728", zorder=3, s=18)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_density_curve(rows, path, dim=0):
    """One-dimensional density sweep; null densities break the line."""
    v = np.array([r[0] for r in rows], dtype=np.float64)
    density = np.array(
        [np.nan if r[1] is None else r[1] for r in rows], dtype=np.float64
    )
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(v, density, color="#1f77b4")
    ax.set_xlabel(f"label dimension {dim}")
    ax.set_ylabel("density")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_experiment_summary(summary, path):
    """Grouped bars: mean test NLL per personalization, one bar per family."""
    groups = sorted({e["personalization"] for e in summary})
    flows = sorted({e["flow"] for e in summary})
    cell = {(e["personalization"], e["flow"]): e for e in summary}
    width = 0.8 / max(len(flows), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(groups), 3.8))
    for j, flow in enumerate(flows):
        xs, means, stds, bests = [], [], [], []
        for i, group in enumerate(groups):
            entry = cell.get((group, flow))
            if entry is None:
                continue
            xs.append(i + (j - (len(flows) - 1) / 2.0) * width)
            means.append(entry["mean_test_nll"])
            stds.append(entry["std_test_nll"])
            bests.append(entry["best"])
        if not xs:
            continue
        bars = ax.bar(xs, means, width=width * 0.9, yerr=stds, capsize=2, label=flow)
        for bar, is_best in zip(bars, bests):
            if is_best:
                ax.annotate(
                    "*",
                    (bar.get_x() + bar.get_width() / 2.0, bar.get_height()),
                    ha="center", va="bottom", fontsize=12,
                )
    ax.set_xticks(np.arange(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylabel("mean test NLL")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
