"""Render diagnostic figures next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_KIND_COLORS = {"implication": "tab:red", "equivalence": "tab:blue"}


def plot_delta_statistics(stats, graph, path) -> None:
    """Scatter of relation-difference means (x) against variances (y).

    Well-learned implication pairs sit left of zero, equivalence pairs cluster
    at the origin.
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    for kind in ("implication", "equivalence"):
        xs = [s.mean for s in stats if s.kind == kind]
        ys = [s.variance for s in stats if s.kind == kind]
        if xs:
            ax.scatter(xs, ys, s=24, alpha=0.8, color=_KIND_COLORS[kind], label=kind)
    ax.axvline(0.0, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("mean of relation-row difference")
    ax.set_ylabel("variance of relation-row difference")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_training_trace(trace, path) -> None:
    """Loss curves per epoch with the validation MRR on a second axis."""
    epochs = range(trace.epochs_run)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, trace.data_loss, label="data loss", color="tab:blue")
    if any(trace.penalty_terms):
        ax.plot(epochs, trace.total_loss, label="total loss", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    if trace.validation_epochs:
        twin = ax.twinx()
        twin.plot(trace.validation_epochs, trace.validation_mrr, "o-",
                  color="tab:green", markersize=3, label="valid MRR")
        twin.set_ylabel("filtered MRR")
        twin.legend(loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
