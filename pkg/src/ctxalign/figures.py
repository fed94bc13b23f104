"""Figure rendering for the report paths: a class-colored scatter of the 2-D
embedding projection and a grouped bar chart for the comparison harness.

Figures are written next to the delimited outputs; the CSVs stay the
authoritative artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_projection(coords, class_ids, path, title="2-D embedding projection"):
    fig, ax = plt.subplots(figsize=(6, 5))
    scatter = ax.scatter(coords[:, 0], coords[:, 1], c=class_ids,
                         cmap="tab10", s=18, alpha=0.85)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title)
    fig.colorbar(scatter, ax=ax, label="class")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_comparison(metrics, path, labels=("alpha=0", "alpha=0.5")):
    """metrics: list of (name, value_a, value_b) rows."""
    names = [m[0] for m in metrics]
    a = [m[1] for m in metrics]
    b = [m[2] for m in metrics]
    x = range(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - width / 2 for i in x], a, width, label=labels[0])
    ax.bar([i + width / 2 for i in x], b, width, label=labels[1])
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("metric value")
    ax.set_title("contrastive-only vs contrastive + contextual")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_loss_curves(history, path):
    """history rows: (epoch, total, contrastive, contextual)."""
    epochs = [row[0] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row[1] for row in history], label="total")
    ax.plot(epochs, [row[2] for row in history], label="contrastive")
    ax.plot(epochs, [row[3] for row in history], label="contextual")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
