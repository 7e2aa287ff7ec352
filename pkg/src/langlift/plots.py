"""Figure rendering for report outputs.

Every CLI report path that writes delimited data also renders a figure
next to it: win-matrix stacked bars, training loss curves, and the
tokenizer fertility summary.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .preference import WinMatrix
from .tokenizer import FertilityStats


def plot_win_matrix(matrix: WinMatrix, path: str) -> None:
    rows = matrix.as_dict()["pairs"]
    labels = [f"{r['model_a']} vs {r['model_b']}" for r in rows]
    a_wins = [r["a_wins"] for r in rows]
    ties = [r["ties"] for r in rows]
    b_wins = [r["b_wins"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, max(2, 0.6 * len(rows) + 1.5)))
    y = range(len(rows))
    ax.barh(y, a_wins, color="#2b83ba", label="left model wins")
    ax.barh(y, ties, left=a_wins, color="#bdbdbd", label="tie")
    ax.barh(y, b_wins, left=[a + t for a, t in zip(a_wins, ties)], color="#d7191c", label="right model wins")
    ax.set_yticks(list(y))
    ax.set_yticklabels(labels)
    ax.set_xlabel("judgments")
    ax.set_title("pairwise preference outcomes")
    if rows:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(metrics_csv: str, path: str) -> None:
    steps, losses = [], []
    stage = ""
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            stage = row["stage"]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.set_title(f"{stage} loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fertility(stats: FertilityStats, path: str, label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = ["tokens / char", "byte-token fraction"]
    values = [stats.tokens_per_char, stats.byte_token_fraction]
    ax.bar(names, values, color=["#2b83ba", "#fdae61"])
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=9)
    title = "tokenization quality" + (f" ({label})" if label else "")
    ax.set_title(f"{title}\n({stats.byte_dup_chars} chars share byte tokens)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
