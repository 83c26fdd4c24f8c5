"""Figure rendering for the CLI report paths. Every figure is written next
to its delimited (CSV) counterpart."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(path, curve) -> None:
    steps = [row[0] for row in curve]
    losses = [row[1] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.0, label="nll")
    if len(curve[0]) > 2:
        ax.plot(steps, [row[2] for row in curve], lw=1.0, label="moe aux")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap(path, mat: np.ndarray, pt_values) -> None:
    fig, ax = plt.subplots(figsize=(7, 5))
    im = ax.imshow(mat, aspect="auto", cmap="viridis")
    ax.set_xlabel("semantic level-1 code")
    ax.set_ylabel("product type")
    if len(pt_values) <= 30:
        ax.set_yticks(range(len(pt_values)))
        ax.set_yticklabels(pt_values, fontsize=6)
    fig.colorbar(im, ax=ax, label="item count")
    ax.set_title("product type vs level-1 code co-occurrence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep(path, axis_name: str, rows: list[dict], metric_keys) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r[axis_name] for r in rows]
    for key in metric_keys:
        ax.plot(xs, [r[key] for r in rows], marker="o", label=key)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("metric (%)")
    ax.legend()
    ax.set_title(f"sweep over {axis_name}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cost_figure(path, rows: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(rows))
    width = 0.38
    ax.bar(xs - width / 2, [r["full_attention"] for r in rows], width,
           label="full attention")
    ax.bar(xs + width / 2, [r["jsa_attention"] for r in rows], width,
           label="sparse attention")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(r["item_seq_len"]) for r in rows])
    ax.set_xlabel("item sequence length")
    ax.set_ylabel("attended query-key pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
