"""Matplotlib figure rendering for the analyze report path."""
from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def plot_magnitude_profile(rows, path):
    """Chosen/unchosen/baseline mean |w| per prunable layer."""
    layers = [str(r.layer) for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(layers, [r.chosen_mean for r in rows], "o-", label="chosen")
    ax.plot(layers, [r.unchosen_mean for r in rows], "s-", label="unchosen")
    ax.plot(layers, [r.baseline_mean for r in rows], "^--", label="baseline")
    ax.set_xlabel("layer id")
    ax.set_ylabel("mean |w|")
    ax.set_title("parameter magnitude by layer")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pool_trajectory(rounds, sse, sizes, path):
    fig, ax1 = plt.subplots(figsize=(8, 4))
    ax1.plot(rounds, sse, "o-", color="tab:blue", label="pool SSE")
    ax1.set_xlabel("refine round (iteration)")
    ax1.set_ylabel("mean SSE to centroid", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(rounds, sizes, "s--", color="tab:orange", label="pool size")
    ax2.set_ylabel("pool size", color="tab:orange")
    ax1.set_title("architecture pool trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(log_rows, path):
    t = [r["t"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    for key in ("L_CE", "L_STS", "L_SME", "L_total"):
        ax.plot(t, [r[key] for r in log_rows], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title("training losses")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
