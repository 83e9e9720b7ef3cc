"""Matplotlib renderings written next to the machine-readable reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "satcross"}  # keep PNG bytes replay-stable


def plot_pretrain_log(log: list[dict], path) -> None:
    """Per-batch loss curves plus per-epoch validation mean recall."""
    batch_rows = [r for r in log if r["batch"] is not None]
    epoch_rows = [r for r in log if r["batch"] is None and r["val_mean_recall"] is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(len(batch_rows))
    ax.plot(steps, [r["loss_img2text"] for r in batch_rows], label="image-text loss")
    ax.plot(steps, [r["loss_seg2text"] for r in batch_rows], label="segment-text loss")
    ax.set_xlabel("training step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper left")
    if epoch_rows:
        ax2 = ax.twinx()
        epochs = [r["epoch"] for r in epoch_rows]
        per_epoch = max(1, len(batch_rows) // max(1, len(epoch_rows)))
        ax2.plot([e * per_epoch for e in epochs],
                 [r["val_mean_recall"] for r in epoch_rows],
                 color="tab:red", marker="o", linestyle="--", label="val MeanR")
        ax2.set_ylabel("validation mean recall")
        ax2.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_finetune_log(log: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in log]
    ax.plot(steps, [r["triplet"] for r in log], label="weighted triplet")
    if any(r["adv_enc"] is not None for r in log):
        ax.plot(steps, [r["adv_enc"] for r in log], label="adversarial (encoder)")
        ax.plot(steps, [r["adv_disc"] for r in log], label="adversarial (discriminator)")
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_ablation(report: dict, path) -> None:
    """Mean MeanR per toggle configuration, with per-seed points."""
    configs = list(report["configs"])
    means = [report["configs"][c]["mean"] for c in configs]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(configs, means, color="tab:blue", alpha=0.8)
    for i, name in enumerate(configs):
        per_seed = report["configs"][name]["per_seed"]
        ax.scatter([i] * len(per_seed), per_seed, color="black", s=12, zorder=3)
    if "direct_mean" in report:
        ax.axhline(report["direct_mean"], color="tab:red", linestyle="--",
                   label="direct transfer")
        ax.legend()
    ax.set_ylabel("target-test mean recall")
    ax.bar_label(bars, fmt="%.1f")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_tag_clusters(projections, labels, tags, explained, path) -> None:
    projections = np.asarray(projections)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 5))
    scatter = ax.scatter(projections[:, 0], projections[:, 1],
                         c=labels, cmap="tab10", s=30)
    for (x, y), tag in zip(projections, tags):
        ax.annotate(tag, (x, y), fontsize=6, alpha=0.7,
                    xytext=(2, 2), textcoords="offset points")
    ax.set_xlabel(f"component 1 ({100 * explained[0]:.0f}% variance)")
    ax.set_ylabel(f"component 2 ({100 * explained[1]:.0f}% variance)")
    fig.colorbar(scatter, ax=ax, label="cluster")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
