"""Matplotlib renderings of run reports, written straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def training_curves(epoch_records, path) -> None:
    """Loss terms and learning rate over epochs, one PNG."""
    epochs = [r["epoch"] for r in epoch_records]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    for key, style in (("L", "-"), ("L_ttc", "--"), ("L_avc", "--"),
                       ("L_intra", ":")):
        ax_loss.plot(epochs, [r[key] for r in epoch_records], style,
                     label=key)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.grid(alpha=0.3)
    ax_lr.plot(epochs, [r["lr"] for r in epoch_records], color="tab:gray")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("epoch")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bars(per_preset: dict, path) -> None:
    """Grouped bars of both retrieval directions per ablation preset."""
    letters = list(per_preset)
    a2i = [per_preset[k]["report"]["a2i"]["mAP"] for k in letters]
    i2a = [per_preset[k]["report"]["i2a"]["mAP"] for k in letters]
    x = range(len(letters))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar([i - 0.2 for i in x], a2i, width=0.4, label="audio->image mAP")
    ax.bar([i + 0.2 for i in x], i2a, width=0.4, label="image->audio mAP")
    ax.set_xticks(list(x))
    ax.set_xticklabels(letters)
    ax.set_xlabel("preset")
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def noise_curve(points, path) -> None:
    """Mean retrieval mAP as a function of the completion-noise variance."""
    sigmas = [p["sigma2"] for p in points]
    maps = [p["mean_map"] for p in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(sigmas)), maps, "o-")
    ax.set_xticks(range(len(sigmas)))
    ax.set_xticklabels([f"{s:g}" for s in sigmas])
    ax.set_xlabel("noise variance")
    ax.set_ylabel("mean mAP (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
