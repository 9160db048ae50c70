"""Matplotlib figures written alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# strip the Software text chunk so reruns are byte-identical
_PNG_META = {"Software": None}


def save_loss_curves(rows: list[dict], path) -> None:
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss_total"] for r in rows], label="total", lw=1.2)
    ax.plot(steps, [r["loss_n"] for r in rows], label="noise", lw=0.9)
    ax.plot(steps, [r["loss_rgb"] for r in rows], label="rgb", lw=0.9)
    ax.set_xlabel("train step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_eval_figure(rows: list[dict], mean_dice: float, mean_iou: float, path) -> None:
    ids = [r["id"] for r in rows]
    x = range(len(ids))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(ids)), 4))
    ax.bar([i - 0.2 for i in x], [r["dice"] for r in rows], width=0.4, label="dice")
    ax.bar([i + 0.2 for i in x], [r["iou"] for r in rows], width=0.4, label="iou")
    ax.axhline(mean_dice, color="C0", ls="--", lw=0.8)
    ax.axhline(mean_iou, color="C1", ls="--", lw=0.8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(ids, rotation=90, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"mean dice {mean_dice:.4f}  mean iou {mean_iou:.4f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
