"""Matplotlib renderings written alongside the delimited outputs.

Training drops ``losses.png`` next to ``losses.tsv``; evaluation drops
``report.png`` next to ``report.json``/``report.txt``. Rendering is
headless (Agg) and file-only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_loss_curve(records, path):
    """Training loss and validation SER per epoch."""
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r.train_loss for r in records], color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean CTC loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_ser for r in records], color="tab:red", label="val SER")
    ax2.set_ylabel("validation SER (%)", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    ax2.set_ylim(bottom=0)
    ax.set_title("training curve")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(report, path):
    """Per-sample edit counts with the aggregate SER/ER cell in the title."""
    edits = [r.edit_ops for r in report.records]
    fig, ax = plt.subplots(figsize=(7, 4))
    upper = max(edits + [1])
    ax.hist(edits, bins=range(0, upper + 2), color="tab:purple", rwidth=0.9, align="left")
    ax.set_xlabel("edit operations per sequence")
    ax.set_ylabel("sequences")
    ax.set_title(f"SER/ER = {report.cell}   ({len(report.records)} samples)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
