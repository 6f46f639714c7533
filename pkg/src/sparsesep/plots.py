"""Matplotlib figures rendered next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_bucket_figure(report, path):
    """Grouped bars of SDRi / SI-SNRi per overlap bucket."""
    rows = [r for r in report.rows if r.n > 0]
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        xs = range(len(rows))
        width = 0.38
        ax.bar([x - width / 2 for x in xs], [r.sdri_mean for r in rows],
               width, label="SDRi (energy-ratio)")
        ax.bar([x + width / 2 for x in xs], [r.sisnri_mean for r in rows],
               width, label="SI-SNRi")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"{r.bucket:.0%}" for r in rows])
    ax.set_xlabel("Overlap ratio bucket")
    ax.set_ylabel("Improvement (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rtf_figure(rows, path):
    """RTF and SDRi against the VAD tap position k."""
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ks = [r.k for r in rows]
    ax1.plot(ks, [r.rtf for r in rows], "o-", color="tab:blue", label="RTF")
    ax1.set_xlabel("VAD branch after k-th TCN stack")
    ax1.set_ylabel("Real-time factor", color="tab:blue")
    ax1.set_xticks(ks)
    ax2 = ax1.twinx()
    ax2.plot(ks, [r.sdri_mean for r in rows], "s--", color="tab:orange", label="SDRi")
    ax2.set_ylabel("SDRi (dB)", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(stats, path):
    fig, ax1 = plt.subplots(figsize=(6, 4))
    epochs = [s.epoch for s in stats]
    ax1.plot(epochs, [s.train_loss for s in stats], label="train loss")
    ax1.plot(epochs, [s.val_loss for s in stats], label="val loss")
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Loss")
    ax1.legend(loc="upper right")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [s.lr for s in stats], ":", color="gray", label="lr")
    ax2.set_ylabel("Learning rate", color="gray")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
