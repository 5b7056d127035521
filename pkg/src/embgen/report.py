"""Figure rendering for training, k-scan, and similarity reports.

Every report path writes its figure next to the structured output. PNG
metadata is pinned so identical runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evalkit import ROW_ORDER, SimilarityReport  # noqa: E402
from .gmm import KScanReport  # noqa: E402
from .trainer import TrainReport  # noqa: E402

_PNG_METADATA = {"Software": "embgen"}


def save_loss_curves(report: TrainReport, path: str | Path) -> Path:
    """Total loss and reconstruction log-likelihood per epoch, beta on a twin axis."""
    path = Path(path)
    epochs = [r.epoch for r in report.epochs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r.total_loss for r in report.epochs], label="total loss", color="tab:blue")
    ax.plot(epochs, [-r.recon_loglik for r in report.epochs],
            label="-recon log-lik", color="tab:orange")
    ax.plot(epochs, [sum(r.kl_per_group) for r in report.epochs],
            label="KL (sum over groups)", color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("nats")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.beta for r in report.epochs], label="beta",
             color="tab:red", linestyle="--", linewidth=1)
    ax2.set_ylabel("beta")
    ax2.set_ylim(-0.05, 1.05)
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, loc="upper right", fontsize=8)
    ax.set_title("training telemetry")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def save_kscan_curve(report: KScanReport, path: str | Path) -> Path:
    """MSE against component count with the selected k marked."""
    path = Path(path)
    ks = [k for k, _ in report.entries]
    mses = [m for _, m in report.entries]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(ks, mses, marker="o", markersize=3, color="tab:blue")
    ax.axvline(report.selected_k, color="tab:red", linestyle="--", linewidth=1,
               label=f"selected k = {report.selected_k}")
    ax.set_xlabel("components k")
    ax.set_ylabel("per-dimension MSE")
    ax.set_title("component-count scan")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def save_similarity_bars(report: SimilarityReport, path: str | Path) -> Path:
    """Metric means with std whiskers, one bar per populated row."""
    path = Path(path)
    names = [n for n in ROW_ORDER if n in report.metrics]
    means = [report.metrics[n].mean for n in names]
    stds = [report.metrics[n].std for n in names]
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    positions = range(len(names))
    ax.bar(positions, means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
    ax.set_xticks(list(positions))
    ax.set_xticklabels([n.replace("_", "\n") for n in names], fontsize=7)
    ax.set_ylabel("cosine similarity")
    ax.set_ylim(-1.0, 1.1)
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_title("speaker generation quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    return path
