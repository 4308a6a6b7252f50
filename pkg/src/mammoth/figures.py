"""Optional matplotlib renderings written alongside the CSV/JSON reports.

Everything here is presentation only; commands emit figures when asked
(--figures) and the delimited outputs stay authoritative.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)


def training_curves(history_rows, path):
    """Loss and validation-metric curves from the history table."""
    epochs = [r["epoch"] for r in history_rows]
    losses = [r["train_loss"] for r in history_rows]
    metrics = [r["val_metric"] for r in history_rows]
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    ax1.plot(epochs, losses, marker="o", color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    if any(m is not None for m in metrics):
        ax2 = ax1.twinx()
        ax2.plot(epochs, [m if m is not None else float("nan") for m in metrics],
                 marker="s", color="tab:orange", label="val metric")
        ax2.set_ylabel("val metric", color="tab:orange")
    ax1.set_title("training history")
    _save(fig, path)


def bench_chart(results, path):
    """Per-variant MACs and latency bars."""
    variants = [r.variant for r in results]
    xs = range(len(variants))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].bar(xs, [r.macs / 1e9 for r in results], color="tab:blue")
    axes[0].set_xticks(list(xs), variants, rotation=30, ha="right")
    axes[0].set_ylabel("GMACs / forward")
    lat = [r.latency_ms_mean if r.latency_ms_mean is not None else 0.0
           for r in results]
    err = [r.latency_ms_std if r.latency_ms_std is not None else 0.0
           for r in results]
    axes[1].bar(xs, lat, yerr=err, color="tab:orange")
    axes[1].set_xticks(list(xs), variants, rotation=30, ha="right")
    axes[1].set_ylabel("latency (ms)")
    fig.suptitle("layer efficiency")
    _save(fig, path)


def igi_chart(report, path):
    """Intra/inter similarity bars, plus within-expert bars when present."""
    labels = ["intra", "inter"]
    values = [report.intra_mean, report.inter_mean]
    if report.within_expert_mean is not None:
        labels.append("within expert")
        values.append(report.within_expert_mean)
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.bar(range(len(values)), values, color=["tab:blue", "tab:gray", "tab:green"][:len(values)])
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("mean gradient cosine similarity")
    title = f"gradient interference ({report.selector})"
    if report.p_value is not None:
        title += f", p={report.p_value:.2g}"
    ax.set_title(title)
    _save(fig, path)
