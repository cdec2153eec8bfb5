"""Report figures rendered to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import FPR_GRID, interpolate_roc, format_duration  # noqa: E402


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_roc(folds, path, title="ROC") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    curves = []
    for f in folds:
        ax.plot(f.roc.fpr, f.roc.tpr, lw=0.8, alpha=0.5, label=f"{f.subject} ({f.auc:.2f})")
        curves.append(interpolate_roc(f.roc))
    mean = np.mean(curves, axis=0)
    ax.plot(FPR_GRID, mean, color="k", lw=2, label=f"mean ({np.mean([f.auc for f in folds]):.2f})")
    ax.plot([0, 1], [0, 1], ls=":", color="grey")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title=title, xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(fontsize=7, loc="lower right")
    _save(fig, path)


def plot_sweep(rows, path, title="AUC vs aggregation window") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    x = np.array([r.window_s for r in rows])
    m = np.array([r.mean_auc for r in rows])
    s = np.array([r.std_auc for r in rows])
    ax.errorbar(x, m, yerr=s, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([format_duration(v) for v in x], rotation=45)
    ax.set(xlabel="window", ylabel="AUC", title=title, ylim=(0, 1.02))
    ax.axhline(0.5, ls=":", color="grey")
    _save(fig, path)


def plot_score_hist(scores, labels, path, names=("BL", "EPG"), title="segment scores") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 1, 41)
    labels = np.asarray(labels)
    for c, name in enumerate(names):
        ax.hist(np.asarray(scores)[labels == c], bins=bins, alpha=0.6, density=True, label=name)
    ax.set(xlabel="EPG probability", ylabel="density", title=title)
    ax.legend()
    _save(fig, path)


def plot_clusters(report, path, names=("BL", "EPG")) -> None:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.8))
    pct = report.class_percentages()
    idx = np.arange(report.k)
    bottom = np.zeros(report.k)
    for c, name in enumerate(names):
        ax0.bar(idx, pct[:, c], bottom=bottom, label=name)
        bottom += pct[:, c]
    ax0.set(xlabel="cluster", ylabel="% of segments", xticks=idx)
    ax0.legend()
    for c in range(report.k):
        m, s = report.mean_spectra[c], report.std_spectra[c]
        ax1.plot(report.frequencies_hz, m, label=f"cluster {c}")
        ax1.fill_between(report.frequencies_hz, m - s, m + s, alpha=0.15)
    ax1.set(xlabel="frequency (Hz)", ylabel="log10 power")
    ax1.legend(fontsize=7)
    _save(fig, path)


def plot_elbow(curve, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ks, inertia = zip(*curve)
    ax.plot(ks, inertia, marker="o")
    ax.set(xlabel="k", ylabel="inertia")
    _save(fig, path)


def plot_training(history, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ep = [h.epoch for h in history]
    ax.plot(ep, [h.train_loss for h in history], label="train loss")
    ax.plot(ep, [h.val_loss for h in history], label="val loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [h.val_auc for h in history], color="k", ls="--", label="val AUC")
    ax.set(xlabel="epoch", ylabel="loss")
    ax2.set_ylabel("AUC")
    ax.legend(loc="upper left", fontsize=7)
    _save(fig, path)
