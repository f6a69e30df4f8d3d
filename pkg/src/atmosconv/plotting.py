"""Figure rendering (matplotlib, non-interactive backend).

Every function writes one image file and returns its path. CSV output stays
the canonical record; figures only display it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLORS = {"vanilla": "tab:red", "normalized": "tab:blue"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_demo(path, image: np.ndarray, profiles: dict) -> Path:
    """Scene on the left, centre-row responses on the right."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    ax0.imshow(image, cmap="gray", vmin=0, vmax=max(1.0, float(image.max())))
    ax0.set_title("scene")
    ax0.axis("off")
    for label, prof in profiles.items():
        ax1.plot(prof, lw=1.2, label=label)
    ax1.axhline(0.0, color="k", lw=0.5)
    ax1.set_xlabel("column")
    ax1.set_ylabel("response (centre row)")
    ax1.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_ratio_histogram(path, edges: np.ndarray, counts_by_model: dict) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    width = np.diff(edges)
    k = max(len(counts_by_model), 1)
    for i, (label, counts) in enumerate(counts_by_model.items()):
        frac = np.asarray(counts) / max(1, np.sum(counts))
        ax.bar(edges[:-1] + i * width / k, frac, width=width / k, align="edge", label=label,
               color=MODE_COLORS.get(label))
    ax.set_xlabel("|r(w)|")
    ax.set_ylabel("fraction of filters")
    ax.set_xlim(0, 1)
    ax.legend(loc="best")
    return _save(fig, path)


def plot_filter_errors(path, rows_by_model: dict) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in rows_by_model.items():
        ax.scatter([r["abs_r"] for r in rows], [r["misclassified"] for r in rows], s=14,
                   label=label, color=MODE_COLORS.get(label))
    ax.set_xlabel("|r(w)|")
    ax.set_ylabel("misclassified fraction of top-K images")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_similarity(path, edges: np.ndarray, counts_by_model: dict) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    centers = 0.5 * (edges[:-1] + edges[1:])
    for label, counts in counts_by_model.items():
        frac = np.asarray(counts) / max(1, np.sum(counts))
        ax.step(centers, frac, where="mid", label=label, color=MODE_COLORS.get(label))
    ax.set_xlabel("guided-backprop map correlation")
    ax.set_ylabel("fraction of filter pairs")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_training_log(path, rows: list[dict]) -> Path:
    ep = [r["epoch"] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    ax0.plot(ep, [r["train_loss"] for r in rows], color="k")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("train loss")
    ax1.plot(ep, [r["train_acc"] for r in rows], label="train")
    val = [r["val_acc"] for r in rows]
    if not np.all(np.isnan(val)):
        ax1.plot(ep, val, label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("accuracy")
    ax1.legend(loc="best")
    return _save(fig, path)


def plot_accuracy_table(path, rows_by_model: dict) -> Path:
    """Grouped bars: one group per evaluation set."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(next(iter(rows_by_model.values())).keys())
    x = np.arange(len(names))
    k = len(rows_by_model)
    for i, (label, row) in enumerate(rows_by_model.items()):
        ax.bar(x + (i - (k - 1) / 2) * 0.8 / k, [row[n] for n in names], width=0.8 / k,
               label=label, color=MODE_COLORS.get(label))
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_severity(path, rows: list[dict]) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for v in sorted({r["variant"] for r in rows}):
        sub = [r for r in rows if r["variant"] == v]
        ax.plot([r["severity"] for r in sub], [r["flip_rate"] for r in sub], marker="o",
                label=f"D_{v}")
    ax.set_xlabel("severity")
    ax.set_ylabel("flip rate")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_contrast_bins(path, accuracy: np.ndarray) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(1, len(accuracy) + 1), np.nan_to_num(accuracy), color="0.4")
    ax.set_xlabel("contrast level (low to high)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    return _save(fig, path)
