"""PNG figures rendered next to the delimited reports."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRICS  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_histories(histories: Mapping[str, Sequence], path) -> None:
    """Loss and train accuracy per epoch, one line per fold."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, rows in histories.items():
        epochs = [r.epoch for r in rows]
        ax_loss.plot(epochs, [r.loss for r in rows], label=name, lw=1)
        ax_acc.plot(epochs, [r.train_acc for r in rows], label=name, lw=1)
    ax_loss.set(xlabel="epoch", ylabel="focal loss", yscale="log")
    ax_acc.set(xlabel="epoch", ylabel="train accuracy", ylim=(0, 1.02))
    if len(histories) <= 10:
        ax_acc.legend(fontsize=7, loc="lower right")
    _save(fig, path)


def plot_fold_metrics(reports: Sequence, labels: Sequence[str], path) -> None:
    mat = np.stack([r.as_array() for r in reports])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = np.arange(len(METRICS))
    ax.bar(x, mat.mean(axis=0), yerr=mat.std(axis=0, ddof=1) if len(reports) > 1 else None,
           color="#4c72b0", capsize=3)
    for row in mat:
        ax.scatter(x, row, s=8, color="k", zorder=3)
    ax.set_xticks(x, [m.upper() for m in METRICS])
    ax.set(ylim=(0, 1.02), ylabel="score", title=f"{len(labels)} folds")
    _save(fig, path)


def plot_routing(assigned_counts: np.ndarray, mean_gates: np.ndarray, path) -> None:
    e = len(assigned_counts)
    fig, (ax_c, ax_g) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_c.bar(np.arange(e), assigned_counts, color="#55a868")
    ax_c.set(xlabel="expert", ylabel="assigned instances", xticks=np.arange(e))
    ax_g.bar(np.arange(e), mean_gates, color="#c44e52")
    ax_g.set(xlabel="expert", ylabel="mean gate", xticks=np.arange(e))
    _save(fig, path)


def plot_contributions(names: Sequence[str], scores: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(names) + 2), 3.2))
    ax.bar(np.arange(len(names)), scores, color="#8172b2")
    ax.set_xticks(np.arange(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set(ylabel="mean attention received")
    _save(fig, path)


def plot_f_rank(names: Sequence[str], f_rank: np.ndarray, path) -> None:
    order = np.argsort(f_rank, kind="stable")
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(names) + 1.2))
    ax.barh(np.arange(len(names)), np.asarray(f_rank)[order], color="#dd8452")
    ax.set_yticks(np.arange(len(names)), [names[i] for i in order], fontsize=8)
    ax.set(xlabel="F-rank", xlim=(0, len(names) + 0.5))
    _save(fig, path)


__all__ = ["plot_histories", "plot_fold_metrics", "plot_routing", "plot_contributions", "plot_f_rank"]
