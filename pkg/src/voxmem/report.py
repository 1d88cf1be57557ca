"""Line-delimited JSON reports and matplotlib figures rendered to files."""

from __future__ import annotations

import json
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
# fixed PNG metadata keeps figure files reproducible byte for byte
PNG_META = {"Software": None}


def _clean(value):
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return None if math.isnan(v) else v
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def dumps(record):
    return json.dumps(_clean(record), sort_keys=True)


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)


def plot_losses(epochs, path):
    """Per-epoch mean l_t, l_r and l_total."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = [e["epoch"] for e in epochs]
        for key, style in (("l_total", "-"), ("l_r", "--"), ("l_t", ":")):
            ax.plot(x, [e[key] for e in epochs], style, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_retrieval(epochs, path):
    """Mean retrieved sequence length and retrieval precision per epoch."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = [e["epoch"] for e in epochs]
        ax.plot(x, [e["mean_retrieved"] for e in epochs], color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean retrieved", color="C0")
        ax2 = ax.twinx()
        prec = [np.nan if e["retrieval_precision"] is None else e["retrieval_precision"] for e in epochs]
        ax2.plot(x, prec, color="C1")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("retrieval precision", color="C1")
        ax2.spines["right"].set_visible(True)
        _save(fig, path)


def plot_iou_hist(items, path, threshold=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ious = [it["iou"] for it in items]
        ax.hist(ious, bins=20, range=(0, 1), color="0.4")
        if ious:
            ax.axvline(float(np.mean(ious)), color="C3", lw=1, label=f"mean {np.mean(ious):.3f}")
            ax.legend(frameon=False)
        ax.set_xlabel("IoU" if threshold is None else f"IoU (t={threshold:g})")
        ax.set_ylabel("items")
        _save(fig, path)


def plot_ablation(rows, path, metric="iou"):
    """Bar chart of per-cell mean +- sd for ``metric``."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(rows) + 1), 3.2))
        names = [r["cell"] for r in rows]
        means = [np.nan if r.get(f"{metric}_mean") is None else r[f"{metric}_mean"] for r in rows]
        sds = [0.0 if r.get(f"{metric}_sd") is None else r[f"{metric}_sd"] for r in rows]
        ax.bar(range(len(rows)), means, yerr=sds, color="0.55", capsize=3)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(f"mean {metric}")
        _save(fig, path)


def plot_memory(stats, path):
    """Slot ages, write counts and pairwise value similarity of a memory bank."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
        axes[0].hist(stats["ages"], bins=20, color="0.4")
        axes[0].set_xlabel("age")
        axes[1].hist(stats["write_counts"], bins=20, color="0.4")
        axes[1].set_xlabel("writes per slot")
        edges = stats["value_similarity_edges"]
        axes[2].stairs(stats["value_similarity_hist"], edges, fill=True, color="0.4")
        axes[2].set_xlabel("pairwise value similarity")
        axes[0].set_ylabel("slots")
        _save(fig, path)
