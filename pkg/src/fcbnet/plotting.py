"""Matplotlib figures written next to the tabular reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cost_breakdown(rows: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Horizontal bars of trainable parameters and GFLOPs per submodule."""
    names = [r["name"] for r in rows]
    params = [r["params_trainable"] / 1e6 for r in rows]
    flops = [r["flops"] / 1e9 for r in rows]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 0.25 * len(rows) + 1.2), sharey=True)
        ax1.barh(names, params, color="tab:green")
        ax1.set_xlabel("trainable params (M)")
        ax1.invert_yaxis()
        ax2.barh(names, flops, color="tab:blue")
        ax2.set_xlabel("GFLOPs (conv MACs)")
        if title:
            fig.suptitle(title)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], axis: str, path: str | Path) -> Path:
    """Cost (and mIoU, when present) against the swept setting."""
    labels = [str(r[axis]) for r in rows]
    has_miou = any(r.get("miou") is not None for r in rows)
    with plt.rc_context(RC):
        ncols = 3 if has_miou else 2
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 2.6))
        axes[0].plot(labels, [r["trainable_params_m"] for r in rows], "o-", color="tab:green")
        axes[0].set_ylabel("trainable params (M)")
        axes[1].plot(labels, [r["gflops"] for r in rows], "s-", color="tab:blue")
        axes[1].set_ylabel("GFLOPs (conv MACs)")
        if has_miou:
            axes[2].plot(labels, [r.get("miou") or float("nan") for r in rows], "^-", color="tab:red")
            axes[2].set_ylabel("mIoU")
        for ax in axes:
            ax.set_xlabel(axis)
        fig.tight_layout()
    return _save(fig, path)


def plot_history(epochs: Sequence[dict], path: str | Path) -> Path:
    x = [e["epoch"] for e in epochs]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(x, [e["loss"] for e in epochs], color="black", label="train loss")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("cross-entropy")
        val = [(e["epoch"], e["val_miou"]) for e in epochs if e.get("val_miou") is not None]
        if val:
            twin = ax1.twinx()
            twin.plot(*zip(*val), color="tab:red", label="val mIoU")
            twin.set_ylabel("val mIoU")
        ax2.plot(x, [e["lr"] for e in epochs], color="tab:purple")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("learning rate")
        fig.tight_layout()
    return _save(fig, path)
