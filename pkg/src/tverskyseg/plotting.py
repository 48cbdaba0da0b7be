"""Figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def plot_training(history: list[dict[str, float]], path) -> None:
    """Loss components, adaptive weights and validation overlap per epoch."""
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.8))
        ax = axes[0]
        ax.plot(epochs, [r["train_l_tversky"] for r in history], label="Tversky")
        ax.plot(epochs, [r["train_l_bce"] for r in history], label="BCE")
        ax.plot(epochs, [r["train_l_total"] for r in history], "k--", label="total")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax.legend(frameon=False)

        ax = axes[1]
        ax.plot(epochs, [r["w_tversky"] for r in history], label="$w_{Tversky}$")
        ax.plot(epochs, [r["w_bce"] for r in history], label="$w_{BCE}$")
        ax.set_ylim(0, 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss weight")
        ax.legend(frameon=False)

        ax = axes[2]
        ax.plot(epochs, [r["val_dsc"] for r in history], label="DSC")
        ax.plot(epochs, [r["val_f2"] for r in history], label="$F_2$")
        ax.set_ylim(0, 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation")
        lr_ax = ax.twinx()
        lr_ax.semilogy(epochs, [r["lr"] for r in history], color="0.6", lw=0.8)
        lr_ax.set_ylabel("lr", color="0.4")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_eval(report: dict, volumes, probs, path) -> None:
    """Per-volume DSC bars plus a central-slice overlay of the median case."""
    rows = report["volumes"]
    dsc = np.array([r["dsc"] for r in rows])
    median = int(np.argsort(dsc)[len(dsc) // 2])
    vol = volumes[median]
    fg = vol.label.sum(axis=(1, 2))
    z = int(np.argmax(fg)) if fg.any() else vol.label.shape[0] // 2
    pred = probs[median][0, z] >= 0.5

    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.0, 3.0), gridspec_kw={"width_ratios": [1.6, 1]})
        ax0.bar(range(len(rows)), dsc, color="#4eb3d3")
        ax0.axhline(report["mean"]["dsc"], color="k", ls="--", lw=0.8, label=f"mean {report['mean']['dsc']:.3f}")
        ax0.set_xticks(range(len(rows)))
        ax0.set_xticklabels([r["id"] for r in rows], rotation=60, ha="right")
        ax0.set_ylim(0, 1)
        ax0.set_ylabel("DSC")
        ax0.legend(frameon=False)

        ax1.imshow(vol.image[z], cmap="gray", vmin=0, vmax=1)
        ax1.contour(vol.label[z], levels=[0.5], colors="lime", linewidths=0.8)
        if pred.any():
            ax1.contour(pred.astype(float), levels=[0.5], colors="red", linewidths=0.8, linestyles="--")
        ax1.set_title(f"{vol.id} z={z}  DSC {dsc[median]:.3f}")
        ax1.set_axis_off()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
