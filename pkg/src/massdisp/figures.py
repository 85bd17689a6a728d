"""Matplotlib report rendering: demo panels, training curves, ablation bars.

Every function writes a PNG next to the delimited outputs; nothing is shown
interactively.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .field import DisplacementField, ScalarField


def save_demo_panel(mass: ScalarField, offsets: DisplacementField, voted: ScalarField,
                    title: str, path) -> None:
    """Input mass, the two offset components, and the voted output."""
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
    panels = [
        (mass.data[0], "input mass", "viridis"),
        (offsets.ox.data[0], "offset x", "coolwarm"),
        (offsets.oy.data[0], "offset y", "coolwarm"),
        (voted.data[0], "voted output", "viridis"),
    ]
    for ax, (img, name, cmap) in zip(axes, panels):
        im = ax.imshow(img, cmap=cmap, origin="upper")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_training_figure(metrics: list[dict], path) -> None:
    """Loss curves on a log axis with held-out PCK on a twin axis."""
    steps = [row["step"] for row in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in [
        ("loss_total", "total"),
        ("loss_conf", "confidence"),
        ("loss_offset", "offsets"),
        ("loss_final", "voted output"),
    ]:
        values = [row[key] for row in metrics]
        if any(v > 0 for v in values):
            ax.plot(steps, values, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (interval mean)")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    twin = ax.twinx()
    twin.plot(steps, [row["pck"] for row in metrics], color="black", ls="--", label="PCK")
    twin.set_ylabel("held-out PCK")
    twin.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_figure(rows: list[dict], path) -> None:
    """Grouped bars of mean held-out PCK per variant and kernel."""
    variants = []
    for row in rows:
        if row["variant"] not in variants:
            variants.append(row["variant"])
    kernels = []
    for row in rows:
        if row["kernel"] not in kernels and row["kernel"] != "none":
            kernels.append(row["kernel"])
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(kernels))
    base = np.arange(len(variants), dtype=float)
    novote = {row["variant"]: row for row in rows if row["kernel"] == "none"}
    for i, kern in enumerate(kernels):
        xs, ys, es = [], [], []
        for v, x0 in zip(variants, base):
            row = next(
                (r for r in rows if r["variant"] == v and r["kernel"] == kern),
                novote.get(v),
            )
            if row is None:
                continue
            xs.append(x0 + (i - (len(kernels) - 1) / 2) * width)
            ys.append(row["mean_pck"])
            es.append(row["std_pck"])
        ax.bar(xs, ys, width=width * 0.9, yerr=es, capsize=3, label=kern)
    ax.set_xticks(base)
    ax.set_xticklabels(variants)
    ax.set_ylabel("mean held-out PCK")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_scene_figure(panels: list[tuple[np.ndarray, str]], path) -> None:
    """Free-form row of image panels (used by the train report)."""
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (img, name) in zip(axes, panels):
        im = ax.imshow(img, cmap="viridis", origin="upper")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
