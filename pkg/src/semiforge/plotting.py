"""Matplotlib renderings of the report tables."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _read(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=np.float64)


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_curve(csv_path, png_path, ylabel):
    _, data = _read(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epoch, mean, std = data[:, 0], data[:, 1], data[:, 2]
        ax.plot(epoch, mean, color="#2c3e50")
        ax.fill_between(epoch, mean - std, mean + std, color="#2980b9", alpha=0.25, lw=0)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1)
        _save(fig, png_path)


def plot_per_class(csv_path, png_path):
    _, data = _read(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(data[:, 0], data[:, 1], yerr=data[:, 2], color="#27ae60", capsize=2)
        ax.set_xlabel("class")
        ax.set_ylabel("accuracy at best epoch")
        ax.set_xticks(data[:, 0].astype(int))
        ax.set_ylim(0, 1)
        _save(fig, png_path)


def plot_confusion(csv_path, png_path):
    _, data = _read(csv_path)
    conf = data[:, 1:]
    norm = conf / np.maximum(conf.sum(axis=1, keepdims=True), 1e-12)
    K = conf.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2 + 0.25 * K, 3 + 0.25 * K))
        im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
        for i in range(K):
            for j in range(K):
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        ax.set_xticks(range(K))
        ax.set_yticks(range(K))
        fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, png_path)


def render_figures(paths: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    made = []
    for key, label in (("mask_prob", "mask probability"), ("used_acc", "used accuracy")):
        made.append(out_dir / f"{key}.png")
        plot_curve(paths[key], made[-1], label)
    made.append(out_dir / "per_class_acc.png")
    plot_per_class(paths["per_class_acc"], made[-1])
    if "confusion" in paths:
        made.append(out_dir / "confusion.png")
        plot_confusion(paths["confusion"], made[-1])
    return made
