"""Figure rendering for the report paths (saved PNGs, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import Box, DetectionSet


def plot_loss_curves(rows, out_png) -> None:
    """Training curves from (split, metric, value, step) rows."""
    series: dict[str, tuple[list, list]] = {}
    for split, metric, value, step in rows:
        if split == "train" and metric in ("loss_total", "loss_main", "loss_aux"):
            xs, ys = series.setdefault(metric, ([], []))
            xs.append(int(step))
            ys.append(float(value))
    val_mae = [(int(s), float(v)) for sp, m, v, s in rows if sp == "val" and m == "mae"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for metric, (xs, ys) in series.items():
        axes[0].plot(xs, ys, label=metric, linewidth=1)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=8)
    if val_mae:
        axes[1].plot(*zip(*val_mae), marker="o", markersize=3)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("val MAE")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_count_scatter(gt_counts, pred_counts, out_png, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    lim = max(max(gt_counts, default=1), max(pred_counts, default=1)) * 1.1 + 1
    ax.plot([0, lim], [0, lim], color="gray", linewidth=0.8, linestyle="--")
    ax.scatter(gt_counts, pred_counts, s=14, alpha=0.7)
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("predicted count")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_ablation_bars(table: list[dict], out_png) -> None:
    """Grouped MAE/RMSE bars, one group per variant (mean over seeds)."""
    variants = sorted({row["variant"] for row in table})
    means = {
        v: {
            key: float(np.mean([row[key] for row in table if row["variant"] == v]))
            for key in ("mae", "rmse")
        }
        for v in variants
    }
    x = np.arange(len(variants))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.2 * len(variants) + 2, 3.4))
    ax.bar(x - width / 2, [means[v]["mae"] for v in variants], width, label="MAE")
    ax.bar(x + width / 2, [means[v]["rmse"] for v in variants], width, label="RMSE")
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("count error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def draw_detections(
    image: np.ndarray,
    detections: DetectionSet,
    exemplars: list[Box],
    out_png,
    count: int | None = None,
) -> None:
    """Overlay: solid boxes for detections, dashed for exemplar prompts."""
    fig, ax = plt.subplots(figsize=(6, 6 * image.shape[0] / max(image.shape[1], 1)))
    ax.imshow(np.clip(image, 0, 1), extent=(0, image.shape[1], image.shape[0], 0))
    for b in detections.boxes:
        ax.add_patch(
            plt.Rectangle(
                (b.x1, b.y1), b.width, b.height, fill=False, edgecolor="lime", linewidth=1.0
            )
        )
    for b in exemplars:
        ax.add_patch(
            plt.Rectangle(
                (b.x1, b.y1),
                b.width,
                b.height,
                fill=False,
                edgecolor="yellow",
                linewidth=1.4,
                linestyle="--",
            )
        )
    n = len(detections) if count is None else count
    ax.set_title(f"count = {n}", fontsize=11)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
