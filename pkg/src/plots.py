#!/usr/bin/env python3
"""
Sweep plots (Dice against fine-tune size, grouped detection-metric bars) and
prediction overlays
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import BAR_METRICS, ExperimentResult, bar_series, curve_series  # noqa: E402
from .loss import binary_dsc  # noqa: E402

logger = logging.getLogger(__name__)

REGIME_LABELS = {
    "transfer": "Transfer learning",
    "scratch": "Train from scratch",
    "no-training": "No training on target",
}
REGIME_STYLES = {
    "transfer": {"marker": "o", "linestyle": "-"},
    "scratch": {"marker": "s", "linestyle": "-"},
    "no-training": {"marker": None, "linestyle": "--"},
}


def _save(fig, out_path) -> Path:
    output = Path(out_path)
    output.parent.mkdir(parents=True, exist_ok=True)
    fmt = output.suffix.lstrip('.').lower() or "svg"
    if fmt == "svg":
        # fixed ids and no timestamp so reruns give identical files
        with matplotlib.rc_context({"svg.hashsalt": "workbench"}):
            fig.savefig(output, format="svg", bbox_inches="tight", metadata={"Date": None})
    else:
        fig.savefig(output, format=fmt, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return output


def emit_curve_plot(result: ExperimentResult, zone: Optional[str], out_path) -> Path:
    """
    Mean Dice on the fixed target test set against the number of fine-tune patients

    One line per regime; the no-training baseline is drawn flat across sizes.

    Args:
        result: Sweep result
        zone: Title label (defaults to the plan's zone)
        out_path: .svg or .png file

    Returns:
        Path of the written image
    """
    series = curve_series(result)
    fig, ax = plt.subplots(figsize=(6, 4))
    for regime, (sizes, values) in series.items():
        if not sizes:
            continue
        ax.plot(sizes, values, label=REGIME_LABELS.get(regime, regime), **REGIME_STYLES.get(regime, {}))
    ax.set_xlabel("Fine-tune patients")
    ax.set_ylabel("Mean DSC")
    ax.set_title(f"{zone or result.plan.zone} segmentation on the target domain")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    if any(sizes for sizes, _ in series.values()):
        ax.legend(loc="lower right")
    output = _save(fig, out_path)
    logger.info(f"✓ Curve plot written to {output}")
    return output


def _group_label(regime: str, x: Optional[float], size: int) -> str:
    label = REGIME_LABELS.get(regime, regime)
    if x is not None:
        label += f"\nX={x:g}"
    return f"{label}\nn={size}"


def emit_metric_bars(result: ExperimentResult,
                     sizes: Optional[List[int]],
                     out_path,
                     x_values: Optional[List[float]] = None) -> Path:
    """
    Grouped bars of sensitivity, specificity and precision per regime, X and size

    Transfer and scratch are drawn once per compared X, so the reward for empty
    slices can be compared at every size. Missing (undefined) metrics are drawn as
    zero-height bars.
    """
    bars = bar_series(result, sizes, x_values)
    groups = list(bars)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups) + 2), 4))
    positions = np.arange(len(groups))
    width = 0.8 / len(BAR_METRICS)
    for i, metric in enumerate(BAR_METRICS):
        heights = [bars[group][metric] or 0.0 for group in groups]
        ax.bar(positions + (i - (len(BAR_METRICS) - 1) / 2) * width, heights, width, label=metric)
    ax.set_xticks(positions)
    ax.set_xticklabels([_group_label(*group) for group in groups], fontsize=8)
    ax.set_ylabel("Rate")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{result.plan.zone} slice-level detection")
    if groups:
        ax.legend(loc="lower right")
    output = _save(fig, out_path)
    logger.info(f"✓ Metric bars written to {output}")
    return output


def _outline(ax, mask: np.ndarray, color: str):
    if mask.any():
        ax.contour(mask.astype(float), levels=[0.5], colors=color, linewidths=1.0)


def emit_prediction_overlay(image: np.ndarray,
                            ground_truth: np.ndarray,
                            predictions: Dict[str, np.ndarray],
                            out_path,
                            title: Optional[str] = None) -> Path:
    """
    Predicted masks against the ground truth on one slice

    One panel per named prediction: the image in grey, the ground-truth outline in
    green and the predicted outline in red, titled with the slice Dice.

    Args:
        image: H×W image
        ground_truth: H×W binary mask
        predictions: Panel label → H×W binary mask
        out_path: .svg or .png file
        title: Figure title

    Returns:
        Path of the written image
    """
    if not predictions:
        raise ValueError("no predictions to draw")
    for name, mask in [("ground truth", ground_truth), *predictions.items()]:
        if mask.shape != image.shape:
            raise ValueError(f"{name}: mask shape {mask.shape} does not match image {image.shape}")

    fig, axes = plt.subplots(1, len(predictions), figsize=(3 * len(predictions), 3.4), squeeze=False)
    for ax, (name, mask) in zip(axes[0], predictions.items()):
        ax.imshow(image, cmap="gray", interpolation="nearest")
        _outline(ax, ground_truth, "lime")
        _outline(ax, mask, "red")
        ax.set_title(f"{name}\nDSC {binary_dsc(mask, ground_truth):.3f}", fontsize=9)
        ax.set_axis_off()
    handles = [Line2D([0], [0], color="lime", label="Ground truth"),
               Line2D([0], [0], color="red", label="Prediction")]
    fig.legend(handles=handles, loc="lower center", ncol=2, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    output = _save(fig, out_path)
    logger.info(f"✓ Prediction overlay written to {output}")
    return output
