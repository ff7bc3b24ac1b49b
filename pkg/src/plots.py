"""
Report Plots Module

Static figures written next to an evaluation report: per-image Dice bars,
Dice box plots per category and a predicted-vs-ground-truth plaque ratio
scatter with the +/-0.05 accuracy band.
"""

import logging
from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.metrics import PR_THRESHOLD, EvalReport  # noqa: E402

logger = logging.getLogger(__name__)

DICE_BAR_FILE = "dice_per_image.png"
DICE_BOX_FILE = "dice_box.png"
PR_SCATTER_FILE = "pr_scatter.png"


def plot_dice_bars(report: EvalReport, path: Path) -> Path:
    frame = report.to_frame()
    positions = np.arange(len(frame))
    width = 0.4

    fig, ax = plt.subplots(figsize=(max(6.0, 0.25 * len(frame)), 4.0))
    ax.bar(positions - width / 2, frame["dice_teeth"], width, label="teeth")
    ax.bar(positions + width / 2, frame["dice_plaque"], width, label="plaque")
    ax.set_xticks(positions)
    ax.set_xticklabels(frame["id"], rotation=90, fontsize=6)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("Dice")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_dice_box(report: EvalReport, path: Path) -> Path:
    frame = report.to_frame()
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.boxplot([frame["dice_teeth"], frame["dice_plaque"]], labels=["teeth", "plaque"])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_pr_scatter(report: EvalReport, path: Path, threshold: float = PR_THRESHOLD) -> Path:
    """
    Predicted (and, when present, clinician) plaque ratio against ground truth.
    Points inside the shaded band count as correct for the ratio accuracy.
    """
    frame = report.to_frame()
    diagonal = np.linspace(0.0, 1.0, 101)

    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.fill_between(
        diagonal, diagonal - threshold, diagonal + threshold,
        color="tab:green", alpha=0.2, label=f"|diff| <= {threshold:g}",
    )
    ax.plot(diagonal, diagonal, color="tab:green", linewidth=1)
    ax.scatter(frame["pr_gt"], frame["pr_pred"], s=14, label="prediction")
    if "pr_cli" in frame:
        ax.scatter(frame["pr_gt"], frame["pr_cli"], s=14, marker="x", label="clinician")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("ground-truth plaque ratio")
    ax.set_ylabel("estimated plaque ratio")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report_plots(report: EvalReport, directory: Path) -> Dict[str, Path]:
    """
    Write all report figures into ``directory``.

    Returns:
        Dict[str, Path]: Figure name to file path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    figures = {
        "dice_bars": plot_dice_bars(report, directory / DICE_BAR_FILE),
        "dice_box": plot_dice_box(report, directory / DICE_BOX_FILE),
        "pr_scatter": plot_pr_scatter(report, directory / PR_SCATTER_FILE),
    }
    logger.info("Wrote %d report plots to %s", len(figures), directory)
    return figures
