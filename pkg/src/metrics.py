"""
Evaluation Metrics Module

Per-category IoU and Dice, the plaque pixel ratio (PR) and the PR accuracy
(PR%): the share of images whose predicted ratio lies within 0.05 of the
ground truth. Reports aggregate per image (default) or over pooled pixel
counts, and serialize to JSON and CSV.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data_loader import PLAQUE, SEVERITY_EDGES, TEETH, LabelMask, severity_level
from src.errors import DatasetError

logger = logging.getLogger(__name__)

PR_THRESHOLD = 0.05
# Absorbs float error so that differences of exactly 0.05 count as correct.
PR_TOLERANCE = 1e-12
AVERAGING_MODES = ("image", "micro")
EVAL_MODES = ("fused", "branch")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of one category in one image."""

    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @classmethod
    def from_maps(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError(f"Shape mismatch: {pred.shape} vs {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.true_positive + other.true_positive,
            self.false_positive + other.false_positive,
            self.false_negative + other.false_negative,
            self.true_negative + other.true_negative,
        )

    @property
    def iou(self) -> float:
        union = self.true_positive + self.false_positive + self.false_negative
        return 1.0 if union == 0 else self.true_positive / union

    @property
    def dice(self) -> float:
        denominator = 2 * self.true_positive + self.false_positive + self.false_negative
        return 1.0 if denominator == 0 else 2 * self.true_positive / denominator


def category_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Intersection over union of two binary maps; 1.0 when both are empty.
    """
    return ConfusionCounts.from_maps(pred, gt).iou


def category_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Dice coefficient of two binary maps; 1.0 when both are empty.
    """
    return ConfusionCounts.from_maps(pred, gt).dice


def pixel_ratio(mask: LabelMask) -> float:
    """
    Plaque pixels over teeth-plus-plaque pixels; 0 when there is no foreground.
    """
    plaque = int(np.count_nonzero(mask.labels == PLAQUE))
    teeth = int(np.count_nonzero(mask.labels == TEETH))
    foreground = teeth + plaque
    return 0.0 if foreground == 0 else plaque / foreground


def pr_accuracy(pairs: Sequence[Tuple[float, float]], threshold: float = PR_THRESHOLD) -> float:
    """
    Fraction of (PR_gt, PR_other) pairs with |PR_gt - PR_other| <= threshold.

    Args:
        pairs (Sequence[Tuple[float, float]]): Ratio pairs
        threshold (float): Inclusive tolerance

    Returns:
        float: Accuracy in [0, 1]

    Raises:
        ValueError: If ``pairs`` is empty
    """
    if len(pairs) == 0:
        raise ValueError("pr_accuracy needs at least one pair")
    correct = sum(1 for gt, other in pairs if abs(gt - other) <= threshold + PR_TOLERANCE)
    return correct / len(pairs)


@dataclass
class ImageMetrics:
    id: str
    iou_teeth: float
    iou_plaque: float
    dice_teeth: float
    dice_plaque: float
    pr_gt: float
    pr_pred: float
    pr_cli: Optional[float] = None


@dataclass
class EvalReport:
    """
    Evaluation results.

    Attributes:
        per_image (List[ImageMetrics]): One row per evaluated image
        aggregate (Dict[str, float]): miou_teeth, miou_plaque, dice_teeth, dice_plaque,
            pr_percent and, with clinician estimates, clinician_pr_percent
        averaging (str): 'image' or 'micro'
        eval_mode (str): 'fused' or 'branch'
        severity (Dict[str, List[int]]): Images per severity level, ground truth and prediction
    """

    per_image: List[ImageMetrics]
    aggregate: Dict[str, float]
    averaging: str = "image"
    eval_mode: str = "fused"
    severity: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "averaging": self.averaging,
            "eval_mode": self.eval_mode,
            "aggregate": self.aggregate,
            "severity": self.severity,
            "per_image": [asdict(row) for row in self.per_image],
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(row) for row in self.per_image])
        if "pr_cli" in frame and frame["pr_cli"].isna().all():
            frame = frame.drop(columns=["pr_cli"])
        return frame

    def save_json(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as file:
            json.dump(self.to_dict(), file, indent=2)
        return path

    def save_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def read_clinician_csv(path: Path) -> Dict[str, float]:
    """
    Read clinician PR estimates from a CSV with columns ``id,pr`` (PR in [0, 1]).

    Raises:
        DatasetError: On an unreadable file, missing columns or out-of-range values
    """
    try:
        frame = pd.read_csv(path, dtype={"id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"Cannot read clinician CSV {path}: {e}") from e
    missing = {"id", "pr"} - set(frame.columns)
    if missing:
        raise DatasetError(f"Clinician CSV {path} lacks columns: {sorted(missing)}")
    out_of_range = frame[(frame["pr"] < 0) | (frame["pr"] > 1) | frame["pr"].isna()]
    if len(out_of_range):
        raise DatasetError(f"Clinician PR outside [0, 1] for ids: {out_of_range['id'].tolist()}")
    return dict(zip(frame["id"], frame["pr"].astype(float)))


def build_report(
    predictions: Sequence[Tuple[str, LabelMask]],
    gts: Mapping[str, LabelMask],
    clinician_estimates: Optional[Mapping[str, float]] = None,
    averaging: str = "image",
    branch_masks: Optional[Mapping[str, Tuple[np.ndarray, np.ndarray]]] = None,
) -> EvalReport:
    """
    Compute per-image and aggregate metrics.

    Args:
        predictions (Sequence[Tuple[str, LabelMask]]): (id, predicted label map)
        gts (Mapping[str, LabelMask]): Ground truth per id
        clinician_estimates (Optional[Mapping[str, float]]): Clinician PR per id
        averaging (str): 'image' (mean of per-image scores) or 'micro' (pooled counts)
        branch_masks (Optional[Mapping]): Per-branch binary (teeth, plaque) predictions
            scored instead of the fused label map ('branch' evaluation mode)

    Returns:
        EvalReport: Metrics report

    Raises:
        ValueError: On empty input
        DatasetError: On ids that do not match one-to-one or missing clinician estimates
    """
    if not predictions:
        raise ValueError("No predictions to evaluate")
    if averaging not in AVERAGING_MODES:
        raise ValueError(f"averaging must be one of {AVERAGING_MODES}")

    pred_ids = [image_id for image_id, _ in predictions]
    unmatched = sorted(set(pred_ids) ^ set(gts))
    if unmatched or len(set(pred_ids)) != len(pred_ids):
        raise DatasetError(f"Prediction and ground-truth ids do not match one-to-one: {unmatched}")
    if clinician_estimates is not None:
        missing = sorted(set(pred_ids) - set(clinician_estimates))
        if missing:
            raise DatasetError(f"Clinician estimates missing for ids: {missing}")

    rows = []
    pooled = {TEETH: ConfusionCounts(0, 0, 0, 0), PLAQUE: ConfusionCounts(0, 0, 0, 0)}
    levels = len(SEVERITY_EDGES) + 1
    severity = {"gt": [0] * levels, "pred": [0] * levels}

    for image_id, pred in predictions:
        gt = gts[image_id]
        if pred.labels.shape != gt.labels.shape:
            raise ValueError(f"Shape mismatch for '{image_id}': {pred.labels.shape} vs {gt.labels.shape}")

        if branch_masks is not None:
            pred_maps = {TEETH: branch_masks[image_id][0], PLAQUE: branch_masks[image_id][1]}
        else:
            pred_maps = {TEETH: pred.labels == TEETH, PLAQUE: pred.labels == PLAQUE}
        counts = {c: ConfusionCounts.from_maps(pred_maps[c], gt.labels == c) for c in (TEETH, PLAQUE)}
        for category, value in counts.items():
            pooled[category] = pooled[category] + value

        pr_gt, pr_pred = pixel_ratio(gt), pixel_ratio(pred)
        severity["gt"][severity_level(pr_gt)] += 1
        severity["pred"][severity_level(pr_pred)] += 1
        rows.append(ImageMetrics(
            id=image_id,
            iou_teeth=counts[TEETH].iou,
            iou_plaque=counts[PLAQUE].iou,
            dice_teeth=counts[TEETH].dice,
            dice_plaque=counts[PLAQUE].dice,
            pr_gt=pr_gt,
            pr_pred=pr_pred,
            pr_cli=None if clinician_estimates is None else float(clinician_estimates[image_id]),
        ))

    if averaging == "image":
        aggregate = {
            "miou_teeth": float(np.mean([r.iou_teeth for r in rows])),
            "miou_plaque": float(np.mean([r.iou_plaque for r in rows])),
            "dice_teeth": float(np.mean([r.dice_teeth for r in rows])),
            "dice_plaque": float(np.mean([r.dice_plaque for r in rows])),
        }
    else:
        aggregate = {
            "miou_teeth": pooled[TEETH].iou,
            "miou_plaque": pooled[PLAQUE].iou,
            "dice_teeth": pooled[TEETH].dice,
            "dice_plaque": pooled[PLAQUE].dice,
        }
    aggregate["pr_percent"] = pr_accuracy([(r.pr_gt, r.pr_pred) for r in rows])
    if clinician_estimates is not None:
        aggregate["clinician_pr_percent"] = pr_accuracy([(r.pr_gt, r.pr_cli) for r in rows])

    logger.info("Evaluated %d images: %s", len(rows), aggregate)
    return EvalReport(
        per_image=rows,
        aggregate=aggregate,
        averaging=averaging,
        eval_mode="fused" if branch_masks is None else "branch",
        severity=severity,
    )
