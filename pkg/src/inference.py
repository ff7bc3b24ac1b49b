"""
Inference Module

Turns the two branch outputs into a single 3-class label map and writes
predictions to disk. Boundary and projection heads are training-only and are
never evaluated here.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence

import cv2
import numpy as np
import torch

from src.data_loader import BACKGROUND, PLAQUE, TEETH, LabelMask, write_label_mask
from src.errors import ExportError
from src.metrics import EVAL_MODES, EvalReport, build_report
from src.sdnet import SDNet

logger = logging.getLogger(__name__)

FOREGROUND_THRESHOLD = 0.5
PROBABILITY_SCALE = 65535


@dataclass(frozen=True)
class FusedPrediction:
    """
    Attributes:
        label (LabelMask): Predicted 3-class map
        prob_teeth (np.ndarray): Teeth foreground probability [H, W]
        prob_plaque (np.ndarray): Plaque foreground probability [H, W]
    """

    label: LabelMask
    prob_teeth: np.ndarray
    prob_plaque: np.ndarray

    def branch_masks(self):
        """Thresholded per-branch foreground maps (teeth, plaque)."""
        return self.prob_teeth >= FOREGROUND_THRESHOLD, self.prob_plaque >= FOREGROUND_THRESHOLD


def branch_foreground_prob(mask_logits: torch.Tensor) -> torch.Tensor:
    """
    Softmax over the two mask channels, returning the foreground channel.

    Args:
        mask_logits (torch.Tensor): [2, H, W] or [N, 2, H, W]

    Returns:
        torch.Tensor: [H, W] or [N, H, W]
    """
    return torch.softmax(mask_logits, dim=-3).select(-3, 1)


def fuse_branches(p_teeth: np.ndarray, p_plaque: np.ndarray) -> FusedPrediction:
    """
    Combine branch probabilities into one label map.

    A pixel is background when both probabilities are below 0.5; otherwise it
    takes the more probable category, with ties going to plaque.
    """
    p_teeth = np.asarray(p_teeth)
    p_plaque = np.asarray(p_plaque)
    if p_teeth.shape != p_plaque.shape:
        raise ValueError(f"Probability maps differ in shape: {p_teeth.shape} vs {p_plaque.shape}")

    foreground = np.maximum(p_teeth, p_plaque) >= FOREGROUND_THRESHOLD
    labels = np.where(p_plaque >= p_teeth, PLAQUE, TEETH)
    labels = np.where(foreground, labels, BACKGROUND).astype(np.uint8)
    return FusedPrediction(label=LabelMask(labels), prob_teeth=p_teeth, prob_plaque=p_plaque)


@torch.no_grad()
def predict(model: SDNet, images: torch.Tensor) -> List[FusedPrediction]:
    """
    Predict label maps for a batch.

    Args:
        model (SDNet): Trained model
        images (torch.Tensor): [N, 3, H, W] or a single [3, H, W] image

    Returns:
        List[FusedPrediction]: One prediction per image
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        result = model(images, with_aux=False)
    finally:
        model.train(was_training)

    if result.decomposed:
        p_teeth = branch_foreground_prob(result.teeth.mask_logits).cpu().numpy()
        p_plaque = branch_foreground_prob(result.plaque.mask_logits).cpu().numpy()
        return [fuse_branches(t, p) for t, p in zip(p_teeth, p_plaque)]

    probabilities = torch.softmax(result.joint_logits, dim=1).cpu().numpy()
    predictions = []
    for probs in probabilities:
        labels = probs.argmax(axis=0).astype(np.uint8)
        predictions.append(FusedPrediction(
            label=LabelMask(labels), prob_teeth=probs[TEETH], prob_plaque=probs[PLAQUE],
        ))
    return predictions


def predict_records(model: SDNet, records: Sequence, batch_size: int = 16) -> List[FusedPrediction]:
    """Predict every SampleRecord in fixed-size batches, preserving order."""
    predictions = []
    for start in range(0, len(records), batch_size):
        batch = torch.stack([record.image for record in records[start:start + batch_size]])
        device = next(model.parameters()).device
        predictions.extend(predict(model, batch.to(device)))
    return predictions


def _write_probability(path: Path, probabilities: np.ndarray) -> Path:
    quantized = np.round(np.clip(probabilities, 0.0, 1.0) * PROBABILITY_SCALE).astype(np.uint16)
    if not cv2.imwrite(str(path), quantized):
        raise ExportError(f"Failed to write probability map {path}")
    return path


def read_probability(path: Path) -> np.ndarray:
    values = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if values is None:
        raise ExportError(f"Cannot read probability map {path}")
    return values.astype(np.float64) / PROBABILITY_SCALE


def export_masks(pred: FusedPrediction, path: Path, with_probabilities: bool = False) -> List[Path]:
    """
    Write a prediction as an 8-bit label PNG, plus optional 16-bit probability PNGs.

    Probability maps go next to the label file as ``<stem>_teeth_prob.png`` and
    ``<stem>_plaque_prob.png``.

    Args:
        pred (FusedPrediction): Prediction to export
        path (Path): Label PNG path
        with_probabilities (bool): Also write the probability maps

    Returns:
        List[Path]: Written files

    Raises:
        ExportError: If a file cannot be written
    """
    path = Path(path)
    try:
        written = [write_label_mask(path, pred.label.labels)]
        if with_probabilities:
            written.append(_write_probability(path.with_name(f"{path.stem}_teeth_prob.png"), pred.prob_teeth))
            written.append(_write_probability(path.with_name(f"{path.stem}_plaque_prob.png"), pred.prob_plaque))
    except ExportError:
        raise
    except (OSError, ValueError, cv2.error) as e:
        raise ExportError(f"Cannot export prediction to {path}: {e}") from e
    return written


def evaluate_model(
    model: SDNet,
    records: Sequence,
    eval_mode: str = "fused",
    averaging: str = "image",
    clinician_estimates: Optional[Mapping[str, float]] = None,
    batch_size: int = 16,
) -> EvalReport:
    """
    Predict a list of SampleRecords and score them against their supervision.

    Args:
        model (SDNet): Model to evaluate
        records (Sequence[SampleRecord]): Samples with ground truth
        eval_mode (str): 'fused' scores the fused label map; 'branch' scores each
            branch's thresholded foreground independently
        averaging (str): 'image' or 'micro'
        clinician_estimates (Optional[Mapping[str, float]]): Clinician PR per id
        batch_size (int): Prediction batch size

    Returns:
        EvalReport: Metrics report
    """
    if eval_mode not in EVAL_MODES:
        raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
    predictions = predict_records(model, records, batch_size=batch_size)
    pairs = [(record.id, pred.label) for record, pred in zip(records, predictions)]
    gts = {record.id: record.supervision.label_mask() for record in records}
    branch_masks = None
    if eval_mode == "branch":
        branch_masks = {record.id: pred.branch_masks() for record, pred in zip(records, predictions)}
    return build_report(
        pairs, gts, clinician_estimates=clinician_estimates, averaging=averaging, branch_masks=branch_masks
    )
