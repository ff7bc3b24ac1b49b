"""
Synthetic Data Module

Generates small stand-in datasets shaped like stained oral photographs:
ivory tooth ellipses on a gum-coloured background, each tooth carrying a
magenta plaque stain. Used for smoke runs and tests when the real dataset
is not available.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
from PIL import Image

from src.data_loader import (
    PLAQUE,
    SPLITS,
    TEETH,
    LabelMask,
    SampleRecord,
    build_supervision,
    image_to_tensor,
    write_label_mask,
)

logger = logging.getLogger(__name__)

GUM_COLOR = (150, 40, 50)
TOOTH_COLOR = (235, 225, 200)
PLAQUE_COLOR = (170, 60, 160)
NOISE_STD = 6.0


def make_sample(
    rng: np.random.Generator,
    size: int = 64,
    teeth: int = 2,
    plaque_probability: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one synthetic image and its label mask.

    Args:
        rng (np.random.Generator): Random source
        size (int): Image side length
        teeth (int): Number of teeth drawn side by side
        plaque_probability (float): Chance that a tooth carries a stain

    Returns:
        Tuple[np.ndarray, np.ndarray]: uint8 RGB image [H, W, 3] and labels [H, W]
    """
    labels = np.zeros((size, size), dtype=np.uint8)
    slot = size / teeth
    for index in range(teeth):
        center = (int(slot * (index + 0.5) + rng.integers(-2, 3)), int(size / 2 + rng.integers(-3, 4)))
        axes = (int(slot * rng.uniform(0.32, 0.42)), int(size * rng.uniform(0.3, 0.4)))
        tooth = np.zeros_like(labels)
        cv2.ellipse(tooth, center, axes, 0, 0, 360, 1, thickness=-1)
        labels[tooth == 1] = TEETH

        if rng.random() < plaque_probability:
            stain = np.zeros_like(labels)
            stain_center = (
                center[0] + int(rng.integers(-axes[0] // 3, axes[0] // 3 + 1)),
                center[1] + int(axes[1] * rng.uniform(0.2, 0.5)),
            )
            stain_axes = (max(3, int(axes[0] * rng.uniform(0.5, 0.8))), max(3, int(axes[1] * rng.uniform(0.3, 0.5))))
            cv2.ellipse(stain, stain_center, stain_axes, float(rng.uniform(-20, 20)), 0, 360, 1, thickness=-1)
            labels[(stain == 1) & (tooth == 1)] = PLAQUE

    palette = np.array([GUM_COLOR, TOOTH_COLOR, PLAQUE_COLOR], dtype=np.float64)
    image = palette[labels] + rng.normal(0.0, NOISE_STD, size=(size, size, 3))
    return np.clip(image, 0, 255).astype(np.uint8), labels


def synthetic_records(
    count: int,
    size: int = 64,
    seed: int = 0,
    boundary_op: str = "neighbor",
    plaque_probability: float = 1.0,
) -> List[SampleRecord]:
    """Build in-memory SampleRecords without touching the filesystem."""
    rng = np.random.default_rng(seed)
    records = []
    for index in range(count):
        image, labels = make_sample(rng, size=size, plaque_probability=plaque_probability)
        records.append(SampleRecord(
            id=f"synthetic_{index:04d}",
            image=image_to_tensor(image),
            supervision=build_supervision(LabelMask(labels), boundary_op),
        ))
    return records


def write_synthetic_dataset(
    root: Path,
    counts: Optional[Dict[str, int]] = None,
    size: int = 64,
    seed: int = 0,
    plaque_probability: float = 1.0,
) -> Dict[str, int]:
    """
    Write a synthetic dataset in the split layout.

    Args:
        root (Path): Dataset root
        counts (Optional[Dict[str, int]]): Samples per split (default 8/2/2)
        size (int): Image side length
        seed (int): Random seed
        plaque_probability (float): Chance that a tooth carries a stain

    Returns:
        Dict[str, int]: Samples written per split
    """
    counts = counts or {"train": 8, "val": 2, "test": 2}
    rng = np.random.default_rng(seed)
    root = Path(root)
    for split in SPLITS:
        images_dir = root / split / "images"
        images_dir.mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for index in range(counts.get(split, 0)):
            image, labels = make_sample(rng, size=size, plaque_probability=plaque_probability)
            stem = f"{split}_{index:04d}"
            Image.fromarray(image).save(images_dir / f"{stem}.png")
            write_label_mask(root / split / "masks" / f"{stem}.png", labels)

    logger.info("Wrote synthetic dataset to %s: %s", root, counts)
    return dict(counts)
