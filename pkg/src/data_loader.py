"""
Dataset Loader Module

This module decodes and validates image/mask pairs, derives the per-branch
supervision (binary category masks and their boundary maps) from 3-class
label masks, and provides flip augmentation and the torch Dataset used
during training.

Dataset layout::

    <root>/<split>/images/<id>.png
    <root>/<split>/masks/<id>.png                       (raw indices 0/1/2)
    <root>/<split>/boundaries/{teeth,plaque}/<id>.png   (optional, precomputed)
"""

import hashlib
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from src.errors import DatasetError

logger = logging.getLogger(__name__)

BACKGROUND = 0
TEETH = 1
PLAQUE = 2
NUM_CLASSES = 3

SPLITS = ("train", "val", "test")
BOUNDARY_OPS = ("neighbor", "canny")
CANNY_LOW_THRESHOLD = 100
CANNY_HIGH_THRESHOLD = 200

# Upper bounds of the 11 plaque severity bins: 0%, 1-10%, ..., 91-100%.
SEVERITY_EDGES = tuple(i / 10 for i in range(1, 11))


@dataclass(frozen=True)
class DataConfig:
    """
    Dataset settings of a run.

    Attributes:
        root (str): Dataset root directory
        boundary_op (str): 'neighbor' or 'canny'
        use_precomputed_boundaries (bool): Read boundary PNGs when present
        num_workers (int): Loader threads and DataLoader workers
        augment (bool): Apply random flips to training samples
    """

    root: str = "./data/sdpseg"
    boundary_op: str = "neighbor"
    use_precomputed_boundaries: bool = False
    num_workers: int = 0
    augment: bool = True

    def validate(self) -> None:
        if self.boundary_op not in BOUNDARY_OPS:
            raise DatasetError(f"Unknown boundary operator: {self.boundary_op}")
        if self.num_workers < 0:
            raise DatasetError("num_workers must be >= 0")


@dataclass(frozen=True)
class LabelMask:
    """
    Per-pixel 3-class annotation: 0 background, 1 teeth, 2 plaque.

    Attributes:
        labels (np.ndarray): uint8 array of shape [H, W]
    """

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DatasetError(f"Label mask must be 2-D, got shape {labels.shape}")
        invalid = np.setdiff1d(np.unique(labels), (BACKGROUND, TEETH, PLAQUE))
        if invalid.size:
            raise DatasetError(f"Label mask contains values outside {{0,1,2}}: {invalid.tolist()}")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SupervisionPack:
    """
    Binary supervision maps of one sample (uint8 arrays of shape [H, W]).

    Attributes:
        teeth_mask (np.ndarray): Y_t
        plaque_mask (np.ndarray): Y_p
        teeth_boundary (np.ndarray): Y_t^e
        plaque_boundary (np.ndarray): Y_p^e
    """

    teeth_mask: np.ndarray
    plaque_mask: np.ndarray
    teeth_boundary: np.ndarray
    plaque_boundary: np.ndarray

    def validate(self) -> None:
        """
        Raises:
            DatasetError: If masks overlap, a boundary leaves its mask, or shapes differ
        """
        shape = self.teeth_mask.shape
        for name in ("plaque_mask", "teeth_boundary", "plaque_boundary"):
            if getattr(self, name).shape != shape:
                raise DatasetError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.teeth_mask & self.plaque_mask):
            raise DatasetError("Teeth and plaque masks overlap")
        if np.any(self.teeth_boundary & ~self.teeth_mask.astype(bool)):
            raise DatasetError("Teeth boundary leaves the teeth mask")
        if np.any(self.plaque_boundary & ~self.plaque_mask.astype(bool)):
            raise DatasetError("Plaque boundary leaves the plaque mask")

    def label_mask(self) -> LabelMask:
        """Recombine into a label mask (0 + 1*Y_t + 2*Y_p)."""
        return LabelMask(TEETH * self.teeth_mask + PLAQUE * self.plaque_mask)

    def to_tensors(self) -> Dict[str, torch.Tensor]:
        return {
            "labels": torch.from_numpy(self.label_mask().labels.astype(np.int64)),
            "teeth_mask": torch.from_numpy(self.teeth_mask.astype(np.int64)),
            "plaque_mask": torch.from_numpy(self.plaque_mask.astype(np.int64)),
            "teeth_boundary": torch.from_numpy(self.teeth_boundary.astype(np.float32)),
            "plaque_boundary": torch.from_numpy(self.plaque_boundary.astype(np.float32)),
        }


@dataclass(frozen=True)
class SampleRecord:
    """
    One loaded sample.

    Attributes:
        id (str): File stem
        image (torch.Tensor): float32 [3, H, W] in [0, 1]
        supervision (SupervisionPack): Derived supervision maps
    """

    id: str
    image: torch.Tensor
    supervision: SupervisionPack


@dataclass(frozen=True)
class DatasetSplit:
    """Sample ids of the train/val/test splits."""

    train: List[str]
    val: List[str]
    test: List[str]

    def validate(self, all_ids: Optional[Sequence[str]] = None) -> None:
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DatasetError("Dataset splits are not disjoint")
        if all_ids is not None and set().union(*sets) != set(all_ids):
            raise DatasetError("Dataset splits do not cover the full sample set")


def read_label_mask(path: Path) -> LabelMask:
    """
    Decode an 8-bit single-channel mask PNG. Palettes are ignored; raw indices are used.

    Args:
        path (Path): Mask file

    Returns:
        LabelMask: Validated label mask

    Raises:
        DatasetError: If the file is unreadable, multi-channel or holds values outside {0,1,2}
    """
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise DatasetError(f"Mask {path} must be single-channel 8-bit, got mode {img.mode}")
            labels = np.array(img)
    except OSError as e:
        raise DatasetError(f"Cannot read mask {path}: {e}") from e

    try:
        return LabelMask(labels)
    except DatasetError as e:
        raise DatasetError(f"Invalid mask {path}: {e}") from e


def write_label_mask(path: Path, labels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)
    return path


def read_image(path: Path) -> np.ndarray:
    """Read an image as uint8 RGB [H, W, 3]."""
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"))
    except OSError as e:
        raise DatasetError(f"Cannot read image {path}: {e}") from e


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 [H, W, 3] -> float32 [3, H, W] divided by 255."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float() / 255.0


def load_image_tensor(path: Path, input_size: int) -> torch.Tensor:
    """Read one image and resize it to the model input the same way training samples are."""
    return image_to_tensor(_resize(read_image(path), input_size, Image.BILINEAR))


def separate_channels(mask: LabelMask) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split a label mask into binary teeth and plaque maps.

    Args:
        mask (LabelMask): 3-class label mask

    Returns:
        Tuple[np.ndarray, np.ndarray]: (Y_t, Y_p) as uint8 {0, 1}
    """
    labels = mask.labels
    return (labels == TEETH).astype(np.uint8), (labels == PLAQUE).astype(np.uint8)


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """
    One-pixel inner boundary of a binary mask.

    A set pixel is on the boundary when one of its 4-neighbours is unset or
    falls outside the image.

    Args:
        mask (np.ndarray): Binary map [H, W]

    Returns:
        np.ndarray: uint8 boundary map, a subset of ``mask``
    """
    inside = np.asarray(mask).astype(bool)
    padded = np.pad(inside, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return (inside & ~interior).astype(np.uint8)


def canny_boundary(mask: np.ndarray) -> np.ndarray:
    """
    Canny edges of a binary mask (0/255 input, thresholds 100/200), restricted to the mask.
    """
    binary = np.asarray(mask).astype(bool)
    edges = cv2.Canny(binary.astype(np.uint8) * 255, CANNY_LOW_THRESHOLD, CANNY_HIGH_THRESHOLD)
    return ((edges > 0) & binary).astype(np.uint8)


def boundary_operator(name: str):
    if name == "neighbor":
        return extract_boundary
    if name == "canny":
        return canny_boundary
    raise DatasetError(f"Unknown boundary operator: {name}")


def build_supervision(mask: LabelMask, boundary_op: str = "neighbor") -> SupervisionPack:
    """
    Derive the four supervision maps of a label mask.

    Args:
        mask (LabelMask): 3-class label mask
        boundary_op (str): 'neighbor' or 'canny'

    Returns:
        SupervisionPack: Y_t, Y_p, Y_t^e, Y_p^e
    """
    op = boundary_operator(boundary_op)
    teeth, plaque = separate_channels(mask)
    return SupervisionPack(
        teeth_mask=teeth,
        plaque_mask=plaque,
        teeth_boundary=op(teeth),
        plaque_boundary=op(plaque),
    )


def augment_flip(record: SampleRecord, horizontal: bool, vertical: bool) -> SampleRecord:
    """
    Flip the image and every supervision map identically.

    Args:
        record (SampleRecord): Input sample
        horizontal (bool): Mirror left-right
        vertical (bool): Mirror top-bottom

    Returns:
        SampleRecord: Flipped copy (the input itself when neither flag is set)
    """
    if not horizontal and not vertical:
        return record

    image_dims = [d for d, on in ((2, horizontal), (1, vertical)) if on]
    map_axes = tuple(a for a, on in ((1, horizontal), (0, vertical)) if on)

    def flip_map(values: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.flip(values, axis=map_axes))

    sup = record.supervision
    return replace(
        record,
        image=torch.flip(record.image, dims=image_dims),
        supervision=SupervisionPack(
            teeth_mask=flip_map(sup.teeth_mask),
            plaque_mask=flip_map(sup.plaque_mask),
            teeth_boundary=flip_map(sup.teeth_boundary),
            plaque_boundary=flip_map(sup.plaque_boundary),
        ),
    )


def sample_seed(seed: int, epoch: int, sample_id: str) -> int:
    """Stable 64-bit seed for one sample in one epoch, independent of worker layout."""
    digest = hashlib.sha256(f"{seed}:{epoch}:{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def flip_decision(seed: int, epoch: int, sample_id: str, probability: float = 0.5) -> Tuple[bool, bool]:
    rng = np.random.default_rng(sample_seed(seed, epoch, sample_id))
    horizontal, vertical = rng.random(2) < probability
    return bool(horizontal), bool(vertical)


def _resize(array: np.ndarray, size: int, resample: int) -> np.ndarray:
    if array.shape[0] == size and array.shape[1] == size:
        return array
    return np.array(Image.fromarray(array).resize((size, size), resample=resample))


def _read_boundary(path: Path, input_size: int) -> np.ndarray:
    labels = read_label_mask(path).labels
    labels = _resize(labels, input_size, Image.NEAREST)
    if labels.max(initial=0) > 1:
        raise DatasetError(f"Boundary map {path} is not binary")
    return labels


def load_sample(
    split_dir: Path,
    stem: str,
    input_size: int,
    boundary_op: str = "neighbor",
    use_precomputed_boundaries: bool = False,
) -> SampleRecord:
    """
    Load one image/mask pair and derive its supervision.

    Raises:
        DatasetError: If the mask is missing or invalid, or sizes disagree
    """
    image_path = split_dir / "images" / f"{stem}.png"
    mask_path = split_dir / "masks" / f"{stem}.png"
    if not mask_path.exists():
        raise DatasetError(f"Missing mask for image '{stem}': expected {mask_path}")

    image = read_image(image_path)
    mask = read_label_mask(mask_path)
    if image.shape[:2] != mask.labels.shape:
        raise DatasetError(
            f"Image and mask sizes differ for '{stem}': {image.shape[:2]} vs {mask.labels.shape}"
        )

    image = _resize(image, input_size, Image.BILINEAR)
    mask = LabelMask(_resize(mask.labels, input_size, Image.NEAREST))
    if image.shape[:2] != (input_size, input_size) or mask.labels.shape != (input_size, input_size):
        raise DatasetError(f"Sample '{stem}' does not match input size {input_size}")

    supervision = build_supervision(mask, boundary_op)
    if use_precomputed_boundaries:
        teeth_path = split_dir / "boundaries" / "teeth" / f"{stem}.png"
        plaque_path = split_dir / "boundaries" / "plaque" / f"{stem}.png"
        if teeth_path.exists() and plaque_path.exists():
            supervision = replace(
                supervision,
                teeth_boundary=_read_boundary(teeth_path, input_size),
                plaque_boundary=_read_boundary(plaque_path, input_size),
            )

    try:
        supervision.validate()
    except DatasetError as e:
        raise DatasetError(f"Sample '{stem}': {e}") from e

    return SampleRecord(id=stem, image=image_to_tensor(image), supervision=supervision)


def list_sample_ids(root: Path, split_name: str) -> List[str]:
    """
    Sorted image stems of a split.

    Raises:
        DatasetError: If the split name is unknown or the split directory is missing
    """
    if split_name not in SPLITS:
        raise DatasetError(f"Unknown split '{split_name}', expected one of {SPLITS}")
    split_dir = Path(root) / split_name
    if not split_dir.is_dir():
        raise DatasetError(f"Split directory not found: {split_dir}")
    images_dir = split_dir / "images"
    if not images_dir.is_dir():
        return []
    return sorted(p.stem for p in images_dir.glob("*.png"))


def load_dataset(
    root: Path,
    split_name: str,
    input_size: int = 128,
    boundary_op: str = "neighbor",
    use_precomputed_boundaries: bool = False,
    num_workers: int = 0,
) -> List[SampleRecord]:
    """
    Load every sample of a split in lexicographic id order.

    Args:
        root (Path): Dataset root
        split_name (str): 'train', 'val' or 'test'
        input_size (int): Side length samples are resized to
        boundary_op (str): Boundary operator for Y^e
        use_precomputed_boundaries (bool): Prefer boundary PNGs from prepare-boundaries
        num_workers (int): Threads used for decoding

    Returns:
        List[SampleRecord]: Loaded records

    Raises:
        DatasetError: On any invalid or incomplete sample
    """
    split_dir = Path(root) / split_name
    stems = list_sample_ids(root, split_name)

    def load(stem: str) -> SampleRecord:
        return load_sample(split_dir, stem, input_size, boundary_op, use_precomputed_boundaries)

    if num_workers > 1 and len(stems) > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            records = list(pool.map(load, stems))
    else:
        records = [load(stem) for stem in stems]

    logger.info("Loaded %d %s samples from %s", len(records), split_name, root)
    return records


class PlaqueSegmentationDataset(Dataset):
    """
    Torch dataset over loaded records with on-the-fly flip augmentation.

    Flip decisions depend only on (seed, epoch, sample id), so the augmented
    stream does not change with the number of DataLoader workers.
    """

    def __init__(self, records: Sequence[SampleRecord], augment: bool = False, seed: int = 0):
        self.records = list(records)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, object]:
        record = self.records[index]
        if self.augment:
            horizontal, vertical = flip_decision(self.seed, self.epoch, record.id)
            record = augment_flip(record, horizontal, vertical)
        item = {"id": record.id, "image": record.image}
        item.update(record.supervision.to_tensors())
        return item


def severity_level(pr: float) -> int:
    """
    Severity bin of a plaque ratio: 0 for no plaque, then 1..10 for (0,10%], ..., (90%,100%].
    """
    if pr <= 0:
        return 0
    for level, edge in enumerate(SEVERITY_EDGES, start=1):
        if pr <= edge + 1e-12:
            return level
    return len(SEVERITY_EDGES)


def describe_dataset(records: Sequence[SampleRecord]) -> Dict[str, object]:
    """Count samples per severity level and the share of plaque-free samples."""
    from src.metrics import pixel_ratio

    levels = [0] * (len(SEVERITY_EDGES) + 1)
    for record in records:
        levels[severity_level(pixel_ratio(record.supervision.label_mask()))] += 1
    total = len(records)
    return {
        "samples": total,
        "severity_levels": levels,
        "plaque_free_fraction": levels[0] / total if total else 0.0,
    }


def create_split(ids: Sequence[str], seed: int = 0, ratios: Tuple[int, int, int] = (8, 1, 1)) -> DatasetSplit:
    """
    Shuffle ids and divide them by ``ratios`` (8:1:1 by default).

    Args:
        ids (Sequence[str]): Sample ids
        seed (int): Shuffle seed
        ratios (Tuple[int, int, int]): Train/val/test proportions

    Returns:
        DatasetSplit: Disjoint splits covering every id
    """
    order = sorted(ids)
    np.random.default_rng(seed).shuffle(order)
    total = sum(ratios)
    n_train = len(order) * ratios[0] // total
    n_val = len(order) * ratios[1] // total
    split = DatasetSplit(
        train=sorted(order[:n_train]),
        val=sorted(order[n_train:n_train + n_val]),
        test=sorted(order[n_train + n_val:]),
    )
    split.validate(order)
    return split


def import_flat_dataset(
    source: Path,
    root: Path,
    seed: int = 0,
    foreground_label: int = PLAQUE,
    threshold: int = 127,
) -> DatasetSplit:
    """
    Convert a flat ``images/`` + ``masks/`` dataset with binary masks into the split layout.

    Mask pixels above ``threshold`` become ``foreground_label``; the rest background.
    Image extensions other than PNG are re-encoded.

    Args:
        source (Path): Directory holding images/ and masks/
        root (Path): Output dataset root
        seed (int): Split seed
        foreground_label (int): Label assigned to foreground pixels
        threshold (int): Binarization threshold

    Returns:
        DatasetSplit: The split that was written
    """
    source, root = Path(source), Path(root)
    images = {p.stem: p for p in sorted((source / "images").glob("*")) if p.is_file()}
    masks = {p.stem: p for p in sorted((source / "masks").glob("*")) if p.is_file()}
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DatasetError(f"Missing masks for images: {missing}")

    split = create_split(list(images), seed=seed)
    for split_name in SPLITS:
        for stem in getattr(split, split_name):
            out_dir = root / split_name
            (out_dir / "images").mkdir(parents=True, exist_ok=True)
            image_out = out_dir / "images" / f"{stem}.png"
            if images[stem].suffix.lower() == ".png":
                shutil.copyfile(images[stem], image_out)
            else:
                Image.fromarray(read_image(images[stem])).save(image_out)

            with Image.open(masks[stem]) as img:
                values = np.array(img.convert("L"))
            labels = np.where(values > threshold, foreground_label, BACKGROUND).astype(np.uint8)
            write_label_mask(out_dir / "masks" / f"{stem}.png", labels)

    logger.info(
        "Imported %d samples into %s (%d/%d/%d)",
        len(images), root, len(split.train), len(split.val), len(split.test),
    )
    return split
