"""
Training Module

Optimization loop of the segmentation network: Adam with a step learning-rate
schedule, on-the-fly flip augmentation, per-epoch validation with best-model
selection on plaque Dice, checkpointing with resume, and a JSON-lines run log.
"""

import json
import logging
import math
import random
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.checkpoint import Checkpoint, copy_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from src.data_loader import DataConfig, PlaqueSegmentationDataset, load_dataset
from src.errors import ConfigurationError, DatasetError, NumericalError
from src.inference import evaluate_model
from src.losses import LossBreakdown, LossWeights, total_loss
from src.metrics import EVAL_MODES
from src.sdnet import COMPONENTS, ModelConfig, SDNet, build_model, validate_components

logger = logging.getLogger(__name__)

DATASET_PROFILES = ("sdpseg_s", "sdpseg_c", "custom")
PROFILE_DEFAULTS = {
    "sdpseg_s": {"epochs": 120, "lr_step_epochs": 40},
    "sdpseg_c": {"epochs": 300, "lr_step_epochs": 100},
}

# Offsets deriving the independent random streams from the single run seed.
INIT_SEED_OFFSET = 0
DATA_ORDER_SEED_OFFSET = 1_000
AUGMENT_SEED_OFFSET = 2_000

TARGET_KEYS = ("labels", "teeth_mask", "plaque_mask", "teeth_boundary", "plaque_boundary")
LOG_FILE = "train_log.jsonl"
BEST_DIR = "best"
SELECTION_METRIC = "dice_plaque"


@dataclass(frozen=True)
class TrainConfig:
    """
    Training run configuration. Field names are the keys of the YAML run files.

    Attributes:
        name (str): Run name; checkpoints go under <runs>/<name>
        dataset_profile (str): sdpseg_s, sdpseg_c or custom
        epochs (int): Total epochs
        batch_size (int): Samples per step
        lr0 (float): Initial learning rate
        lr_decay_factor (float): Multiplier applied every lr_step_epochs
        lr_step_epochs (int): Epochs between decays
        adam_beta1 (float): Adam first-moment decay
        adam_beta2 (float): Adam second-moment decay
        adam_eps (float): Adam epsilon
        loss_weights (LossWeights): Loss hyperparameters
        seed (int): Run seed
        deterministic (bool): Request deterministic kernels
        ablation (FrozenSet[str]): Enabled components among SD, CCM, SCM
        model (ModelConfig): Architecture
        data (DataConfig): Dataset settings
        max_steps (Optional[int]): Stop after this many optimizer steps
        eval_mode (str): 'fused' or 'branch' scoring during validation
        keep_checkpoints (int): Most recent epoch checkpoints kept on disk
        device (str): 'auto', 'cpu' or a torch device string
    """

    name: str = "sdnet"
    dataset_profile: str = "sdpseg_s"
    epochs: int = 120
    batch_size: int = 16
    lr0: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_step_epochs: int = 40
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    ablation: FrozenSet[str] = COMPONENTS
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    max_steps: Optional[int] = None
    eval_mode: str = "fused"
    keep_checkpoints: int = 1
    device: str = "auto"

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "TrainConfig":
        """Configuration with the epoch/decay defaults of a dataset profile."""
        values = dict(PROFILE_DEFAULTS.get(profile, {}))
        values.update(overrides)
        return cls(dataset_profile=profile, **values)

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If any field is out of range
        """
        if self.dataset_profile not in DATASET_PROFILES:
            raise ConfigurationError(f"dataset_profile must be one of {DATASET_PROFILES}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1 or self.lr_step_epochs < 1:
            raise ConfigurationError("epochs and lr_step_epochs must be >= 1")
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1]")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"eval_mode must be one of {EVAL_MODES}")
        if self.keep_checkpoints < 1:
            raise ConfigurationError("keep_checkpoints must be >= 1")
        validate_components(self.ablation)
        self.model.validate()
        self.loss_weights.validate()
        try:
            self.data.validate()
        except DatasetError as e:
            raise ConfigurationError(str(e)) from e


class TrainingLog:
    """
    JSON-lines run log. Records carry no wall-clock fields, so deterministic
    runs write identical files.
    """

    def __init__(self, path: Path, resume_epoch: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_epoch is None:
            self.path.write_text("")
        else:
            self._truncate_after(resume_epoch)

    def _truncate_after(self, epoch: int) -> None:
        if not self.path.exists():
            self.path.write_text("")
            return
        kept = [line for line in self.path.read_text().splitlines() if json.loads(line)["epoch"] <= epoch]
        self.path.write_text("".join(line + "\n" for line in kept))

    def write(self, record: Mapping[str, object]) -> None:
        with open(self.path, "a") as file:
            file.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, object]]:
        return [json.loads(line) for line in self.path.read_text().splitlines()]


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    """Seed every RNG and, if requested, switch torch to deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)
    torch.backends.cudnn.deterministic = deterministic
    torch.backends.cudnn.benchmark = not deterministic
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """
    Step schedule: lr0 * decay ** (epoch // lr_step_epochs).

    Args:
        config (TrainConfig): Training configuration
        epoch (int): Zero-based epoch

    Returns:
        float: Learning rate for the epoch

    Raises:
        ValueError: If the epoch lies outside [0, epochs)
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"Epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_step_epochs)


def build_optimizer(parameters: Iterable[torch.nn.Parameter], config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        parameters,
        lr=config.lr0,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_gradients(model: torch.nn.Module) -> None:
    for name, param in model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NumericalError(f"Non-finite gradient for parameter '{name}'", term=name)


def train_step(
    model: SDNet,
    optimizer: torch.optim.Optimizer,
    batch: Mapping[str, torch.Tensor],
    config: TrainConfig,
) -> LossBreakdown:
    """
    One Adam update on the batch-mean total loss.

    Weights and optimizer moments are updated in place. Components missing
    from ``config.ablation`` contribute nothing to the loss or the gradients.

    Args:
        model (SDNet): Model to update
        optimizer (Optimizer): Adam optimizer over the model parameters
        batch (Mapping): Collated batch with 'image' and the supervision keys
        config (TrainConfig): Training configuration

    Returns:
        LossBreakdown: Loss terms of this step

    Raises:
        NumericalError: Naming the non-finite loss term or gradient
    """
    device = next(model.parameters()).device
    images = batch["image"].to(device)
    targets = {key: batch[key].to(device) for key in TARGET_KEYS}

    model.train()
    optimizer.zero_grad(set_to_none=True)
    forward = model(images, with_aux=True, ccm_stop_gradient=config.loss_weights.ccm_stop_gradient)
    breakdown = total_loss(forward, targets, config.loss_weights, config.ablation)
    breakdown.total.backward()
    _check_gradients(model)
    optimizer.step()
    return breakdown


def validate_model(model: SDNet, records, config: TrainConfig) -> Optional[Dict[str, float]]:
    """Aggregate validation metrics, or None when there is no validation data."""
    if not records:
        return None
    report = evaluate_model(model, records, eval_mode=config.eval_mode, batch_size=config.batch_size)
    return report.aggregate


def train_loop(
    config: TrainConfig,
    run_dir: Path,
    root: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    until_epoch: Optional[int] = None,
    progress: bool = True,
) -> Checkpoint:
    """
    Train for ``config.epochs`` epochs and return the best validation checkpoint.

    The learning rate is set at each epoch boundary before the first step.
    Each epoch ends with validation, a ``ckpt-<epoch>`` checkpoint and, when
    plaque Dice improves (or there is no validation split), a copy to ``best``.

    Args:
        config (TrainConfig): Training configuration
        run_dir (Path): Output directory for log and checkpoints
        root (Optional[Path]): Dataset root (defaults to config.data.root)
        resume_from (Optional[Path]): Checkpoint to continue from
        until_epoch (Optional[int]): Stop after this epoch (for staged runs)
        progress (bool): Show a progress bar

    Returns:
        Checkpoint: The best checkpoint

    Raises:
        DatasetError: If the training split is missing or empty
        NumericalError: On non-finite losses or gradients
    """
    config.validate()
    set_deterministic(config.seed, config.deterministic)
    device = resolve_device(config.device)
    root = Path(root or config.data.root)
    run_dir = Path(run_dir)

    load_kwargs = dict(
        input_size=config.model.input_size,
        boundary_op=config.data.boundary_op,
        use_precomputed_boundaries=config.data.use_precomputed_boundaries,
        num_workers=config.data.num_workers,
    )
    train_records = load_dataset(root, "train", **load_kwargs)
    if not train_records:
        raise DatasetError(f"No training samples under {root / 'train'}")
    val_records = load_dataset(root, "val", **load_kwargs) if (root / "val").is_dir() else []

    dataset = PlaqueSegmentationDataset(
        train_records, augment=config.data.augment, seed=config.seed + AUGMENT_SEED_OFFSET
    )
    model = build_model(config.model, seed=config.seed + INIT_SEED_OFFSET, components=config.ablation)
    model.to(device)
    optimizer = build_optimizer(model.parameters(), config)

    start_epoch, global_step = 0, 0
    best_score, best_epoch = -math.inf, None
    if resume_from is not None:
        checkpoint, _ = load_checkpoint(resume_from, model=model, optimizer=optimizer, map_location=str(device))
        start_epoch, global_step = checkpoint.epoch + 1, checkpoint.global_step
        best_score = checkpoint.metrics.get("best_score", best_score)
        best_epoch = checkpoint.metrics.get("best_epoch")
        logger.info("Resuming %s from epoch %d (step %d)", config.name, start_epoch, global_step)

    log = TrainingLog(run_dir / LOG_FILE, resume_epoch=None if resume_from is None else start_epoch - 1)

    best = None
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(config, epoch)
        set_learning_rate(optimizer, lr)
        dataset.set_epoch(epoch)
        loader = DataLoader(
            dataset,
            batch_size=config.batch_size,
            shuffle=True,
            num_workers=config.data.num_workers,
            generator=torch.Generator().manual_seed(config.seed + DATA_ORDER_SEED_OFFSET + epoch),
        )

        reached_max = False
        for batch in tqdm(loader, desc=f"epoch {epoch}", disable=not progress, leave=False):
            breakdown = train_step(model, optimizer, batch, config)
            global_step += 1
            log.write({"type": "step", "epoch": epoch, "step": global_step, "lr": lr, **breakdown.as_dict()})
            if config.max_steps is not None and global_step >= config.max_steps:
                reached_max = True
                break

        val_metrics = validate_model(model, val_records, config)
        score = None if val_metrics is None else val_metrics[SELECTION_METRIC]
        improved = score is None or score > best_score
        if improved:
            best_score = -math.inf if score is None else score
            best_epoch = epoch
        log.write({"type": "epoch", "epoch": epoch, "step": global_step, "lr": lr, "val": val_metrics})

        metrics = {"val": val_metrics, "best_score": best_score, "best_epoch": best_epoch}
        checkpoint = save_checkpoint(
            run_dir / f"ckpt-{epoch}", model, optimizer, config, epoch, global_step, metrics
        )
        _prune_checkpoints(run_dir, epoch, config.keep_checkpoints)
        if improved:
            copy_checkpoint(checkpoint.path, run_dir / BEST_DIR)
            best = replace(checkpoint, path=run_dir / BEST_DIR)

        logger.info("Epoch %d done: step %d, lr %.2e, val %s", epoch, global_step, lr, val_metrics)
        if reached_max or (until_epoch is not None and epoch >= until_epoch):
            break

    if best is None:
        best = read_checkpoint(run_dir / BEST_DIR)
    return best


def _prune_checkpoints(run_dir: Path, epoch: int, keep: int) -> None:
    for stale in run_dir.glob("ckpt-*"):
        suffix = stale.name[len("ckpt-"):]
        if suffix.isdigit() and int(suffix) <= epoch - keep:
            shutil.rmtree(stale)
