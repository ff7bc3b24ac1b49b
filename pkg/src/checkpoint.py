"""
Checkpoint Module

A checkpoint is a directory holding the model weights (``weights.pt``), the
optimizer state (``optimizer.pt``) and a JSON sidecar (``checkpoint.json``)
with the configuration, seed, epoch and metric snapshot needed to rebuild
the model or resume training.
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Optional, Tuple

import torch

from src.errors import ConfigurationError
from src.sdnet import COMPONENTS, ModelConfig, SDNet, is_auxiliary_key

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.pt"
OPTIMIZER_FILE = "optimizer.pt"
SIDECAR_FILE = "checkpoint.json"
INFERENCE_COMPONENTS = frozenset({"SD"})


@dataclass
class Checkpoint:
    """
    Metadata of a saved checkpoint.

    Attributes:
        path (Path): Checkpoint directory
        epoch (int): Last completed epoch
        global_step (int): Optimizer steps taken
        seed (int): Run seed
        components (FrozenSet[str]): Ablation components the model was built with
        model_config (ModelConfig): Architecture
        train_config (Dict): Serialized TrainConfig snapshot
        metrics (Dict): Validation metrics and best-so-far bookkeeping
    """

    path: Path
    epoch: int
    global_step: int
    seed: int
    components: FrozenSet[str]
    model_config: ModelConfig
    train_config: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def weights_path(self) -> Path:
        return self.path / WEIGHTS_FILE

    @property
    def optimizer_path(self) -> Path:
        return self.path / OPTIMIZER_FILE


def save_checkpoint(
    path: Path,
    model: SDNet,
    optimizer: Optional[torch.optim.Optimizer],
    train_config: Any,
    epoch: int,
    global_step: int,
    metrics: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """
    Write a checkpoint directory, replacing any previous one at ``path``.

    Args:
        path (Path): Target directory, e.g. runs/<name>/ckpt-<epoch>
        model (SDNet): Model whose weights are saved
        optimizer (Optional[Optimizer]): Optimizer whose moments are saved
        train_config: TrainConfig snapshot
        epoch (int): Completed epoch
        global_step (int): Optimizer steps taken
        metrics (Optional[Dict]): Metric snapshot

    Returns:
        Checkpoint: Metadata of the written checkpoint
    """
    from src.config_loader import config_to_dict

    path = Path(path)
    staging = path.with_name(path.name + ".tmp")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    torch.save(model.state_dict(), staging / WEIGHTS_FILE)
    if optimizer is not None:
        torch.save(optimizer.state_dict(), staging / OPTIMIZER_FILE)

    checkpoint = Checkpoint(
        path=path,
        epoch=epoch,
        global_step=global_step,
        seed=train_config.seed,
        components=model.components,
        model_config=model.config,
        train_config=config_to_dict(train_config),
        metrics=dict(metrics or {}),
    )
    sidecar = {
        "format_version": FORMAT_VERSION,
        "epoch": epoch,
        "global_step": global_step,
        "seed": checkpoint.seed,
        "components": sorted(checkpoint.components),
        "model_config": config_to_dict(model.config),
        "train_config": checkpoint.train_config,
        "weights": WEIGHTS_FILE,
        "optimizer_state": OPTIMIZER_FILE if optimizer is not None else None,
        "metrics": checkpoint.metrics,
    }
    with open(staging / SIDECAR_FILE, "w") as file:
        json.dump(sidecar, file, indent=2, sort_keys=True)

    if path.exists():
        shutil.rmtree(path)
    os.replace(staging, path)
    logger.info("Saved checkpoint %s (epoch %d, step %d)", path, epoch, global_step)
    return checkpoint


def read_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint sidecar.

    Raises:
        FileNotFoundError: If the sidecar is missing
        ConfigurationError: If the format version is unsupported
    """
    from src.config_loader import _build_dataclass

    path = Path(path)
    sidecar_path = path / SIDECAR_FILE
    if not sidecar_path.exists():
        raise FileNotFoundError(f"Checkpoint sidecar not found: {sidecar_path}")
    with open(sidecar_path, "r") as file:
        sidecar = json.load(file)

    if sidecar.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"Unsupported checkpoint format {sidecar.get('format_version')} in {path}"
        )

    model_config = _build_dataclass(ModelConfig, sidecar["model_config"], prefix="model.")
    return Checkpoint(
        path=path,
        epoch=sidecar["epoch"],
        global_step=sidecar["global_step"],
        seed=sidecar["seed"],
        components=frozenset(sidecar.get("components", COMPONENTS)),
        model_config=model_config,
        train_config=sidecar.get("train_config", {}),
        metrics=sidecar.get("metrics", {}),
    )


def load_checkpoint(
    path: Path,
    model: Optional[SDNet] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    inference_only: bool = False,
    map_location: str = "cpu",
) -> Tuple[Checkpoint, SDNet]:
    """
    Restore a model (and optionally optimizer state) from a checkpoint.

    With ``inference_only`` the model is built without boundary and projection
    heads and their weights are ignored, so checkpoints stripped of those
    weights load as well.

    Args:
        path (Path): Checkpoint directory
        model (Optional[SDNet]): Existing model to load into; built from the sidecar if None
        optimizer (Optional[Optimizer]): Optimizer to restore
        inference_only (bool): Skip training-only heads
        map_location (str): torch.load device mapping

    Returns:
        Tuple[Checkpoint, SDNet]: Metadata and the loaded model
    """
    checkpoint = read_checkpoint(path)

    if model is None:
        components = checkpoint.components
        if inference_only and "SD" in components:
            components = INFERENCE_COMPONENTS
        model = SDNet(checkpoint.model_config, components)

    state = torch.load(checkpoint.weights_path, map_location=map_location, weights_only=True)
    if inference_only:
        state = {key: value for key, value in state.items() if not is_auxiliary_key(key)}
        expected = {key for key in model.state_dict() if not is_auxiliary_key(key)}
        missing = expected - set(state)
        if missing:
            raise ConfigurationError(f"Checkpoint {path} lacks weights: {sorted(missing)[:5]}")
        model.load_state_dict(state, strict=False)
    else:
        model.load_state_dict(state)

    if optimizer is not None:
        if not checkpoint.optimizer_path.exists():
            raise FileNotFoundError(f"Optimizer state not found: {checkpoint.optimizer_path}")
        optimizer.load_state_dict(
            torch.load(checkpoint.optimizer_path, map_location=map_location, weights_only=True)
        )

    return checkpoint, model


def copy_checkpoint(source: Path, target: Path) -> Path:
    target = Path(target)
    if target.exists():
        shutil.rmtree(target)
    shutil.copytree(source, target)
    return target
