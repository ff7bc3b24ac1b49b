"""Shared fixtures: tiny architectures and synthetic datasets."""

import pytest
import torch

from src.data_loader import DataConfig
from src.sdnet import ModelConfig
from src.synthetic_data import synthetic_records, write_synthetic_dataset
from src.trainer import TrainConfig

TINY_SIZE = 32


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        input_size=TINY_SIZE,
        encoder_channels=(4, 8, 16, 32, 64),
        embedding_dim=8,
        projection_hidden=(16, 8),
    )


@pytest.fixture
def synthetic_root(tmp_path):
    root = tmp_path / "dataset"
    write_synthetic_dataset(root, counts={"train": 4, "val": 2, "test": 2}, size=TINY_SIZE, seed=0)
    return root


@pytest.fixture
def tiny_records():
    return synthetic_records(4, size=TINY_SIZE, seed=0)


@pytest.fixture
def tiny_train_config(tiny_model_config, synthetic_root):
    return TrainConfig(
        name="tiny",
        dataset_profile="custom",
        epochs=2,
        lr_step_epochs=1,
        batch_size=2,
        lr0=1e-3,
        model=tiny_model_config,
        data=DataConfig(root=str(synthetic_root)),
        device="cpu",
    )


@pytest.fixture
def make_batch():
    """Collate SampleRecords into a training batch without augmentation."""

    def collate(records):
        batch = {"image": torch.stack([r.image for r in records])}
        tensors = [r.supervision.to_tensors() for r in records]
        for key in tensors[0]:
            batch[key] = torch.stack([t[key] for t in tensors])
        return batch

    return collate


@pytest.fixture
def runs_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("SDSEG_RUNS_DIR", str(root))
    return root
