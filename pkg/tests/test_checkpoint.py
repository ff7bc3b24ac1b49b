import json

import pytest
import torch

from src.checkpoint import (
    SIDECAR_FILE,
    WEIGHTS_FILE,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from src.errors import ConfigurationError
from src.inference import predict
from src.sdnet import SDNet, build_model, is_auxiliary_key
from src.trainer import build_optimizer, train_step


@pytest.fixture
def trained(tiny_train_config, tiny_records, make_batch):
    model = build_model(tiny_train_config.model, seed=0)
    optimizer = build_optimizer(model.parameters(), tiny_train_config)
    train_step(model, optimizer, make_batch(tiny_records[:2]), tiny_train_config)
    return model, optimizer


def test_round_trip_is_bit_exact(tmp_path, tiny_train_config, trained):
    model, optimizer = trained
    saved = save_checkpoint(tmp_path / "ckpt-0", model, optimizer, tiny_train_config, 0, 1, {"val": None})

    restored = SDNet(tiny_train_config.model)
    restored_optimizer = build_optimizer(restored.parameters(), tiny_train_config)
    checkpoint, _ = load_checkpoint(saved.path, model=restored, optimizer=restored_optimizer)

    original, loaded = model.state_dict(), restored.state_dict()
    assert all(torch.equal(original[key], loaded[key]) for key in original)
    first_param = next(iter(restored_optimizer.state.values()))
    assert torch.equal(first_param["exp_avg"], next(iter(optimizer.state.values()))["exp_avg"])
    assert checkpoint.epoch == 0 and checkpoint.global_step == 1
    assert checkpoint.model_config == tiny_train_config.model


def test_sidecar_contents(tmp_path, tiny_train_config, trained):
    model, optimizer = trained
    save_checkpoint(tmp_path / "ckpt-3", model, optimizer, tiny_train_config, 3, 12)
    sidecar = json.loads((tmp_path / "ckpt-3" / SIDECAR_FILE).read_text())
    assert sidecar["format_version"] == 1
    assert sidecar["components"] == ["CCM", "SCM", "SD"]
    assert sidecar["train_config"]["name"] == "tiny"
    assert sidecar["model_config"]["encoder_channels"] == [4, 8, 16, 32, 64]
    assert not (tmp_path / "ckpt-3.tmp").exists()


def test_stripped_auxiliary_heads_leave_predictions_unchanged(tmp_path, tiny_train_config, trained):
    model, optimizer = trained
    path = save_checkpoint(tmp_path / "ckpt-0", model, optimizer, tiny_train_config, 0, 1).path
    images = torch.rand(2, 3, 32, 32)
    assert len(model.projections) == 2
    expected = [p.label.labels for p in predict(model, images)]

    state = torch.load(path / WEIGHTS_FILE, weights_only=True)
    torch.save({k: v for k, v in state.items() if not is_auxiliary_key(k)}, path / WEIGHTS_FILE)
    _, stripped = load_checkpoint(path, inference_only=True)

    assert len(stripped.projections) == 0
    for before, after in zip(expected, predict(stripped, images)):
        assert (before == after.label.labels).all()


def test_unsupported_format_rejected(tmp_path, tiny_train_config, trained):
    model, optimizer = trained
    path = save_checkpoint(tmp_path / "ckpt-0", model, optimizer, tiny_train_config, 0, 1).path
    sidecar = json.loads((path / SIDECAR_FILE).read_text())
    sidecar["format_version"] = 99
    (path / SIDECAR_FILE).write_text(json.dumps(sidecar))
    with pytest.raises(ConfigurationError):
        read_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nowhere")
