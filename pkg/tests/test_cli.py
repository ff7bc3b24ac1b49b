import json
from pathlib import Path

import pandas as pd
import pytest

from main import main
from src.data_loader import read_label_mask, separate_channels
from src.run_manifest import MANIFEST_FILE, read_manifest

SMOKE_PRESET = Path(__file__).resolve().parent.parent / "configs" / "presets" / "smoke.yaml"


@pytest.fixture
def tiny_config(tmp_path, synthetic_root):
    path = tmp_path / "tiny.yaml"
    path.write_text(
        f"extends: {SMOKE_PRESET}\n"
        "name: cli-tiny\n"
        "epochs: 1\n"
        "lr_step_epochs: 1\n"
        "batch_size: 2\n"
        "model:\n"
        "  input_size: 32\n"
        "  encoder_channels: [4, 8, 16, 32, 64]\n"
        "  embedding_dim: 8\n"
        "  projection_hidden: [16, 8]\n"
        f"data:\n  root: \"{synthetic_root}\"\n"
    )
    return path


@pytest.fixture
def trained_checkpoint(runs_root, tiny_config):
    assert main(["train", "--config", str(tiny_config)]) == 0
    return runs_root / "cli-tiny" / "best"


def test_presets_lists_groups(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    assert "ablation:" in out
    assert "  sd+scm" in out
    assert "  alpha-0.6" in out


def test_prepare_boundaries_is_idempotent(runs_root, synthetic_root):
    assert main(["prepare-boundaries", "--root", str(synthetic_root)]) == 0
    files = sorted((synthetic_root / "train" / "boundaries").rglob("*.png"))
    assert len(files) == 8
    first = {path: path.read_bytes() for path in files}

    assert main(["prepare-boundaries", "--root", str(synthetic_root)]) == 0
    assert {path: path.read_bytes() for path in files} == first

    for stem in ("train_0000", "train_0003"):
        teeth, plaque = separate_channels(read_label_mask(synthetic_root / "train" / "masks" / f"{stem}.png"))
        teeth_edge = read_label_mask(synthetic_root / "train" / "boundaries" / "teeth" / f"{stem}.png").labels
        plaque_edge = read_label_mask(synthetic_root / "train" / "boundaries" / "plaque" / f"{stem}.png").labels
        assert not (teeth_edge.astype(bool) & ~teeth.astype(bool)).any()
        assert not (plaque_edge.astype(bool) & ~plaque.astype(bool)).any()

    manifest = read_manifest(runs_root / "prepare-boundaries" / MANIFEST_FILE)
    assert manifest.exit_code == 0
    assert manifest.details["samples"] == {"train": 4, "val": 2, "test": 2}


def test_train_writes_checkpoint_and_manifest(runs_root, trained_checkpoint):
    run_dir = runs_root / "cli-tiny"
    assert (trained_checkpoint / "weights.pt").exists()
    manifest = read_manifest(run_dir / MANIFEST_FILE)
    assert manifest.command == "train"
    assert manifest.exit_code == 0
    assert manifest.details["ablation"] == ["CCM", "SCM", "SD"]
    assert len(manifest.config_hash) == 64


def test_train_records_ablation_override(runs_root, tmp_path, tiny_config):
    config = tmp_path / "sd-only.yaml"
    config.write_text(f"extends: {tiny_config}\nablation: [SD]\n")
    assert main(["train", "--config", str(config), "--name", "only-sd"]) == 0
    manifest = read_manifest(runs_root / "only-sd" / MANIFEST_FILE)
    assert manifest.details["ablation"] == ["SD"]


def test_evaluate_writes_reports(trained_checkpoint, tmp_path):
    clinician = tmp_path / "clinician.csv"
    clinician.write_text("id,pr\ntest_0000,0.2\ntest_0001,0.3\n")
    output = tmp_path / "eval"
    code = main([
        "evaluate", "--checkpoint", str(trained_checkpoint), "--split", "test",
        "--clinician-csv", str(clinician), "--output", str(output),
    ])
    assert code == 0

    report = json.loads((output / "report.json").read_text())
    assert {"miou_teeth", "dice_plaque", "pr_percent", "clinician_pr_percent"} <= set(report["aggregate"])
    assert len(pd.read_csv(output / "report.csv")) == 2
    for name in ("dice_per_image.png", "dice_box.png", "pr_scatter.png"):
        assert (output / name).exists()
    assert read_manifest(output / MANIFEST_FILE).details["split"] == "test"


def test_evaluate_incomplete_clinician_csv_exits_with_data_error(trained_checkpoint, tmp_path):
    clinician = tmp_path / "clinician.csv"
    clinician.write_text("id,pr\nnot_an_image,0.2\n")
    output = tmp_path / "eval"
    code = main([
        "evaluate", "--checkpoint", str(trained_checkpoint), "--split", "test",
        "--clinician-csv", str(clinician), "--output", str(output),
    ])
    assert code == 2
    assert not (output / "report.json").exists()
    assert read_manifest(output / MANIFEST_FILE).exit_code == 2


def test_evaluate_default_output_next_to_checkpoint(trained_checkpoint):
    assert main(["evaluate", "--checkpoint", str(trained_checkpoint), "--split", "val"]) == 0
    assert (trained_checkpoint.parent / "eval-val" / "report.json").exists()


def test_predict_single_file_and_directory(trained_checkpoint, synthetic_root, tmp_path):
    image = synthetic_root / "test" / "images" / "test_0000.png"
    assert main(["predict", "--checkpoint", str(trained_checkpoint), "--input", str(image),
                 "--output", str(tmp_path / "one")]) == 0
    assert read_label_mask(tmp_path / "one" / "test_0000.png").labels.shape == (32, 32)

    images = synthetic_root / "train" / "images"
    assert main(["predict", "--checkpoint", str(trained_checkpoint), "--input", str(images),
                 "--output", str(tmp_path / "many"), "--probabilities"]) == 0
    assert len(list((tmp_path / "many").glob("train_*_teeth_prob.png"))) == 4
    assert len(list((tmp_path / "many").glob("train_????.png"))) == 4


def test_predict_reports_unreadable_file(trained_checkpoint, synthetic_root, tmp_path):
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    (inputs / "a.png").write_bytes((synthetic_root / "test" / "images" / "test_0000.png").read_bytes())
    (inputs / "broken.png").write_text("not an image")
    output = tmp_path / "out"

    code = main(["predict", "--checkpoint", str(trained_checkpoint), "--input", str(inputs),
                 "--output", str(output)])
    assert code == 2
    assert (output / "a.png").exists()
    assert read_manifest(output / MANIFEST_FILE).details["failed"] == [str(inputs / "broken.png")]


def test_unknown_config_key_exits_with_configuration_error(runs_root, tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("loss_weights:\n  gamma: 2.0\n")
    assert main(["train", "--config", str(config)]) == 1
    assert read_manifest(runs_root / "train" / MANIFEST_FILE).exit_code == 1


def test_missing_training_split_exits_with_data_error(runs_root, tmp_path, tiny_config):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--config", str(tiny_config), "--root", str(empty)]) == 2


def test_usage_error_exits_with_one():
    with pytest.raises(SystemExit) as excinfo:
        main(["evaluate"])
    assert excinfo.value.code == 1
