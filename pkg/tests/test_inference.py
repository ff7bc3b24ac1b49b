import numpy as np
import pytest
import torch

from src.data_loader import BACKGROUND, PLAQUE, TEETH, read_label_mask
from src.errors import ExportError
from src.inference import (
    FusedPrediction,
    branch_foreground_prob,
    evaluate_model,
    export_masks,
    fuse_branches,
    predict,
    predict_records,
    read_probability,
)
from src.metrics import build_report
from src.sdnet import build_model


def test_branch_foreground_prob():
    assert torch.allclose(branch_foreground_prob(torch.zeros(2, 3, 3)), torch.full((3, 3), 0.5))

    logits = torch.zeros(2, 2, 2, dtype=torch.float64)
    logits[1] = 20.0
    assert torch.all(branch_foreground_prob(logits) > 1 - 1e-8)

    generator = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 4, dtype=torch.float64, generator=generator)
    oracle = 1.0 / (1.0 + torch.exp(logits[0] - logits[1]))
    torch.testing.assert_close(branch_foreground_prob(logits), oracle, atol=1e-10, rtol=0)


def test_fuse_branches_rule():
    p_teeth = np.array([[0.0, 0.9, 0.7, 0.4]])
    p_plaque = np.array([[0.0, 0.2, 0.7, 0.6]])
    fused = fuse_branches(p_teeth, p_plaque)
    np.testing.assert_array_equal(fused.label.labels, [[BACKGROUND, TEETH, PLAQUE, PLAQUE]])


def test_fuse_branches_background_below_threshold():
    rng = np.random.default_rng(0)
    p_teeth = rng.random((16, 16)) * 0.5
    p_plaque = rng.random((16, 16)) * 0.5
    p_teeth[0, 0] = 0.49999
    assert not fuse_branches(p_teeth, p_plaque).label.labels.any()


def test_fuse_branches_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_branches(np.zeros((2, 2)), np.zeros((3, 3)))


def test_predict_returns_one_label_map_per_image(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    predictions = predict(model, torch.rand(3, 3, 32, 32))
    assert len(predictions) == 3
    assert predictions[0].label.labels.shape == (32, 32)
    assert model.training


def test_predict_baseline_uses_argmax(tiny_model_config):
    model = build_model(tiny_model_config, seed=0, components=set())
    prediction = predict(model, torch.rand(3, 32, 32))[0]
    assert set(np.unique(prediction.label.labels)) <= {0, 1, 2}


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    p_teeth, p_plaque = rng.random((8, 8)), rng.random((8, 8))
    prediction = fuse_branches(p_teeth, p_plaque)
    written = export_masks(prediction, tmp_path / "out" / "a.png", with_probabilities=True)

    assert [p.name for p in written] == ["a.png", "a_teeth_prob.png", "a_plaque_prob.png"]
    np.testing.assert_array_equal(read_label_mask(written[0]).labels, prediction.label.labels)
    assert np.max(np.abs(read_probability(written[1]) - p_teeth)) <= 1 / 65535
    assert np.max(np.abs(read_probability(written[2]) - p_plaque)) <= 1 / 65535


def test_export_to_unwritable_path_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    prediction = fuse_branches(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ExportError):
        export_masks(prediction, blocker / "a.png")


def test_evaluate_model_matches_manual_report(tiny_model_config, tiny_records):
    model = build_model(tiny_model_config, seed=0)
    report = evaluate_model(model, tiny_records, batch_size=3)

    predictions = predict_records(model, tiny_records, batch_size=3)
    manual = build_report(
        [(r.id, p.label) for r, p in zip(tiny_records, predictions)],
        {r.id: r.supervision.label_mask() for r in tiny_records},
    )
    for key, value in manual.aggregate.items():
        assert report.aggregate[key] == pytest.approx(value, abs=1e-6)


def test_branch_mode_scores_thresholded_branches(tiny_model_config, tiny_records):
    model = build_model(tiny_model_config, seed=0)
    report = evaluate_model(model, tiny_records, eval_mode="branch")
    assert report.eval_mode == "branch"
    assert len(report.per_image) == len(tiny_records)


def test_branch_masks_threshold():
    prediction = FusedPrediction(
        label=fuse_branches(np.zeros((1, 2)), np.zeros((1, 2))).label,
        prob_teeth=np.array([[0.5, 0.4]]),
        prob_plaque=np.array([[0.1, 0.9]]),
    )
    teeth, plaque = prediction.branch_masks()
    np.testing.assert_array_equal(teeth, [[True, False]])
    np.testing.assert_array_equal(plaque, [[False, True]])


def test_fused_labels_lie_inside_thresholded_branches(tiny_model_config):
    for seed in range(3):
        model = build_model(tiny_model_config, seed=seed)
        for prediction in predict(model, torch.rand(2, 3, 32, 32)):
            teeth, plaque = prediction.branch_masks()
            labels = prediction.label.labels
            assert not ((labels == TEETH) & ~teeth).any()
            assert not ((labels == PLAQUE) & ~plaque).any()
            assert not ((labels == BACKGROUND) & (teeth | plaque)).any()


def test_fuse_branches_subset_property_on_random_maps():
    rng = np.random.default_rng(4)
    for _ in range(50):
        p_teeth, p_plaque = rng.random((8, 8)), rng.random((8, 8))
        labels = fuse_branches(p_teeth, p_plaque).label.labels
        assert not ((labels == TEETH) & (p_teeth < 0.5)).any()
        assert not ((labels == PLAQUE) & (p_plaque < 0.5)).any()
