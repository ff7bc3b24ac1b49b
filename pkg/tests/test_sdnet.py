import json
from dataclasses import replace
from pathlib import Path

import pytest
import torch

from src.errors import ConfigurationError
from src.losses import ccm_loss
from src.sdnet import (
    ModelConfig,
    SDNet,
    build_model,
    count_parameters,
    init_weights,
    is_auxiliary_key,
    parameter_breakdown,
)

GOLDEN = Path(__file__).parent / "golden" / "param_counts.json"


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig(), seed=0)


def test_default_forward_shapes(default_model):
    images = torch.rand(1, 3, 128, 128)
    bottleneck, skips = default_model.encode(images)
    assert bottleneck.shape == (1, 1024, 8, 8)
    assert [tuple(s.shape[1:]) for s in skips] == [(64, 128, 128), (128, 64, 64), (256, 32, 32), (512, 16, 16)]

    with torch.no_grad():
        result = default_model(images)
    for branch in (result.teeth, result.plaque):
        assert branch.mask_logits.shape == (1, 2, 128, 128)
        assert branch.boundary_logits.shape == (1, 1, 128, 128)
        assert branch.embeddings.shape == (1, 64, 64)


def test_parameter_counts_match_golden(default_model):
    golden = json.loads(GOLDEN.read_text())
    breakdown = parameter_breakdown(default_model)
    for key in ("encoder", "decoder_teeth", "decoder_plaque", "projection_teeth", "projection_plaque", "total"):
        assert breakdown[key] == golden[key]

    assert count_parameters(SDNet(ModelConfig(), {"SD"})) == golden["sd_only_total"]
    assert count_parameters(SDNet(ModelConfig(), set())) == golden["unet_baseline_total"]


def test_bottleneck_scales_with_input(tiny_model_config):
    model = SDNet(replace(tiny_model_config, input_size=64))
    bottleneck, _ = model.encode(torch.rand(1, 3, 64, 64))
    assert bottleneck.shape == (1, 64, 4, 4)


def test_invalid_architecture_rejected():
    with pytest.raises(ConfigurationError):
        SDNet(ModelConfig(input_size=100))
    with pytest.raises(ConfigurationError):
        ModelConfig(encoder_channels=(64, 64, 128, 256, 512)).validate()
    with pytest.raises(ConfigurationError):
        SDNet(ModelConfig(), {"CCM"})


def test_input_size_mismatch_rejected(tiny_model_config):
    model = SDNet(tiny_model_config)
    with pytest.raises(ConfigurationError):
        model(torch.rand(1, 3, 64, 64))


def test_branches_share_no_weights(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    images = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        before = model(images).teeth.mask_logits.clone()
        for param in model.decoders["plaque"].parameters():
            param.add_(1.0)
        after = model(images).teeth.mask_logits

    assert torch.equal(before, after)
    teeth_ids = {id(p) for p in model.branch_parameters("teeth")}
    assert not teeth_ids & {id(p) for p in model.branch_parameters("plaque")}


def test_zero_weights_give_zero_logits(tiny_model_config):
    model = SDNet(tiny_model_config)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
        result = model(torch.rand(1, 3, 32, 32))
    assert torch.count_nonzero(result.plaque.mask_logits) == 0
    assert torch.count_nonzero(result.teeth.boundary_logits) == 0


def test_projection_of_zero_features_is_zero(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    embeddings = model.project_embeddings(torch.zeros(1, 64, 2, 2), "plaque")
    assert embeddings.shape == (1, 4, 8)
    assert torch.count_nonzero(embeddings) == 0


def test_ccm_position_changes_embedding_resolution(tiny_model_config):
    config = replace(tiny_model_config, ccm_position="after_f1")
    model = build_model(config, seed=0)
    with torch.no_grad():
        result = model(torch.rand(1, 3, 32, 32))
    assert result.teeth.embeddings.shape == (1, 16, 8)


@pytest.mark.parametrize("position", ["entry", "after_f1", "after_f2", "after_f3"])
def test_tap_matches_full_decoder_feature(tiny_model_config, position):
    model = build_model(tiny_model_config, seed=0).eval()
    decoder = model.decoders["plaque"]
    with torch.no_grad():
        bottleneck, skips = model.encode(torch.rand(2, 3, 32, 32))
        _, _, features = decoder(bottleneck, skips)
        torch.testing.assert_close(decoder.tap(bottleneck, skips, position), features[position])


def test_stop_gradient_keeps_contrastive_loss_out_of_encoder(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    images = torch.rand(2, 3, 32, 32)
    result = model(images, ccm_stop_gradient=True)
    ccm_loss(result.plaque.embeddings, result.teeth.embeddings).backward()

    for param in model.encoder.parameters():
        assert param.grad is None or torch.count_nonzero(param.grad) == 0
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.projections.parameters())

    attached = model(images)
    torch.testing.assert_close(result.teeth.embeddings, attached.teeth.embeddings)


def test_heads_follow_components(tiny_model_config):
    sd_only = SDNet(tiny_model_config, {"SD"})
    assert len(sd_only.projections) == 0
    assert sd_only.decoders["teeth"].boundary_head is None

    baseline = SDNet(tiny_model_config, set())
    with torch.no_grad():
        result = baseline(torch.rand(2, 3, 32, 32))
    assert not result.decomposed
    assert result.joint_logits.shape == (2, 3, 32, 32)
    assert result.teeth is None


def test_inference_skips_auxiliary_heads(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    with torch.no_grad():
        result = model(torch.rand(1, 3, 32, 32), with_aux=False)
    assert result.plaque.boundary_logits is None
    assert result.plaque.embeddings is None


def test_batch_equals_per_sample(tiny_model_config):
    model = build_model(tiny_model_config, seed=3).double().eval()
    images = torch.rand(3, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        batched = model(images)
        for index in range(3):
            single = model(images[index:index + 1])
            torch.testing.assert_close(single.plaque.mask_logits[0], batched.plaque.mask_logits[index])
            torch.testing.assert_close(single.teeth.embeddings[0], batched.teeth.embeddings[index])


def test_init_weights_is_seeded(tiny_model_config):
    a = build_model(tiny_model_config, seed=1).state_dict()
    b = build_model(tiny_model_config, seed=1).state_dict()
    c = build_model(tiny_model_config, seed=2).state_dict()
    assert all(torch.equal(a[key], b[key]) for key in a)
    assert not all(torch.equal(a[key], c[key]) for key in a)


def test_init_weights_leaves_global_rng_untouched(tiny_model_config):
    model = SDNet(tiny_model_config)
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    init_weights(model, seed=9)
    assert torch.equal(torch.rand(1), expected)


def test_same_input_same_output(tiny_model_config):
    model = build_model(tiny_model_config, seed=0).eval()
    images = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(images).plaque.mask_logits, model(images).plaque.mask_logits)


def test_auxiliary_keys(tiny_model_config):
    keys = SDNet(tiny_model_config).state_dict().keys()
    auxiliary = {key for key in keys if is_auxiliary_key(key)}
    assert "decoders.plaque.boundary_head.weight" in auxiliary
    assert "projections.teeth.mlp.0.weight" in auxiliary
    assert "decoders.plaque.mask_head.weight" not in auxiliary
