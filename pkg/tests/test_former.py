"""Tests for the full MIA-Former forward pass."""

import pytest
import torch

from mia_former.cost.flops import classifier_flops, controller_flops, embed_flops
from mia_former.errors import MaskError
from mia_former.model.former import MIAFormer, model_forward
from mia_former.model.masks import MaskBundle
from mia_former.types import MIAConfig


def test_forward_shapes(model: MIAFormer, images: torch.Tensor) -> None:
    """Test logits, per-block bundles and the trace have the expected shapes."""
    out = model(images)
    assert out.logits.shape == (6, 10)
    assert len(out.bundles) == 4
    trace = out.trace
    assert trace.skipped.shape == (6, 4)
    assert trace.heads.shape == (6, 4, 4)
    assert trace.tokens.shape == (6, 4, 16)
    assert len(out.flops) == 6


def test_all_on_ratio_is_one(model: MIAFormer, images: torch.Tensor) -> None:
    """Test a fully executed model reports an executed ratio of exactly 1."""
    out = model(images, policy="all_on")
    assert out.exec_ratio.tolist() == [1.0] * 6
    assert out.flops.ratios == [1.0] * 6


def test_skip_all_equals_embed_and_head(model: MIAFormer, images: torch.Tensor) -> None:
    """Test skipping every block classifies the embedding directly."""
    out = model(images, policy="skip_all")
    with torch.no_grad():
        expected = model.head(model.embed(images))
    assert torch.equal(out.logits, expected)
    floor = embed_flops(model.cfg) + classifier_flops(model.cfg) + 4 * controller_flops(model.cfg, skipped_block=True)
    assert [s.executed for s in out.flops.samples] == [floor] * 6


def test_explicit_masks_override_controllers(model: MIAFormer, images: torch.Tensor) -> None:
    """Test explicit bundles are executed verbatim."""
    cfg = model.cfg
    masks = [MaskBundle.all_on(6, cfg)] * 2 + [MaskBundle.skip_all(6, cfg)] * 2
    out = model(images, masks=masks)
    assert out.trace.skipped[:, 2:].all()
    assert not out.trace.skipped[:, :2].any()

    with pytest.raises(MaskError, match="Expected 4 mask bundles"):
        model(images, masks=masks[:3])


def test_eval_is_deterministic(model: MIAFormer, images: torch.Tensor) -> None:
    """Test two eval passes give identical logits and policies."""
    a = model(images, mode="eval")
    b = model(images, mode="eval")
    assert torch.equal(a.logits, b.logits)
    assert torch.equal(a.trace.heads, b.trace.heads)


def test_train_mode_reproducible_with_seed(model: MIAFormer, images: torch.Tensor) -> None:
    """Test train-mode sampling depends only on the generator seed."""
    a = model(images, mode="train", tau=1.0, generator=torch.Generator().manual_seed(5))
    b = model(images, mode="train", tau=1.0, generator=torch.Generator().manual_seed(5))
    assert torch.equal(a.logits, b.logits)
    assert torch.equal(a.trace.tokens, b.trace.tokens)


def test_same_seed_same_weights(cfg: MIAConfig) -> None:
    """Test construction is deterministic in the config seed."""
    a, b = MIAFormer(cfg), MIAFormer(cfg)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items(), strict=True):
        assert torch.equal(pa, pb), name


def test_parameter_groups_partition_model(model: MIAFormer) -> None:
    """Test backbone and controller groups cover every parameter exactly once."""
    backbone = {id(p) for p in model.backbone_parameters()}
    controller = {id(p) for p in model.controller_parameters()}
    assert not backbone & controller
    assert backbone | controller == {id(p) for p in model.parameters()}


def test_model_forward_functional(model: MIAFormer, images: torch.Tensor) -> None:
    """Test the functional form returns logits, trace and FLOPs."""
    logits, trace, flops = model_forward(images, model)
    assert logits.shape == (6, 10)
    trace.validate(model.cfg)
    assert flops.ratios == pytest.approx(model(images).exec_ratio.tolist())


def test_pixel_normalization_inside_model(model: MIAFormer) -> None:
    """Test the embedding normalizes [0, 1] pixels with the config constants."""
    gray = torch.full((1, 3, 32, 32), 0.5)
    with torch.no_grad():
        x = model.embed(gray)
        expected = model.patch_embed(torch.zeros(1, 3, 32, 32))
    assert torch.equal(x.tokens, expected.tokens)
