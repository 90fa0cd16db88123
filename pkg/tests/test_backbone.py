"""Tests for the maskable MIA-Block backbone."""

import pytest
import torch

from mia_former.cost.flops import block_flops, embed_flops
from mia_former.errors import MaskError
from mia_former.model.backbone import FeatureMap, MIABlock, PatchEmbed, masked_block_forward
from mia_former.model.former import MIAFormer
from mia_former.model.masks import MaskBundle
from mia_former.types import MIAConfig

from .oracles import counted_block_flops, counted_embed_flops, reference_block


def _feature_map(model: MIAFormer, images: torch.Tensor) -> FeatureMap:
    with torch.no_grad():
        return model.embed(images)


def _random_masks(cfg: MIAConfig, batch: int, seed: int) -> MaskBundle:
    generator = torch.Generator().manual_seed(seed)
    heads = (torch.rand(batch, cfg.num_heads, generator=generator) < 0.6).float()
    tokens = (torch.rand(batch, cfg.num_tokens, generator=generator) < 0.6).float()
    return MaskBundle.from_hard(torch.ones(batch), heads, tokens)


def test_feature_map_sequence_roundtrip(model: MIAFormer, images: torch.Tensor) -> None:
    """Test flattening to a sequence and back preserves the tokens."""
    x = _feature_map(model, images)
    seq = x.sequence()
    assert seq.shape == (6, 17, 64)
    back = FeatureMap.from_sequence(seq, model.cfg)
    assert torch.equal(back.tokens, x.tokens)
    assert back.cls is not None and x.cls is not None
    assert torch.equal(back.cls, x.cls)


def test_patch_embed_rejects_wrong_shape(cfg: MIAConfig) -> None:
    """Test a wrongly sized image batch raises ValueError."""
    with pytest.raises(ValueError, match="expected"):
        PatchEmbed(cfg)(torch.zeros(2, 3, 16, 16))


def test_skipped_block_is_identity(model: MIAFormer, images: torch.Tensor) -> None:
    """Test d_block = 0 returns the input bit for bit."""
    x = _feature_map(model, images)
    bundle = MaskBundle.skip_all(6, model.cfg)
    with torch.no_grad():
        y = masked_block_forward(x, bundle, model.block_modules()[0])
    assert torch.equal(y.tokens, x.tokens)
    assert y.cls is not None and x.cls is not None
    assert torch.equal(y.cls, x.cls)


def test_all_heads_masked_is_identity(model: MIAFormer, images: torch.Tensor) -> None:
    """Test a block with zero active heads leaves the residual unchanged."""
    cfg = model.cfg
    x = _feature_map(model, images)
    bundle = MaskBundle.from_hard(torch.ones(6), torch.zeros(6, cfg.num_heads), torch.ones(6, cfg.num_tokens))
    with torch.no_grad():
        y = masked_block_forward(x, bundle, model.block_modules()[1])
    assert torch.equal(y.tokens, x.tokens)


def test_masked_tokens_pass_through(model: MIAFormer, images: torch.Tensor) -> None:
    """Test masked tokens are carried unchanged while active ones change."""
    cfg = model.cfg
    x = _feature_map(model, images)
    tokens = torch.ones(6, cfg.num_tokens)
    tokens[:, ::2] = 0
    bundle = MaskBundle.from_hard(torch.ones(6), torch.ones(6, cfg.num_heads), tokens)
    with torch.no_grad():
        y = masked_block_forward(x, bundle, model.block_modules()[0])
    before, after = x.spatial(), y.spatial()
    assert torch.equal(after[:, ::2], before[:, ::2])
    assert not torch.allclose(after[:, 1::2], before[:, 1::2])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_masked_forward_matches_gathered_reference(model: MIAFormer, images: torch.Tensor, seed: int) -> None:
    """Test masking equals computing on the gathered heads and tokens."""
    cfg = model.cfg
    block = model.block_modules()[2]
    x = _feature_map(model, images)
    bundle = _random_masks(cfg, 6, seed)
    with torch.no_grad():
        y = masked_block_forward(x, bundle, block).sequence()
    seq, tok = x.sequence(), bundle.token_mask(cfg)
    for s in range(6):
        expected = reference_block(block, seq[s], bundle.d_heads[s], tok[s])
        torch.testing.assert_close(y[s], expected, rtol=1e-4, atol=1e-5)


def test_masked_forward_without_class_token() -> None:
    """Test the gathered reference also holds with mean pooling and no class token."""
    cfg = MIAConfig.tiny(use_class_token=False)
    model = MIAFormer(cfg)
    x = _feature_map(model, torch.rand(3, 3, 32, 32, generator=torch.Generator().manual_seed(4)))
    bundle = _random_masks(cfg, 3, 9)
    block = model.block_modules()[0]
    with torch.no_grad():
        y = masked_block_forward(x, bundle, block).sequence()
    assert y.shape == (3, 16, 64)
    for s in range(3):
        expected = reference_block(block, x.sequence()[s], bundle.d_heads[s], bundle.d_tokens[s])
        torch.testing.assert_close(y[s], expected, rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize(("h", "n"), [(4, 16), (2, 9), (1, 1), (3, 0), (0, 5)])
def test_block_flops_match_counter(model: MIAFormer, images: torch.Tensor, h: int, n: int) -> None:
    """Test analytic block FLOPs equal counted matmul FLOPs on gathered tensors."""
    cfg = model.cfg
    block: MIABlock = model.block_modules()[0]
    seq = _feature_map(model, images).sequence()[0]
    heads = torch.zeros(cfg.num_heads)
    heads[:h] = 1
    tokens = torch.zeros(cfg.num_tokens)
    tokens[cfg.num_tokens - n :] = 1
    token_mask = torch.cat([torch.ones(1), tokens])
    msa, mlp = block_flops(h, n, cfg)
    assert msa + mlp == counted_block_flops(block, seq, heads, token_mask)


def test_block_flops_scaling(cfg: MIAConfig) -> None:
    """Test MLP FLOPs grow quadratically in heads and linearly in tokens."""
    no_cls = MIAConfig.tiny(use_class_token=False)
    _, mlp_full = block_flops(4, 16, no_cls)
    _, mlp_half = block_flops(2, 16, no_cls)
    _, mlp_tokens = block_flops(4, 8, no_cls)
    assert mlp_full == 4 * mlp_half
    assert mlp_full == 2 * mlp_tokens
    with pytest.raises(ValueError, match="h_active"):
        block_flops(5, 16, cfg)
    with pytest.raises(ValueError, match="n_active"):
        block_flops(4, 17, cfg)


def test_embed_flops_match_counter(model: MIAFormer, images: torch.Tensor) -> None:
    """Test the patch projection's FLOPs equal the counted convolution."""
    assert embed_flops(model.cfg) == counted_embed_flops(model.patch_embed.proj, images[:1])


def test_mask_shape_mismatch_rejected(model: MIAFormer, images: torch.Tensor) -> None:
    """Test a bundle built for another config raises MaskError."""
    other = MIAConfig.tiny(num_heads=2, head_dim=32)
    x = _feature_map(model, images)
    with pytest.raises(MaskError, match="d_heads"):
        masked_block_forward(x, MaskBundle.all_on(6, other), model.block_modules()[0])


def test_non_binary_mask_rejected(model: MIAFormer, images: torch.Tensor) -> None:
    """Test soft values in a hard mask raise MaskError."""
    cfg = model.cfg
    bundle = MaskBundle.all_on(6, cfg)
    bundle.d_tokens = torch.full((6, cfg.num_tokens), 0.5)
    with pytest.raises(MaskError, match="binary"):
        masked_block_forward(_feature_map(model, images), bundle, model.block_modules()[0])
