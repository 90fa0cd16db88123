"""MIA-Block backbone: patch embedding, maskable transformer blocks, classifier.

Masking is structural: a masked token is excluded as query, key and value; a
masked head's channel group is excluded from every linear layer's inputs and
outputs (MLP hidden groups included, so the MLP shrinks quadratically). The
residual stream keeps its full width and all tokens, so masked content passes
through each block unchanged.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import Tensor, nn

from mia_former.model.masks import MaskBundle
from mia_former.types import MIAConfig

INIT_STD = 0.02


@dataclass
class FeatureMap:
    """Inter-block representation I^l.

    Attributes:
        tokens: Spatial tokens, shape (batch, N_h, N_w, H*E)
        cls: Class-token row, shape (batch, H*E), or None when disabled
    """

    tokens: Tensor
    cls: Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def sequence(self) -> Tensor:
        """Flatten to (batch, [1 +] N, H*E), class token first."""
        flat = rearrange(self.tokens, "b h w d -> b (h w) d")
        if self.cls is None:
            return flat
        return torch.cat([self.cls[:, None], flat], dim=1)

    def spatial(self) -> Tensor:
        """Spatial tokens as (batch, N, H*E)."""
        return rearrange(self.tokens, "b h w d -> b (h w) d")

    @classmethod
    def from_sequence(cls, seq: Tensor, cfg: MIAConfig) -> "FeatureMap":
        n_h, n_w = cfg.grid
        cls_row = seq[:, 0] if cfg.use_class_token else None
        spatial = seq[:, cfg.num_cls :]
        return cls(rearrange(spatial, "b (h w) d -> b h w d", h=n_h, w=n_w), cls_row)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Truncated-normal init for linear/conv weights, zeros for biases."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (nn.Linear, nn.Conv2d)):
                sub.weight.normal_(0.0, INIT_STD, generator=generator)
                sub.weight.clamp_(-2 * INIT_STD, 2 * INIT_STD)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection plus learned position and class embeddings."""

    def __init__(self, cfg: MIAConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.proj = nn.Conv2d(cfg.in_channels, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        n_h, n_w = cfg.grid
        self.pos_embed = nn.Parameter(torch.zeros(1, n_h, n_w, d))
        self.cls_token = nn.Parameter(torch.zeros(1, d)) if cfg.use_class_token else None
        self.cls_pos = nn.Parameter(torch.zeros(1, d)) if cfg.use_class_token else None

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        init_weights(self, generator)
        with torch.no_grad():
            for param in (self.pos_embed, self.cls_token, self.cls_pos):
                if param is not None:
                    param.normal_(0.0, INIT_STD, generator=generator)

    def forward(self, images: Tensor) -> FeatureMap:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            msg = f"Image batch has shape {tuple(images.shape)}, expected (batch, {', '.join(map(str, expected))})"
            raise ValueError(msg)
        tokens = rearrange(self.proj(images), "b d h w -> b h w d") + self.pos_embed
        cls_row = None
        if self.cls_token is not None and self.cls_pos is not None:
            cls_row = (self.cls_token + self.cls_pos).expand(images.shape[0], -1)
        return FeatureMap(tokens, cls_row)


def patch_embed(images: Tensor, weights: PatchEmbed) -> FeatureMap:
    return weights(images)


class MIABlock(nn.Module):
    """Pre-norm transformer block whose linear layers are grouped per head.

    Channel group g covers [g*E, (g+1)*E) of the residual stream and of each of
    Q, K, V; MLP hidden group g covers [g*r*E, (g+1)*r*E).
    """

    def __init__(self, cfg: MIAConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_hidden)
        self.fc2 = nn.Linear(cfg.mlp_hidden, d)
        self.scale = cfg.head_dim**-0.5

    def forward(self, x: Tensor, head_mask: Tensor, token_mask: Tensor, block_gate: Tensor) -> Tensor:
        """Masked block on a flat sequence.

        Args:
            x: Sequence (batch, T, H*E), class token first when enabled
            head_mask: (batch, H) hard head masks
            token_mask: (batch, T) hard token masks, class token included
            block_gate: (batch,) hard block masks; 0 returns x unchanged
        """
        cfg = self.cfg
        chan = repeat(head_mask, "b h -> b 1 (h e)", e=cfg.head_dim)
        hidden = repeat(head_mask, "b h -> b 1 (h e)", e=cfg.mlp_group_dim)
        tok = token_mask[..., None]
        gate = block_gate[:, None, None]

        q, k, v = rearrange(
            self.qkv(self.norm1(x) * chan),
            "b t (three h e) -> three b h t e",
            three=3,
            h=cfg.num_heads,
        )
        scores = (q @ k.transpose(-2, -1)) * self.scale
        key_keep = (token_mask.detach() > 0.5)[:, None, None, :]
        scores = scores.masked_fill(~key_keep, torch.finfo(scores.dtype).min)
        attn = scores.softmax(dim=-1)
        heads_out = rearrange(attn @ v, "b h t e -> b t (h e)") * chan
        x = x + gate * (self.proj(heads_out) * chan * tok)

        mlp_hidden = F.gelu(self.fc1(self.norm2(x) * chan)) * hidden
        return x + gate * (self.fc2(mlp_hidden) * chan * tok)


def masked_block_forward(x: FeatureMap, masks: MaskBundle, weights: MIABlock) -> FeatureMap:
    """Run one MIA-Block under a MaskBundle.

    With ``d_block = 0`` the output is bit-identical to ``x``; masked tokens and
    masked head channel groups are carried by the residual unchanged.

    Raises:
        MaskError: On a mask shape mismatch or a non-binary hard mask
    """
    cfg = weights.cfg
    # straight-through masks are exactly binary in the forward pass, so this holds in training too
    masks.validate(cfg)
    seq = weights(x.sequence(), masks.d_heads, masks.token_mask(cfg), masks.d_block)
    return FeatureMap.from_sequence(seq, cfg)


class ClassifierHead(nn.Module):
    """Final LayerNorm and linear classifier."""

    def __init__(self, cfg: MIAConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.fc = nn.Linear(cfg.embed_dim, cfg.num_classes)

    def forward(self, x: FeatureMap) -> Tensor:
        pooled = x.cls if x.cls is not None else x.spatial().mean(dim=1)
        return self.fc(self.norm(pooled))


def classify(x: FeatureMap, head_weights: ClassifierHead) -> Tensor:
    """Logits (batch, num_classes) from the class token, or the mean spatial token."""
    return head_weights(x)
