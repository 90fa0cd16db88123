"""Reference computations the optimized code is checked against.

``reference_block`` runs one MIA-Block on only the active tokens and the
active heads' channel slices (gathering instead of masking), and the
``counted_*`` helpers measure matmul FLOPs with torch's FlopCounterMode.
"""

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.utils.flop_counter import FlopCounterMode

from mia_former.model.backbone import FeatureMap, MIABlock
from mia_former.model.controller import MIAController


def _channels(heads: Tensor, width: int) -> Tensor:
    return torch.cat([torch.arange(h * width, (h + 1) * width) for h in heads.tolist()] or [torch.empty(0, dtype=torch.long)])


def _gathered(block: MIABlock, seq: Tensor, head_mask: Tensor, token_mask: Tensor) -> Tensor:
    cfg = block.cfg
    d = cfg.embed_dim
    heads = torch.nonzero(head_mask).flatten()
    chans = _channels(heads, cfg.head_dim)
    hidden = _channels(heads, cfg.mlp_group_dim)
    toks = torch.nonzero(token_mask).flatten()
    out = seq.clone()
    if heads.numel() == 0 or toks.numel() == 0:
        return out
    x = seq[toks]

    xn = F.layer_norm(x, (d,), block.norm1.weight, block.norm1.bias)[:, chans]
    w, b = block.qkv.weight, block.qkv.bias
    q = F.linear(xn, w[chans][:, chans], b[chans])
    k = F.linear(xn, w[d + chans][:, chans], b[d + chans])
    v = F.linear(xn, w[2 * d + chans][:, chans], b[2 * d + chans])
    h = heads.numel()
    q, k, v = (t.view(-1, h, cfg.head_dim).transpose(0, 1) for t in (q, k, v))
    attn = ((q @ k.transpose(-2, -1)) * block.scale).softmax(dim=-1)
    heads_out = (attn @ v).transpose(0, 1).reshape(-1, h * cfg.head_dim)
    x = x.clone()
    x[:, chans] = x[:, chans] + F.linear(heads_out, block.proj.weight[chans][:, chans], block.proj.bias[chans])

    xn = F.layer_norm(x, (d,), block.norm2.weight, block.norm2.bias)[:, chans]
    mid = F.gelu(F.linear(xn, block.fc1.weight[hidden][:, chans], block.fc1.bias[hidden]))
    x[:, chans] = x[:, chans] + F.linear(mid, block.fc2.weight[chans][:, hidden], block.fc2.bias[chans])
    out[toks] = x
    return out


@torch.no_grad()
def reference_block(block: MIABlock, seq: Tensor, head_mask: Tensor, token_mask: Tensor) -> Tensor:
    """One sample's block output computed on gathered heads and tokens.

    Args:
        block: Block weights
        seq: Sequence (T, H*E), class token first when enabled
        head_mask: (H,) 0/1 head mask
        token_mask: (T,) 0/1 token mask over the full sequence
    """
    return _gathered(block, seq, head_mask.bool(), token_mask.bool())


@torch.no_grad()
def counted_block_flops(block: MIABlock, seq: Tensor, head_mask: Tensor, token_mask: Tensor) -> int:
    """Matmul FLOPs of ``reference_block`` as measured by FlopCounterMode."""
    with FlopCounterMode(display=False) as counter:
        _gathered(block, seq, head_mask.bool(), token_mask.bool())
    return counter.get_total_flops()


@torch.no_grad()
def counted_controller_flops(controller: MIAController, x: FeatureMap, kept: bool) -> int:
    """Matmul FLOPs of one controller on a single sample.

    The block branch always runs; head and token branches only when ``kept``.
    """
    with FlopCounterMode(display=False) as counter:
        f_b = controller.block_features(x)
        assert controller.fc_b is not None
        controller.fc_b(f_b.flatten(1))
        if kept:
            assert controller.fc_h2 is not None and controller.fc_n is not None
            controller.fc_h2(controller.head_features(f_b))
            controller.fc_n(controller.token_features(x))
    return counter.get_total_flops()


@torch.no_grad()
def counted_embed_flops(conv: torch.nn.Module, images: Tensor) -> int:
    with FlopCounterMode(display=False) as counter:
        conv(images)
    return counter.get_total_flops()


@torch.no_grad()
def counted_classifier_flops(head: torch.nn.Module, x: FeatureMap) -> int:
    with FlopCounterMode(display=False) as counter:
        head(x)
    return counter.get_total_flops()
