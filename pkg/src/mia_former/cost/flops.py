"""Analytic FLOPs accounting for any mask configuration.

FLOPs are 2 x multiply-accumulates of matrix-multiply work only (linear,
convolution, attention products); softmax, normalization, activations,
pooling and additions are excluded. Controller overhead is counted in both
executed and total FLOPs.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import polars as pl
import torch
from torch import Tensor

from mia_former.errors import TraceError
from mia_former.types import MIAConfig

if TYPE_CHECKING:
    from mia_former.model.masks import MaskBundle, PolicyTrace


@dataclass(frozen=True)
class BlockFlops:
    block: int
    msa: int
    mlp: int
    controller: int
    skipped: bool

    @property
    def total(self) -> int:
        return self.msa + self.mlp + self.controller


@dataclass(frozen=True)
class ControllerFlops:
    """Controller cost split by stage of the decision pipeline."""

    cnn_b: int
    fc_b: int
    head_branch: int
    token_branch: int

    @property
    def always(self) -> int:
        return self.cnn_b + self.fc_b

    @property
    def branches(self) -> int:
        return self.head_branch + self.token_branch


@dataclass(frozen=True)
class FlopsReport:
    """Executed vs. total FLOPs for one sample.

    ``executed`` equals embed + classifier + the sum of per-block entries.
    """

    sample_id: int
    executed: int
    total: int
    embed: int
    classifier: int
    per_block: tuple[BlockFlops, ...]
    total_controller: int

    @property
    def ratio(self) -> float:
        return self.executed / self.total

    @property
    def controller(self) -> int:
        return sum(b.controller for b in self.per_block)

    @property
    def ratio_without_controller(self) -> float:
        """Ratio with controller overhead removed from both terms."""
        return (self.executed - self.controller) / (self.total - self.total_controller)


@dataclass(frozen=True)
class BatchFlopsReport:
    samples: tuple[FlopsReport, ...]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ratios(self) -> list[float]:
        return [s.ratio for s in self.samples]

    @property
    def mean_ratio(self) -> float:
        return sum(self.ratios) / len(self.samples)

    @property
    def mean_ratio_without_controller(self) -> float:
        return sum(s.ratio_without_controller for s in self.samples) / len(self.samples)


def pooled_size(size: int) -> int:
    """Spatial size after one 2x2 average pool (ceil mode; 1 stays 1)."""
    return (size + 1) // 2


def _block_terms(h: Any, n: Any, cfg: MIAConfig) -> tuple[Any, Any]:
    """MSA and MLP FLOPs for h heads and n sequence rows; ints or tensors."""
    width = h * cfg.head_dim
    hidden = h * cfg.mlp_group_dim
    qkv = 6 * n * width * width
    attention = 4 * h * n * n * cfg.head_dim
    proj = 2 * n * width * width
    mlp = 4 * n * width * hidden
    return qkv + attention + proj, mlp


def block_flops(h_active: int, n_active: int, cfg: MIAConfig) -> tuple[int, int]:
    """FLOPs of one executed block.

    Args:
        h_active: Active heads, 0 <= h <= H
        n_active: Active spatial tokens, 0 <= n <= N; the class token, when
            enabled, is added internally (it is never masked)
        cfg: Model configuration

    Returns:
        Tuple of (msa_flops, mlp_flops)

    Raises:
        ValueError: If a count is out of range

    Examples:
        >>> cfg = MIAConfig.tiny(use_class_token=False)
        >>> block_flops(0, 16, cfg)
        (0, 0)
    """
    if not 0 <= h_active <= cfg.num_heads:
        msg = f"h_active={h_active} out of range [0, {cfg.num_heads}]"
        raise ValueError(msg)
    if not 0 <= n_active <= cfg.num_tokens:
        msg = f"n_active={n_active} out of range [0, {cfg.num_tokens}]"
        raise ValueError(msg)
    return _block_terms(h_active, n_active + cfg.num_cls, cfg)


def controller_parts(cfg: MIAConfig) -> ControllerFlops:
    """Per-stage controller FLOPs; disabled dimensions cost nothing.

    Stage-3 actor heads have the shapes of the final layers they replace, so
    the counts hold before and after ``install_rl_heads``. Critic heads run in
    train mode only and are not part of the inference cost.
    """
    d, w = cfg.embed_dim, cfg.ctrl_width
    n_h, n_w = cfg.grid
    use_depth, use_head, use_token = (cfg.has_dim(x) for x in ("depth", "head", "token"))
    cnn_b = 0
    if use_depth or use_head:
        conv1 = 2 * n_h * n_w * w * d * 9
        conv2 = 2 * pooled_size(n_h) * pooled_size(n_w) * w * w * 9
        cnn_b = conv1 + conv2
    fc_b = 2 * w if use_depth else 0
    head_branch = 0
    if use_head:
        head_branch = 2 * w * cfg.num_heads * cfg.head_feat_dim + 2 * cfg.num_heads * cfg.head_feat_dim
    token_branch = 0
    if use_token:
        token_branch = 2 * cfg.num_tokens * (d * w + w * w) + 2 * cfg.num_tokens * w
    return ControllerFlops(cnn_b, fc_b, head_branch, token_branch)


def controller_flops(cfg: MIAConfig, skipped_block: bool) -> int:
    """Controller FLOPs for one block: CNN_b + FC_b always, branches only when kept."""
    parts = controller_parts(cfg)
    return parts.always if skipped_block else parts.always + parts.branches


def embed_flops(cfg: MIAConfig) -> int:
    return 2 * cfg.num_tokens * cfg.embed_dim * cfg.in_channels * cfg.patch_size**2


def classifier_flops(cfg: MIAConfig) -> int:
    return 2 * cfg.embed_dim * cfg.num_classes


def total_flops(cfg: MIAConfig) -> int:
    """FLOPs of the fully active model, controllers included."""
    msa, mlp = block_flops(cfg.num_heads, cfg.num_tokens, cfg)
    per_block = controller_flops(cfg, skipped_block=False) + msa + mlp
    return embed_flops(cfg) + classifier_flops(cfg) + cfg.num_blocks * per_block


def model_flops(trace: "PolicyTrace", cfg: MIAConfig) -> BatchFlopsReport:
    """Per-sample FLOPs reports for an executed policy trace.

    Raises:
        TraceError: If the trace does not cover all blocks
    """
    trace.validate(cfg)
    total = total_flops(cfg)
    embed, head = embed_flops(cfg), classifier_flops(cfg)
    total_ctrl = cfg.num_blocks * controller_flops(cfg, skipped_block=False)
    heads_kept = trace.heads_kept.tolist()
    tokens_kept = trace.tokens_kept.tolist()
    skipped = trace.skipped.tolist()
    samples = []
    for s, sample_id in enumerate(trace.sample_ids.tolist()):
        blocks = []
        for layer in range(cfg.num_blocks):
            is_skipped = bool(skipped[s][layer])
            msa, mlp = (0, 0) if is_skipped else block_flops(heads_kept[s][layer], tokens_kept[s][layer], cfg)
            blocks.append(BlockFlops(layer, msa, mlp, controller_flops(cfg, is_skipped), is_skipped))
        executed = embed + head + sum(b.total for b in blocks)
        samples.append(FlopsReport(int(sample_id), executed, total, embed, head, tuple(blocks), total_ctrl))
    return BatchFlopsReport(tuple(samples))


def _cost_terms(bundles: Sequence["MaskBundle"], cfg: MIAConfig) -> Tensor:
    """Executed FLOPs per sample from straight-through masks, float64."""
    if not bundles:
        msg = "Cannot compute a cost from an empty bundle list"
        raise TraceError(msg)
    parts = controller_parts(cfg)
    cost = torch.full(
        (bundles[0].batch_size,),
        float(embed_flops(cfg) + classifier_flops(cfg)),
        dtype=torch.float64,
        device=bundles[0].d_block.device,
    )
    for bundle in bundles:
        gate = bundle.d_block.double()
        h = bundle.d_heads.double().sum(dim=-1)
        n = bundle.d_tokens.double().sum(dim=-1) + cfg.num_cls
        msa, mlp = _block_terms(h, n, cfg)
        cost = cost + parts.always + gate * (parts.branches + msa + mlp)
    return cost


def differentiable_cost(bundles: Sequence["MaskBundle"], cfg: MIAConfig) -> Tensor:
    """Batch-mean straight-through FLOPs ratio (the co-training cost loss).

    Head and token counts are sums of straight-through masks and the block
    gate multiplies the block term, so on hard masks the value equals the
    ``model_flops`` ratio while gradients reach every soft mask.
    """
    return (_cost_terms(bundles, cfg) / total_flops(cfg)).mean()


def exec_ratios(bundles: Sequence["MaskBundle"], cfg: MIAConfig) -> Tensor:
    """Per-sample executed FLOPs ratio (detached, float64)."""
    with torch.no_grad():
        return _cost_terms(bundles, cfg) / total_flops(cfg)


def flops_frame(report: BatchFlopsReport) -> pl.DataFrame:
    """Flat CSV rows: one per (sample, block), plus a summary row per sample.

    Summary rows have ``block = -1`` and carry executed/total/ratio, with and
    without controller overhead.
    """
    rows = []
    for sample in report.samples:
        rows.extend(
            {
                "sample_id": sample.sample_id,
                "block": b.block,
                "msa": b.msa,
                "mlp": b.mlp,
                "controller": b.controller,
                "skipped": b.skipped,
                "executed": None,
                "total": None,
                "ratio": None,
                "ratio_without_controller": None,
            }
            for b in sample.per_block
        )
        rows.append(
            {
                "sample_id": sample.sample_id,
                "block": -1,
                "msa": sum(b.msa for b in sample.per_block),
                "mlp": sum(b.mlp for b in sample.per_block),
                "controller": sample.controller,
                "skipped": None,
                "executed": sample.executed,
                "total": sample.total,
                "ratio": sample.ratio,
                "ratio_without_controller": sample.ratio_without_controller,
            }
        )
    schema = {
        "sample_id": pl.Int64,
        "block": pl.Int64,
        "msa": pl.Int64,
        "mlp": pl.Int64,
        "controller": pl.Int64,
        "skipped": pl.Boolean,
        "executed": pl.Int64,
        "total": pl.Int64,
        "ratio": pl.Float64,
        "ratio_without_controller": pl.Float64,
    }
    return pl.DataFrame(rows, schema=schema)
