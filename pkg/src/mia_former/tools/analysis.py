"""Analysis tools: FLOPs breakdowns, skip-ratio tables and policy grids.

Each tool takes an optional ``config`` (a config mapping) or ``config_path``
(a JSON config file); without either the tiny default configuration is used.
"""

from pathlib import Path

import polars as pl
import torch
from PIL import Image

from mia_former.analytics.policy import read_trace_frame, skip_ratio_stats
from mia_former.cost.flops import flops_frame, model_flops
from mia_former.errors import TraceError
from mia_former.model.masks import PolicyTrace
from mia_former.plotting.core import save_plot_to_image
from mia_former.plotting.policy import policy_grid_figure
from mia_former.server import mcp
from mia_former.types import MIAConfig, load_config, validate_config


def resolve_config(config: dict | None = None, config_path: str | None = None) -> MIAConfig:
    if config is not None and config_path is not None:
        msg = "Pass either config or config_path, not both"
        raise ValueError(msg)
    if config_path is not None:
        return load_config(config_path)
    if config is not None:
        return validate_config(config)
    return MIAConfig.tiny()


def trace_from_counts(
    heads_kept: list[int],
    tokens_kept: list[int],
    skipped: list[bool] | None,
    cfg: MIAConfig,
) -> PolicyTrace:
    """Single-sample trace whose masks keep the first ``h`` heads and ``n`` tokens.

    FLOPs depend only on the counts, so the mask positions are arbitrary.

    Raises:
        TraceError: If the lists do not have one entry per block or a count is out of range
    """
    skipped = skipped if skipped is not None else [False] * cfg.num_blocks
    lengths = {len(heads_kept), len(tokens_kept), len(skipped)}
    if lengths != {cfg.num_blocks}:
        msg = f"Expected {cfg.num_blocks} per-block entries, got lengths {sorted(lengths)}"
        raise TraceError(msg)
    for block, (h, n) in enumerate(zip(heads_kept, tokens_kept, strict=True)):
        if not (0 <= h <= cfg.num_heads and 0 <= n <= cfg.num_tokens):
            msg = f"Block {block}: {h} heads / {n} tokens outside [0, {cfg.num_heads}] / [0, {cfg.num_tokens}]"
            raise TraceError(msg)
    heads = torch.arange(cfg.num_heads) < torch.tensor(heads_kept)[:, None]
    tokens = torch.arange(cfg.num_tokens) < torch.tensor(tokens_kept)[:, None]
    skip = torch.tensor(skipped, dtype=torch.bool)
    heads[skip] = True
    tokens[skip] = True
    trace = PolicyTrace(
        sample_ids=torch.zeros(1, dtype=torch.long),
        skipped=skip[None],
        heads=heads[None],
        tokens=tokens[None],
    )
    trace.validate(cfg)
    return trace


@mcp.tool()
def flops_breakdown(
    heads_kept: list[int],
    tokens_kept: list[int],
    skipped: list[bool] | None = None,
    config: dict | None = None,
    config_path: str | None = None,
) -> dict:
    """Analytic FLOPs of one execution given per-block head and token counts.

    Args:
        heads_kept: Active heads per block (0..H)
        tokens_kept: Active spatial tokens per block (0..N)
        skipped: Whether each block is skipped (default: none skipped);
            counts of skipped blocks are ignored
        config: Optional model config mapping
        config_path: Optional JSON config file

    Returns:
        {"blocks": [per-block msa/mlp/controller rows], "executed": int,
        "total": int, "ratio": float, "ratio_without_controller": float}

    Examples:
        >>> flops_breakdown(heads_kept=[4, 4, 4, 4], tokens_kept=[16, 16, 16, 16])["ratio"]
        1.0
    """
    cfg = resolve_config(config, config_path)
    report = model_flops(trace_from_counts(heads_kept, tokens_kept, skipped, cfg), cfg)
    frame = flops_frame(report)
    summary = frame.filter(pl.col("block") == -1).row(0, named=True)
    blocks = frame.filter(pl.col("block") >= 0).select("block", "msa", "mlp", "controller", "skipped")
    return {
        "blocks": blocks.to_dicts(),
        "executed": summary["executed"],
        "total": summary["total"],
        "ratio": summary["ratio"],
        "ratio_without_controller": summary["ratio_without_controller"],
    }


@mcp.tool()
def skip_ratio_table(
    trace_path: str,
    config: dict | None = None,
    config_path: str | None = None,
) -> list[dict]:
    """Per-block skip ratios (depth, head, token) from a trace CSV.

    Args:
        trace_path: Trace CSV written by ``mia-former trace-policy``
        config: Optional model config mapping
        config_path: Optional JSON config file

    Returns:
        One row per block with block, samples, executed, block_skip,
        head_skip and token_skip (null when every sample skips the block)
    """
    cfg = resolve_config(config, config_path)
    return skip_ratio_stats(read_trace_frame(trace_path), cfg).to_dicts()


@mcp.tool()
def policy_grid(
    trace_path: str,
    sample_id: int,
    config: dict | None = None,
    config_path: str | None = None,
    fmt: str = "svg",
) -> Image.Image | bytes:
    """Policy grid of one sample from a trace CSV.

    Args:
        trace_path: Trace CSV written by ``mia-former trace-policy``
        sample_id: Sample to draw
        config: Optional model config mapping
        config_path: Optional JSON config file
        fmt: "svg" (default), "pdf" or "png"

    Returns:
        SVG/PDF bytes, or a PIL Image for PNG

    Raises:
        TraceError: If the sample is not in the trace
    """
    cfg = resolve_config(config, config_path)
    frame = read_trace_frame(trace_path).filter(pl.col("sample_id") == sample_id)
    if frame.height == 0:
        msg = f"Sample {sample_id} is not in {Path(trace_path).name}"
        raise TraceError(msg)
    return save_plot_to_image(policy_grid_figure(frame, cfg), fmt=fmt)
