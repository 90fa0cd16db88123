"""Per-sample policy grids and block-wise skip-ratio curves."""

from pathlib import Path

import polars as pl
import ultraplot as uplt
from matplotlib.patches import Rectangle

from mia_former.analytics.policy import trace_frame
from mia_former.errors import TraceError
from mia_former.model.masks import PolicyTrace
from mia_former.plotting.core import create_plot_figure, output_format, save_plot
from mia_former.plotting.formatters import (
    DIMENSION_COLORS,
    EXECUTED_COLOR,
    OUTLINE_COLOR,
    apply_style,
    dimension_label,
)
from mia_former.types import MIAConfig

CELL_CM = 1.6
FILL = 0.86  # fraction of a cell a fully executed block occupies


def _sample_rows(trace: PolicyTrace | pl.DataFrame, cfg: MIAConfig) -> tuple[int, list[dict]]:
    frame = trace_frame(trace) if isinstance(trace, PolicyTrace) else trace
    samples = frame["sample_id"].unique().to_list()
    if len(samples) != 1:
        msg = f"A policy grid shows one sample; the trace holds {len(samples)}"
        raise TraceError(msg)
    rows = frame.sort("block").to_dicts()
    if [r["block"] for r in rows] != list(range(cfg.num_blocks)):
        msg = f"Trace for sample {samples[0]} does not cover blocks 0..{cfg.num_blocks - 1} exactly once"
        raise TraceError(msg)
    return int(samples[0]), rows


def policy_grid_figure(trace: PolicyTrace | pl.DataFrame, cfg: MIAConfig) -> uplt.Figure:
    """Draw one sample's executed policy as a row of squares, one per block.

    An executed block is a filled rectangle whose height is ``h / H`` and
    whose width is ``n / N`` of a full cell. A skipped block is a dashed,
    uncolored full-size square. The output bytes depend only on the trace
    and the config.

    Args:
        trace: Single-sample PolicyTrace, or that sample's trace-CSV rows
        cfg: Configuration the trace was recorded with

    Returns:
        The figure, ready for ``save_plot`` or ``save_plot_to_image``

    Raises:
        TraceError: If the trace covers more than one sample or misses blocks
    """
    sample_id, rows = _sample_rows(trace, cfg)
    blocks = cfg.num_blocks
    fig, ax = create_plot_figure(width_cm=CELL_CM * blocks + 1.0, height_cm=CELL_CM + 1.2)
    margin = (1 - FILL) / 2
    for row in rows:
        x0 = row["block"]
        if row["skipped"]:
            ax.add_patch(
                Rectangle((x0 + margin, margin), FILL, FILL, fill=False, linestyle="--", edgecolor=OUTLINE_COLOR)
            )
            continue
        ax.add_patch(Rectangle((x0 + margin, margin), FILL, FILL, fill=False, linewidth=0.5, edgecolor=OUTLINE_COLOR))
        width = FILL * row["tokens_kept"] / cfg.num_tokens
        height = FILL * row["heads_kept"] / cfg.num_heads
        ax.add_patch(
            Rectangle(
                (x0 + 0.5 - width / 2, 0.5 - height / 2),
                width,
                height,
                facecolor=EXECUTED_COLOR,
                edgecolor="none",
            )
        )
    ax.set_aspect("equal")
    apply_style(
        ax,
        title=f"sample {sample_id}",
        xlabel="block",
        grid=False,
        xlim=(0, blocks),
        ylim=(0, 1),
    )
    ax.set_xticks([b + 0.5 for b in range(blocks)], [str(b) for b in range(blocks)])
    ax.set_yticks([])
    return fig


def export_policy_grid(trace: PolicyTrace | pl.DataFrame, cfg: MIAConfig, path: str | Path) -> Path:
    """Write the policy grid of one sample; ``.svg`` gives byte-stable vector text.

    Raises:
        TraceError: If the trace covers more than one sample or misses blocks
        OSError: If the path is not writable

    Examples:
        >>> export_policy_grid(eval_trace.select(0), cfg, "grid.svg")
        PosixPath('grid.svg')
    """
    output_format(path)
    return save_plot(policy_grid_figure(trace, cfg), path)


def plot_skip_ratios(stats: pl.DataFrame, path: str | Path, title: str | None = None) -> Path:
    """Line plot of block-wise skip ratios for the depth, head and token dimensions.

    Args:
        stats: Output of ``skip_ratio_stats``
        path: Output file (.svg, .pdf or .png)
        title: Optional title

    Returns:
        The written path

    Raises:
        TraceError: If ``stats`` lacks the skip-ratio columns
    """
    output_format(path)
    missing = [c for c in ("block", *DIMENSION_COLORS) if c not in stats.columns]
    if missing:
        msg = f"Skip-ratio table is missing column(s) {missing}; build it with skip_ratio_stats"
        raise TraceError(msg)
    fig, ax = create_plot_figure(width_cm=14.0, height_cm=8.0)
    blocks = stats["block"].to_list()
    for column, color in DIMENSION_COLORS.items():
        # Null head/token ratios (block always skipped) leave gaps in the line
        values = [float("nan") if v is None else v for v in stats[column].to_list()]
        ax.plot(blocks, values, color=color, marker="o", linewidth=1.5, label=dimension_label(column))
    ax.legend(loc="upper right", ncols=1)
    apply_style(ax, title=title, xlabel="block", ylabel="skip ratio", ylim=(0, 1), xticks=blocks)
    return save_plot(fig, path)
