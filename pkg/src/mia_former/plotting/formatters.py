"""Shared styling for policy figures."""

import ultraplot as uplt

# One color per dynamic dimension, used by every policy figure
DIMENSION_COLORS = {
    "block_skip": "#1f4e9c",
    "head_skip": "#d9822b",
    "token_skip": "#2e8b57",
}

EXECUTED_COLOR = "#4a90d9"
OUTLINE_COLOR = "#9aa5b1"


def apply_style(
    ax: uplt.Axes,
    title: str | None = None,
    xlabel: str | None = None,
    ylabel: str | None = None,
    grid: bool = True,
    **extra: object,
) -> None:
    """Apply labels, grid and any extra ``format()`` keys in one call.

    Args:
        ax: UltraPlot axes object to style
        title: Plot title
        xlabel: X-axis label
        ylabel: Y-axis label
        grid: Whether to show grid lines (default: True)
        **extra: Passed through to ``ax.format`` (e.g. ``ylim``, ``xticks``)

    Examples:
        >>> fig, ax = create_plot_figure()
        >>> apply_style(ax, title="Skip ratios", xlabel="Block", ylim=(0, 1))
    """
    format_kwargs: dict[str, object] = {"grid": grid}
    if title is not None:
        format_kwargs["title"] = title
    if xlabel is not None:
        format_kwargs["xlabel"] = xlabel
    if ylabel is not None:
        format_kwargs["ylabel"] = ylabel
    format_kwargs.update(extra)
    ax.format(**format_kwargs)


def dimension_label(column: str) -> str:
    """Legend label for a skip-ratio column.

    Examples:
        >>> dimension_label("head_skip")
        'head'
    """
    return column.removesuffix("_skip").replace("block", "depth")
