"""Tests for figure export and policy figures."""

from pathlib import Path

import polars as pl
import pytest
import torch
from PIL import Image

from mia_former.analytics.policy import skip_ratio_stats, trace_frame
from mia_former.errors import TraceError
from mia_former.model.masks import MaskBundle, PolicyTrace
from mia_former.plotting.core import create_plot_figure, output_format, save_plot, save_plot_to_image
from mia_former.plotting.formatters import dimension_label
from mia_former.plotting.policy import export_policy_grid, plot_skip_ratios, policy_grid_figure
from mia_former.types import MIAConfig


def _sample(cfg: MIAConfig, sample_id: int = 3) -> PolicyTrace:
    heads = torch.ones(1, cfg.num_blocks, cfg.num_heads, dtype=torch.bool)
    tokens = torch.ones(1, cfg.num_blocks, cfg.num_tokens, dtype=torch.bool)
    heads[0, 0, 1:] = False
    tokens[0, 2, :4] = False
    skipped = torch.zeros(1, cfg.num_blocks, dtype=torch.bool)
    skipped[0, 1] = True
    return PolicyTrace(torch.tensor([sample_id]), skipped, heads, tokens)


def test_create_plot_figure() -> None:
    """Test figure creation returns a figure and one axes."""
    fig, ax = create_plot_figure(width_cm=10, height_cm=5)
    assert fig is not None
    assert ax is not None


def test_save_plot_to_image_formats() -> None:
    """Test PNG gives a PIL image, PDF and SVG give bytes."""
    fig, ax = create_plot_figure()
    ax.plot([0, 1, 2], [0.1, 0.4, 0.2])
    png = save_plot_to_image(fig, fmt="png", dpi=50)
    assert isinstance(png, Image.Image)
    assert png.format == "PNG"

    fig, ax = create_plot_figure()
    ax.plot([0, 1], [0, 1])
    pdf = save_plot_to_image(fig, fmt="pdf")
    assert isinstance(pdf, bytes)
    assert pdf.startswith(b"%PDF")

    fig, ax = create_plot_figure()
    ax.plot([0, 1], [0, 1])
    svg = save_plot_to_image(fig, fmt="svg")
    assert isinstance(svg, bytes)
    assert b"<svg" in svg


def test_invalid_format() -> None:
    """Test an unsupported format raises ValueError."""
    fig, _ = create_plot_figure()
    with pytest.raises(ValueError, match="Unsupported format"):
        save_plot_to_image(fig, fmt="jpeg")
    with pytest.raises(ValueError, match="Unsupported format"):
        output_format("grid.gif")
    assert output_format("grid.SVG") == "svg"


def test_save_plot_writes_png(tmp_path: Path) -> None:
    """Test save_plot picks the format from the suffix."""
    fig, ax = create_plot_figure()
    ax.plot([0, 1], [1, 0])
    path = save_plot(fig, tmp_path / "sub" / "line.png", dpi=50)
    with Image.open(path) as img:
        assert img.format == "PNG"


def test_policy_grid_svg_is_byte_stable(tmp_path: Path, cfg: MIAConfig) -> None:
    """Test exporting the same sample twice gives identical SVG bytes."""
    a = export_policy_grid(_sample(cfg), cfg, tmp_path / "a.svg")
    b = export_policy_grid(_sample(cfg), cfg, tmp_path / "b.svg")
    assert a.read_bytes() == b.read_bytes()


def test_policy_grid_from_frame_matches_trace(cfg: MIAConfig) -> None:
    """Test the trace-CSV rows draw the same grid as the in-memory trace."""
    trace = _sample(cfg)
    from_trace = save_plot_to_image(policy_grid_figure(trace, cfg), fmt="svg")
    from_frame = save_plot_to_image(policy_grid_figure(trace_frame(trace), cfg), fmt="svg")
    assert from_trace == from_frame


def test_policy_grid_depends_on_policy(cfg: MIAConfig) -> None:
    """Test different policies draw different grids."""
    dense = PolicyTrace.from_bundles([MaskBundle.all_on(1, cfg)] * cfg.num_blocks, sample_ids=torch.tensor([3]))
    a = save_plot_to_image(policy_grid_figure(dense, cfg), fmt="svg")
    b = save_plot_to_image(policy_grid_figure(_sample(cfg), cfg), fmt="svg")
    assert a != b


def test_policy_grid_single_sample_only(cfg: MIAConfig) -> None:
    """Test a multi-sample trace or incomplete rows raise TraceError."""
    one = _sample(cfg)
    two = PolicyTrace.cat([one, _sample(cfg, sample_id=4)])
    with pytest.raises(TraceError, match="one sample"):
        policy_grid_figure(two, cfg)
    partial = trace_frame(one).filter(pl.col("block") != 2)
    with pytest.raises(TraceError, match="exactly once"):
        policy_grid_figure(partial, cfg)


def test_plot_skip_ratios(tmp_path: Path, cfg: MIAConfig) -> None:
    """Test the skip-ratio curve is written, including null ratios."""
    trace = _sample(cfg)
    stats = skip_ratio_stats(trace, cfg)
    assert stats["head_skip"][1] is None
    path = plot_skip_ratios(stats, tmp_path / "skip.svg", title="Skip ratios")
    assert path.exists()
    assert b"<svg" in path.read_bytes()


def test_plot_skip_ratios_missing_columns(tmp_path: Path) -> None:
    """Test a table without skip-ratio columns raises TraceError."""
    with pytest.raises(TraceError, match="missing column"):
        plot_skip_ratios(pl.DataFrame({"block": [0, 1]}), tmp_path / "skip.svg")


def test_dimension_label() -> None:
    """Test legend labels for skip-ratio columns."""
    assert dimension_label("block_skip") == "depth"
    assert dimension_label("head_skip") == "head"
    assert dimension_label("token_skip") == "token"
