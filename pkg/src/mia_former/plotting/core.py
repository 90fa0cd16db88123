"""Figure creation and byte-stable export using UltraPlot/Matplotlib.

Vector output is deterministic: the SVG id salt is fixed and the creation
date is dropped from SVG and PDF metadata, so the same figure always yields
the same bytes.
"""

import io
import logging
from pathlib import Path

import matplotlib as mpl
import matplotlib.figure
import matplotlib.pyplot as plt
import ultraplot as uplt
from PIL import Image

logger = logging.getLogger(__name__)

# Use non-interactive backend for headless training hosts
mpl.use("Agg")

SUPPORTED_FORMATS = ("png", "pdf", "svg")
SVG_HASH_SALT = "mia-former"

_METADATA = {
    "svg": {"Date": None},
    "pdf": {"CreationDate": None, "ModDate": None},
    "png": {},
}


def create_plot_figure(
    width_cm: float = 15.0,
    height_cm: float = 10.0,
) -> tuple[uplt.Figure, uplt.Axes]:
    """Create a single-panel UltraPlot figure sized in centimeters.

    Args:
        width_cm: Figure width in centimeters (default: 15.0)
        height_cm: Figure height in centimeters (default: 10.0)

    Returns:
        Tuple of (figure, axes)

    Examples:
        >>> fig, ax = create_plot_figure(width_cm=20, height_cm=6)
        >>> ax.plot([0, 1, 2], [0.1, 0.4, 0.2])
        >>> save_plot_to_image(fig, fmt="svg")
    """
    fig, axs = uplt.subplots(figwidth=f"{width_cm}cm", figheight=f"{height_cm}cm")
    return fig, axs[0]


def output_format(path: str | Path) -> str:
    """Image format from a file suffix.

    Raises:
        ValueError: If the suffix is not a supported format
    """
    fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in SUPPORTED_FORMATS:
        msg = f"Unsupported format: '{fmt or Path(path).name}'. Supported formats: {', '.join(SUPPORTED_FORMATS)}"
        raise ValueError(msg)
    return fmt


def save_plot_to_image(
    fig: matplotlib.figure.Figure,
    fmt: str = "png",
    dpi: int = 300,
) -> Image.Image | bytes:
    """Render a figure to a PIL Image (PNG) or bytes (PDF/SVG).

    The figure is closed afterwards.

    Args:
        fig: Matplotlib or UltraPlot figure object
        fmt: Output format ("png", "pdf", or "svg")
        dpi: Resolution for raster formats (only affects PNG)

    Returns:
        PIL Image object for PNG, or bytes for PDF/SVG

    Raises:
        ValueError: If format is not supported
    """
    fmt = fmt.lower()
    if fmt not in SUPPORTED_FORMATS:
        msg = f"Unsupported format: {fmt}. Supported formats: {', '.join(SUPPORTED_FORMATS)}"
        raise ValueError(msg)

    buffer = io.BytesIO()
    try:
        with mpl.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
            fig.savefig(buffer, format=fmt, dpi=dpi, metadata=_METADATA[fmt])
        buffer.seek(0)
        if fmt == "png":
            image = Image.open(buffer)
            # Copy so the image outlives the buffer
            img_copy = image.copy()
            img_copy.format = "PNG"
            return img_copy
        return buffer.getvalue()
    finally:
        plt.close(fig)


def save_plot(fig: matplotlib.figure.Figure, path: str | Path, dpi: int = 300) -> Path:
    """Write a figure to ``path`` in the format its suffix names.

    Raises:
        ValueError: If the suffix is not a supported format
        OSError: If the path is not writable
    """
    path = Path(path)
    fmt = output_format(path)
    rendered = save_plot_to_image(fig, fmt=fmt, dpi=dpi)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(rendered, Image.Image):
        rendered.save(path, format="PNG")
    else:
        path.write_bytes(rendered)
    logger.info("Wrote %s figure to %s", fmt.upper(), path)
    return path


def close_all_figures() -> None:
    """Close all matplotlib figures to free memory."""
    plt.close("all")
