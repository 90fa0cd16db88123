"""Plotting: byte-stable figure export and policy figures."""

from mia_former.plotting.core import close_all_figures, create_plot_figure, save_plot, save_plot_to_image
from mia_former.plotting.formatters import apply_style
from mia_former.plotting.policy import export_policy_grid, plot_skip_ratios

__all__ = [
    "apply_style",
    "close_all_figures",
    "create_plot_figure",
    "export_policy_grid",
    "plot_skip_ratios",
    "save_plot",
    "save_plot_to_image",
]
