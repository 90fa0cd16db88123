"""Policy analytics: skip-ratio statistics, trace files, ablation harnesses."""

from mia_former.analytics.ablation import (
    ALL_SUBSETS,
    ablation_harness,
    dims_label,
    inheritance_sweep,
    parse_dims,
)
from mia_former.analytics.policy import (
    read_trace,
    read_trace_frame,
    rle_decode,
    rle_encode,
    skip_ratio_stats,
    trace_frame,
    write_trace,
)

__all__ = [
    "ALL_SUBSETS",
    "ablation_harness",
    "dims_label",
    "inheritance_sweep",
    "parse_dims",
    "read_trace",
    "read_trace_frame",
    "rle_decode",
    "rle_encode",
    "skip_ratio_stats",
    "trace_frame",
    "write_trace",
]
