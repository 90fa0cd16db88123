"""FLOPs accounting for masked MIA-Former executions."""

from mia_former.cost.flops import (
    BatchFlopsReport,
    BlockFlops,
    ControllerFlops,
    FlopsReport,
    block_flops,
    controller_flops,
    controller_parts,
    differentiable_cost,
    exec_ratios,
    flops_frame,
    model_flops,
    total_flops,
)

__all__ = [
    "BatchFlopsReport",
    "BlockFlops",
    "ControllerFlops",
    "FlopsReport",
    "block_flops",
    "controller_flops",
    "controller_parts",
    "differentiable_cost",
    "exec_ratios",
    "flops_frame",
    "model_flops",
    "total_flops",
]
