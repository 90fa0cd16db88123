"""Optimizers for each training stage."""

import torch

from mia_former.model.former import MIAFormer
from mia_former.training.state import Stage


def build_optimizer(stage: Stage, model: MIAFormer) -> torch.optim.Optimizer:
    """Create the optimizer a stage trains with.

    Stage 0 trains the dense backbone with AdamW. Stage 1 trains the
    controllers alone with Adam. Stages 2-3 use AdamW with two parameter
    groups: backbone weights at the small co-training rate and controller
    weights (actor/critic heads included) at the larger one.

    Args:
        stage: Stage to build for
        model: Model whose parameters are optimized

    Returns:
        A fresh optimizer; its parameter groups are ``["backbone"]``,
        ``["controller"]`` or ``["backbone", "controller"]``
    """
    t = model.cfg.training
    if stage == Stage.BACKBONE:
        groups = [{"params": list(model.backbone_parameters()), "name": "backbone"}]
        return torch.optim.AdamW(groups, lr=t.backbone_lr, weight_decay=t.weight_decay)
    if stage == Stage.CONTROLLER_PRETRAIN:
        groups = [{"params": list(model.controller_parameters()), "name": "controller"}]
        return torch.optim.Adam(groups, lr=t.controller_pretrain_lr)
    groups = [
        {"params": list(model.backbone_parameters()), "lr": t.cotrain_backbone_lr, "name": "backbone"},
        {"params": list(model.controller_parameters()), "lr": t.cotrain_controller_lr, "name": "controller"},
    ]
    return torch.optim.AdamW(groups, lr=t.cotrain_controller_lr, weight_decay=t.weight_decay)
