"""Training module for MIA-Former.

This module provides the losses, stage runners, checkpoint persistence and
metric logs of the staged training pipeline.
"""

from mia_former.training.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from mia_former.training.inherit import InheritReport, inherit_from_checkpoint, inherit_weights
from mia_former.training.losses import (
    A2CLosses,
    RewardRecord,
    a2c_losses,
    compute_reward,
    dynamic_alpha,
    pretrain_loss,
)
from mia_former.training.metrics import CsvLog, RunLogs
from mia_former.training.stages import (
    EvalSummary,
    cotrain_step,
    evaluate_accuracy,
    hybrid_step,
    run_controller_pretrain,
    run_cotrain,
    run_rl_finetune,
    run_stage,
    train_backbone,
)
from mia_former.training.state import Stage, TrainState

__all__ = [
    "A2CLosses",
    "CsvLog",
    "EvalSummary",
    "InheritReport",
    "RewardRecord",
    "RunLogs",
    "Stage",
    "TrainState",
    "a2c_losses",
    "compute_reward",
    "cotrain_step",
    "dynamic_alpha",
    "evaluate_accuracy",
    "hybrid_step",
    "inherit_from_checkpoint",
    "inherit_weights",
    "load_checkpoint",
    "pretrain_loss",
    "read_manifest",
    "run_controller_pretrain",
    "run_cotrain",
    "run_rl_finetune",
    "run_stage",
    "save_checkpoint",
    "train_backbone",
]
