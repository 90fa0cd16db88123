"""Partial weight inheritance from a co-trained model into the RL stage."""

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from mia_former.errors import StageError
from mia_former.model.backbone import INIT_STD
from mia_former.model.controller import FINAL_LAYERS
from mia_former.model.former import MIAFormer
from mia_former.training.checkpoint import load_checkpoint
from mia_former.training.state import Stage, TrainState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InheritReport:
    """Which controller tensors were copied and which were reinitialized.

    Names are ``state_dict`` paths relative to the model. The final layers
    replaced by actor/critic heads are listed in neither set.
    """

    model: MIAFormer
    inherited: tuple[str, ...]
    reinitialized: tuple[str, ...]
    inherited_count: int
    total_count: int

    @property
    def inherited_fraction(self) -> float:
        return self.inherited_count / self.total_count if self.total_count else 1.0


def _is_final_layer(name: str) -> bool:
    # controllers.<i>.<layer>.<weight|bias>
    return name.split(".")[2] in FINAL_LAYERS


def inherit_weights(model: MIAFormer, rho: float, seed: int) -> InheritReport:
    """Prepare a stage-3 model from a stage-2 one.

    Backbone weights are copied verbatim. Each controller branch's final FC is
    replaced by a fresh actor/critic pair. The remaining controller tensors
    are visited in a seeded random order and reinitialized until at least
    ``(1 - rho)`` of their parameter count is fresh; the rest are copied. The
    inherited count is therefore within one tensor's size of ``rho``.

    Args:
        model: Co-trained model (left unchanged)
        rho: Fraction of controller parameters to inherit, in [0, 1]
        seed: Seed for tensor selection and all fresh initializations

    Returns:
        InheritReport holding the new model and the selection

    Raises:
        ValueError: If rho is outside [0, 1]
        StageError: If the model already carries actor/critic heads

    Examples:
        >>> report = inherit_weights(cotrained, rho=1.0, seed=0)
        >>> report.reinitialized
        ()
    """
    if not 0.0 <= rho <= 1.0:
        msg = f"inherit fraction must be in [0, 1], got {rho}"
        raise ValueError(msg)
    if model.has_rl_heads:
        msg = "Model already has actor/critic heads; inherit from a co-trained (stage-2) model"
        raise StageError(msg)

    new = copy.deepcopy(model)
    generator = torch.Generator().manual_seed(seed)
    candidates = [
        (name, param)
        for name, param in new.named_parameters()
        if name.startswith("controllers.") and not _is_final_layer(name)
    ]
    total = sum(p.numel() for _, p in candidates)
    target = (1.0 - rho) * total
    order = torch.randperm(len(candidates), generator=generator).tolist()

    fresh: set[str] = set()
    fresh_count = 0
    for index in order:
        if fresh_count >= target or math.isclose(fresh_count, target):
            break
        name, param = candidates[index]
        fresh.add(name)
        fresh_count += param.numel()

    with torch.no_grad():
        for name, param in candidates:
            if name not in fresh:
                continue
            if name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, INIT_STD, generator=generator)
                param.clamp_(-2 * INIT_STD, 2 * INIT_STD)
    new.install_rl_heads(generator)

    inherited = tuple(name for name, _ in candidates if name not in fresh)
    report = InheritReport(
        model=new,
        inherited=inherited,
        reinitialized=tuple(name for name, _ in candidates if name in fresh),
        inherited_count=total - fresh_count,
        total_count=total,
    )
    logger.info(
        "Inherited %d/%d controller parameters (%.3f, requested %.3f); %d tensors reinitialized",
        report.inherited_count,
        total,
        report.inherited_fraction,
        rho,
        len(report.reinitialized),
    )
    return report


def inherit_from_checkpoint(path: str | Path, rho: float, seed: int) -> TrainState:
    """Load a stage-2 checkpoint and return a state ready for stage 3.

    Raises:
        CheckpointError: If the checkpoint is missing
        StageError: If co-training is not marked complete in it
    """
    state = load_checkpoint(path)
    if not state.is_completed(Stage.COTRAIN):
        msg = f"Checkpoint {path} has no completed co-training stage (completed: {[str(s) for s in state.completed]})"
        raise StageError(msg)
    report = inherit_weights(state.model, rho, seed)
    state.model = report.model
    state.optimizer = None
    state.enter(Stage.RL_FINETUNE)
    state.tau = state.cfg.gumbel_tau_end
    return state
