"""Training state shared by all stages."""

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import torch

from mia_former.errors import StageError
from mia_former.model.former import MIAFormer
from mia_former.types import MIAConfig

logger = logging.getLogger(__name__)


class Stage(StrEnum):
    """Training stages in their only permitted order."""

    BACKBONE = "backbone"
    CONTROLLER_PRETRAIN = "controller_pretrain"
    COTRAIN = "cotrain"
    RL_FINETUNE = "rl_finetune"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


# stage -> stage whose completion marker it needs
PREREQUISITES: dict[Stage, Stage | None] = {
    Stage.BACKBONE: None,
    Stage.CONTROLLER_PRETRAIN: None,
    Stage.COTRAIN: Stage.CONTROLLER_PRETRAIN,
    Stage.RL_FINETUNE: Stage.COTRAIN,
}


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly.

    Attributes:
        model: Backbone plus controllers (and actor/critic heads in stage 3)
        stage: Current (or last run) stage
        epoch: Epochs completed within ``stage``
        tau: Current Gumbel/policy temperature
        completed: Stages finished so far, in order
        generator: The single RNG behind every stochastic decision
        optimizer: Optimizer of the current stage, when one exists
        history: Per-epoch metric rows
    """

    model: MIAFormer
    stage: Stage = Stage.BACKBONE
    epoch: int = 0
    tau: float = 0.0
    completed: list[Stage] = field(default_factory=list)
    generator: torch.Generator = field(default_factory=torch.Generator)
    optimizer: torch.optim.Optimizer | None = None
    history: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: MIAConfig) -> "TrainState":
        """New state with a freshly initialized model seeded from ``cfg.seed``."""
        generator = torch.Generator().manual_seed(cfg.seed)
        model = MIAFormer(cfg, generator)
        return cls(model=model, tau=cfg.gumbel_tau_start, generator=generator)

    @property
    def cfg(self) -> MIAConfig:
        return self.model.cfg

    def is_completed(self, stage: Stage) -> bool:
        return stage in self.completed

    def enter(self, stage: Stage) -> None:
        """Move to ``stage``, resuming it if it is the current unfinished one.

        Raises:
            StageError: On a backward transition or a missing prerequisite
        """
        if stage == self.stage and not self.is_completed(stage):
            return
        latest = max((s.order for s in self.completed), default=-1)
        if stage.order <= latest:
            msg = (
                f"Cannot enter stage '{stage}' after '{Stage(list(Stage)[latest])}' completed; "
                "stage transitions only go forward"
            )
            raise StageError(msg)
        required = PREREQUISITES[stage]
        if required is not None and not self.is_completed(required):
            msg = f"Stage '{stage}' requires a completed '{required}' stage; run it first or pass its checkpoint"
            raise StageError(msg)
        logger.info("Entering stage %s", stage)
        self.stage = stage
        self.epoch = 0
        self.optimizer = None

    def complete(self) -> None:
        if not self.is_completed(self.stage):
            self.completed.append(self.stage)
        logger.info("Stage %s completed after %d epochs", self.stage, self.epoch)

    def clone(self, cfg: MIAConfig | None = None) -> "TrainState":
        """Independent copy, optionally under a config with the same architecture.

        The copy has no optimizer; its generator continues from this state's
        generator.

        Raises:
            StageError: If ``cfg`` changes the model layout
        """
        model = MIAFormer(cfg or self.cfg)
        if self.model.has_rl_heads:
            model.install_rl_heads()
        try:
            model.load_state_dict(self.model.state_dict())
        except RuntimeError as e:
            msg = f"Cannot move training state to a config with a different model layout: {e}"
            raise StageError(msg) from e
        generator = torch.Generator()
        generator.set_state(self.generator.get_state())
        return TrainState(
            model=model,
            stage=self.stage,
            epoch=self.epoch,
            tau=self.tau,
            completed=list(self.completed),
            generator=generator,
            history=list(self.history),
        )
