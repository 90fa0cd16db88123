"""Clean and adversarial evaluation reports."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import polars as pl
import torch

from mia_former.data.loaders import Split
from mia_former.errors import DatasetError
from mia_former.model.former import MIAFormer
from mia_former.robustness.attacks import run_attack
from mia_former.training.stages import EVAL_BATCH, evaluate_accuracy
from mia_former.types import AttackSpec

logger = logging.getLogger(__name__)

REPORT_SCHEMA = {
    "checkpoint": pl.String,
    "attack": pl.String,
    "epsilon": pl.Float64,
    "steps": pl.Int64,
    "clean_acc": pl.Float64,
    "robust_acc": pl.Float64,
    "exec_ratio_clean": pl.Float64,
    "exec_ratio_adv": pl.Float64,
}


@dataclass(frozen=True)
class AttackResult:
    spec: AttackSpec
    robust_acc: float
    exec_ratio_adv: float


@dataclass(frozen=True)
class RobustnessReport:
    """Clean metrics plus one result per attack."""

    checkpoint: str
    clean_acc: float
    exec_ratio_clean: float
    attacks: tuple[AttackResult, ...]

    def frame(self) -> pl.DataFrame:
        """One CSV row per attack; a single clean row when no attack ran."""
        rows = [
            {
                "checkpoint": self.checkpoint,
                "attack": r.spec.kind,
                "epsilon": r.spec.epsilon,
                "steps": r.spec.steps if r.spec.kind == "pgd_linf" else 1,
                "clean_acc": self.clean_acc,
                "robust_acc": r.robust_acc,
                "exec_ratio_clean": self.exec_ratio_clean,
                "exec_ratio_adv": r.exec_ratio_adv,
            }
            for r in self.attacks
        ]
        if not rows:
            rows.append(
                {
                    "checkpoint": self.checkpoint,
                    "attack": "none",
                    "epsilon": 0.0,
                    "steps": 0,
                    "clean_acc": self.clean_acc,
                    "robust_acc": None,
                    "exec_ratio_clean": self.exec_ratio_clean,
                    "exec_ratio_adv": None,
                }
            )
        return pl.DataFrame(rows, schema=REPORT_SCHEMA)

    def summary(self) -> str:
        lines = [f"clean_acc={self.clean_acc:.4f} exec_ratio={self.exec_ratio_clean:.4f}"]
        lines.extend(
            f"{r.spec.kind}(eps={r.spec.epsilon:g}): robust_acc={r.robust_acc:.4f} exec_ratio={r.exec_ratio_adv:.4f}"
            for r in self.attacks
        )
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().write_csv(path)
        return path


def attack_split(
    model: MIAFormer,
    split: Split,
    spec: AttackSpec,
    batch_size: int = EVAL_BATCH,
) -> AttackResult:
    """Robust accuracy and executed FLOPs ratio on adversarial inputs."""
    hits, ratios = 0, []
    for images, labels, _ in split.batches(batch_size):
        adv = run_attack(images, labels, model, spec)
        with torch.no_grad():
            out = model(adv, mode="eval")
        hits += int((out.logits.argmax(dim=-1) == labels).sum())
        ratios.append(out.exec_ratio)
    return AttackResult(spec, hits / len(split), float(torch.cat(ratios).mean()))


def evaluate(
    model: MIAFormer,
    split: Split,
    attacks: Sequence[AttackSpec] = (),
    checkpoint: str = "",
    batch_size: int = EVAL_BATCH,
) -> RobustnessReport:
    """Clean accuracy, per-attack robust accuracy and exec ratios.

    Raises:
        DatasetError: If the split is empty
    """
    if len(split) == 0:
        msg = "Cannot evaluate robustness on an empty dataset split"
        raise DatasetError(msg)
    clean = evaluate_accuracy(model, split, batch_size)
    results = []
    for spec in attacks:
        result = attack_split(model, split, spec, batch_size)
        logger.info("%s eps=%g: robust_acc=%.4f (clean %.4f)", spec.kind, spec.epsilon, result.robust_acc, clean.accuracy)
        results.append(result)
    return RobustnessReport(checkpoint, clean.accuracy, clean.exec_ratio_mean, tuple(results))
