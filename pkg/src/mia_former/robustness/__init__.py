"""Adversarial robustness evaluation for MIA-Former."""

from mia_former.robustness.attacks import fgsm_l2_attack, pgd_attack, run_attack
from mia_former.robustness.evaluate import AttackResult, RobustnessReport, attack_split, evaluate

__all__ = [
    "AttackResult",
    "RobustnessReport",
    "attack_split",
    "evaluate",
    "fgsm_l2_attack",
    "pgd_attack",
    "run_attack",
]
