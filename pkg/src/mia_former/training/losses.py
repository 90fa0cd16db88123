"""Losses and reward rules for the three training stages."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor

from mia_former.errors import TraceError, TrainingDivergedError
from mia_former.model.masks import MaskBundle, RLDecision
from mia_former.types import MIAConfig


def pretrain_loss(bundles: Sequence[MaskBundle], hard: bool = False) -> Tensor:
    """Controller-pretraining loss pushing every mask towards "keep".

    Per block: (1 - G_b) + mean_h(1 - G_h) + mean_n(1 - G_n), summed over
    blocks and averaged over the batch. With ``hard=True`` the hard masks are
    used instead; stage 1 ends when that value is 0.

    Args:
        bundles: One MaskBundle per block
        hard: Use D instead of G

    Returns:
        Scalar loss tensor

    Raises:
        TraceError: If ``bundles`` is empty

    Examples:
        >>> cfg = MIAConfig.tiny()
        >>> pretrain_loss([MaskBundle.all_on(2, cfg)] * 4, hard=True).item()
        0.0
    """
    if not bundles:
        msg = "pretrain_loss needs at least one block's masks, got an empty list"
        raise TraceError(msg)
    total = torch.zeros((), dtype=bundles[0].g_block.dtype, device=bundles[0].g_block.device)
    for bundle in bundles:
        block, heads, tokens = (
            (bundle.d_block, bundle.d_heads, bundle.d_tokens)
            if hard
            else (bundle.g_block, bundle.g_heads, bundle.g_tokens)
        )
        per_sample = (1 - block) + (1 - heads).mean(dim=-1) + (1 - tokens).mean(dim=-1)
        total = total + per_sample.mean()
    return total


def dynamic_alpha(
    task_loss: float,
    cost_loss: float,
    exec_ratio: float,
    target_ratio: float,
    cfg: MIAConfig,
) -> float:
    """Signed cost weight for co-training.

    The magnitude is ``alpha_magnitude * task_loss / cost_loss``. It is
    positive while the model executes more than its budget, negative below
    the budget (encouraging more compute) and exactly 0 on target.

    Raises:
        ValueError: If cost_loss is 0

    Examples:
        >>> cfg = MIAConfig.tiny()
        >>> dynamic_alpha(2.0, 0.8, 0.8, 0.7, cfg)
        0.25
    """
    if cost_loss == 0:
        msg = "cost_loss is 0; the alpha magnitude task_loss / cost_loss is undefined"
        raise ValueError(msg)
    magnitude = cfg.alpha_magnitude * task_loss / cost_loss
    if exec_ratio > target_ratio:
        return magnitude
    if exec_ratio < target_ratio:
        return -magnitude
    return 0.0


@dataclass(frozen=True)
class RewardRecord:
    """Terminal reward for one sample.

    ``reward`` always equals ``y + beta * (target_ratio - exec_ratio)``.
    """

    y: int
    exec_ratio: float
    target_ratio: float
    beta: float
    reward: float

    def rederive(self) -> float:
        return reward_value(self.y, self.exec_ratio, self.target_ratio, self.beta)


def reward_value(y: float, exec_ratio: float, target_ratio: float, beta: float) -> float:
    return y + beta * (target_ratio - exec_ratio)


def compute_reward(y: int, exec_ratio: float, target_ratio: float, beta: float) -> RewardRecord:
    """Build the reward record for one sample; FLOPs terms are ratios of the total.

    Examples:
        >>> compute_reward(0, 0.5, 0.7, 0.5).reward
        0.09999999999999998
    """
    return RewardRecord(
        y=int(y),
        exec_ratio=float(exec_ratio),
        target_ratio=float(target_ratio),
        beta=float(beta),
        reward=reward_value(int(y), float(exec_ratio), float(target_ratio), float(beta)),
    )


def batch_rewards(correct: Tensor, exec_ratio: Tensor, target_ratio: float, beta: float) -> Tensor:
    """Vectorized rewards in float64; elementwise identical to ``compute_reward``."""
    y = correct.detach().to(torch.float64)
    return y + beta * (target_ratio - exec_ratio.detach().to(torch.float64))


class A2CLosses(NamedTuple):
    policy: Tensor
    value: Tensor
    entropy: Tensor


def a2c_losses(decisions: Sequence[RLDecision], reward: Tensor, entropy_coef: float = 0.01) -> A2CLosses:
    """Advantage actor-critic losses for single-step episodes.

    Each (block, dimension) group has one critic value and a joint
    log-probability, the sum over its binary decisions. All groups share the
    sample's terminal reward. Groups not evaluated for a sample (its block was
    skipped) contribute nothing. Sums run over groups; the batch is averaged.

    Args:
        decisions: Decision groups taken during one forward pass
        reward: Per-sample rewards, shape (batch,)
        entropy_coef: Entropy bonus weight

    Returns:
        A2CLosses(policy, value, entropy), each a scalar

    Raises:
        TrainingDivergedError: If any reward is non-finite
    """
    if not torch.isfinite(reward).all():
        msg = f"Non-finite reward passed to a2c_losses: {reward.tolist()}"
        raise TrainingDivergedError(msg)
    batch = reward.shape[0]
    policy = reward.new_zeros(batch)
    value = reward.new_zeros(batch)
    entropy = reward.new_zeros(batch)
    for group in decisions:
        taken = group.taken.to(reward.dtype)
        v = group.value.to(reward.dtype)
        advantage = (reward - v).detach()
        policy = policy - taken * group.log_prob.sum(dim=-1).to(reward.dtype) * advantage
        value = value + taken * (reward - v) ** 2
        entropy = entropy + taken * group.entropy.sum(dim=-1).to(reward.dtype)
    return A2CLosses(policy.mean(), value.mean(), -entropy_coef * entropy.mean())


def all_decisions(bundles: Sequence[MaskBundle]) -> list[RLDecision]:
    return [decision for bundle in bundles for decision in bundle.rl.values()]


def check_finite(value: float, what: str, **diagnostics: float) -> None:
    """Abort training on a non-finite loss.

    Raises:
        TrainingDivergedError: With the loss name and the given diagnostics
    """
    if math.isfinite(value):
        return
    details = ", ".join(f"{k}={v:.6g}" for k, v in diagnostics.items())
    msg = f"{what} became non-finite ({value}); {details}. Lower the learning rate or raise grad_clip."
    raise TrainingDivergedError(msg)
