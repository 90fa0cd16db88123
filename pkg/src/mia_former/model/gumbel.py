"""Binary decision primitives: straight-through Gumbel-sigmoid and Bernoulli policies.

Every controller decision is a single keep-logit. Stages 1-2 relax it with a
binary-concrete (Gumbel-sigmoid) sample whose forward value is the hard
threshold and whose gradient is the soft value's. Stage 3 samples it as a
Bernoulli action for the actor-critic agent.
"""

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import Tensor

Mode = Literal["train", "eval"]

_U_EPS = 1e-6


def straight_through(hard: Tensor, soft: Tensor) -> Tensor:
    """Return ``hard`` in the forward pass with the gradient of ``soft``.

    ``soft - soft.detach()`` is exactly zero, so the forward value is
    bit-identical to ``hard``.
    """
    return hard.detach() + (soft - soft.detach())


def sample_logistic(
    shape: torch.Size | tuple[int, ...],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str | None = None,
) -> Tensor:
    """Draw logistic noise, the difference of two Gumbel samples."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    u = u.clamp(_U_EPS, 1 - _U_EPS)
    return torch.log(u) - torch.log1p(-u)


def gumbel_binary(
    logit: Tensor,
    tau: float,
    mode: Mode,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Relax a batch of binary keep-decisions.

    Args:
        logit: Keep-logits of any shape
        tau: Gumbel temperature, must be positive
        mode: "eval" thresholds sigmoid(logit) without noise; "train" adds
            logistic noise and divides by tau
        generator: RNG for the train-mode noise
        noise: Pre-drawn noise (same shape as logit), for frozen-noise checks

    Returns:
        Tuple of (hard, soft). ``hard`` is exactly 0/1 in the forward pass and
        carries the gradient of ``soft``; ``soft >= 0.5`` resolves to keep.

    Raises:
        ValueError: If tau is not positive

    Examples:
        >>> hard, soft = gumbel_binary(torch.tensor([3.0, 0.0]), tau=1.0, mode="eval")
        >>> hard.tolist(), soft[1].item()
        ([1.0, 1.0], 0.5)
    """
    if tau <= 0:
        msg = f"Gumbel temperature must be positive, got tau={tau}"
        raise ValueError(msg)
    if mode == "eval":
        soft = torch.sigmoid(logit)
    else:
        if noise is None:
            noise = sample_logistic(logit.shape, generator, logit.dtype, logit.device)
        soft = torch.sigmoid((logit + noise) / tau)
    hard = (soft >= 0.5).to(soft.dtype)
    return straight_through(hard, soft), soft


@dataclass
class PolicySample:
    """Bernoulli actions drawn by an actor head.

    Attributes:
        action: Hard 0/1 actions, shape (batch, K)
        prob: Keep-probabilities, shape (batch, K)
        log_prob: Per-decision log-probability of the taken action
        entropy: Per-decision Bernoulli entropy
    """

    action: Tensor
    prob: Tensor
    log_prob: Tensor
    entropy: Tensor


def bernoulli_policy(
    logit: Tensor,
    tau: float,
    mode: Mode,
    generator: torch.Generator | None = None,
) -> PolicySample:
    """Sample (train) or take the argmax (eval) of independent Bernoulli decisions."""
    if tau <= 0:
        msg = f"Policy temperature must be positive, got tau={tau}"
        raise ValueError(msg)
    z = logit / tau
    prob = torch.sigmoid(z)
    if mode == "eval":
        action = (prob >= 0.5).to(prob.dtype)
    else:
        u = torch.rand(prob.shape, generator=generator, dtype=prob.dtype, device=prob.device)
        action = (u < prob.detach()).to(prob.dtype)
    log_keep, log_drop = F.logsigmoid(z), F.logsigmoid(-z)
    log_prob = action * log_keep + (1 - action) * log_drop
    entropy = -(prob * log_keep + (1 - prob) * log_drop)
    return PolicySample(action=action, prob=prob, log_prob=log_prob, entropy=entropy)
