"""White-box attacks on the full dynamic model.

Gradients flow through the controllers' straight-through path in eval mode,
and masks are recomputed on every perturbed input, so each attack step faces
the policy the model would actually execute.
"""

import logging

import torch
import torch.nn.functional as F
from torch import Tensor

from mia_former.errors import AttackError
from mia_former.model.former import MIAFormer
from mia_former.types import AttackSpec

logger = logging.getLogger(__name__)


def _input_gradient(model: MIAFormer, images: Tensor, labels: Tensor, step: int) -> Tensor:
    x = images.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model(x, mode="eval").logits, labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        msg = f"Non-finite input gradient at attack step {step}"
        raise AttackError(msg)
    return grad


def linf_bounds(x0: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    """Per-pixel bounds whose float distance to ``x0`` never exceeds ``eps``.

    ``x0 ± eps`` rounds in the tensor dtype and can land one ulp outside the
    ball; such bounds are stepped back toward ``x0`` until ``|bound - x0|``,
    evaluated in the same dtype, is at most ``eps``.

    Examples:
        >>> lo, hi = linf_bounds(torch.tensor([0.3, 0.7]), 0.002)
        >>> bool(((hi - torch.tensor([0.3, 0.7])).double() <= 0.002).all())
        True
    """
    lo, hi = x0 - eps, x0 + eps
    while True:
        high = (hi - x0).double() > eps
        low = (x0 - lo).double() > eps
        if not bool(high.any() or low.any()):
            return lo, hi
        hi = torch.where(high, torch.nextafter(hi, x0), hi)
        lo = torch.where(low, torch.nextafter(lo, x0), lo)


def pgd_attack(images: Tensor, labels: Tensor, model: MIAFormer, spec: AttackSpec) -> Tensor:
    """Projected gradient ascent on cross-entropy inside an L-inf ball.

    Each step moves by ``step_size * sign(grad)``, projects the perturbation
    onto ``[-epsilon, epsilon]`` and then onto the pixel range [0, 1]. The
    returned images are projected once more onto ``linf_bounds`` so the
    bound holds after float rounding.

    Args:
        images: Clean [0, 1] pixels
        labels: True labels
        model: Model under attack (weights are not modified)
        spec: Attack settings; ``kind`` must be "pgd_linf"

    Returns:
        Adversarial images with ``|x_adv - x| <= epsilon`` everywhere

    Raises:
        ValueError: If ``spec`` describes another attack
        AttackError: On a non-finite gradient, naming the step

    Examples:
        >>> x_adv = pgd_attack(x, y, model, AttackSpec.default("pgd_linf"))
        >>> float((x_adv - x).abs().max()) <= 0.002
        True
    """
    if spec.kind != "pgd_linf":
        msg = f"pgd_attack got a '{spec.kind}' spec"
        raise ValueError(msg)
    x0 = images.detach()
    eps = spec.epsilon
    if eps == 0:
        return x0.clone()
    model.eval()
    delta = torch.zeros_like(x0)
    if spec.random_start:
        generator = torch.Generator().manual_seed(spec.seed)
        delta = (torch.rand(x0.shape, generator=generator, dtype=x0.dtype) * 2 - 1) * eps
        delta = (x0 + delta).clamp(0, 1) - x0
    for step in range(spec.steps):
        grad = _input_gradient(model, x0 + delta, labels, step)
        delta = (delta + spec.resolved_step_size * grad.sign()).clamp(-eps, eps)
        delta = (x0 + delta).clamp(0, 1) - x0
        logger.debug("PGD step %d: max |delta| %.3g", step, float(delta.abs().max()))
    lo, hi = linf_bounds(x0, eps)
    return torch.minimum(torch.maximum(x0 + delta, lo), hi).clamp(0, 1).detach()


def fgsm_l2_attack(images: Tensor, labels: Tensor, model: MIAFormer, spec: AttackSpec) -> Tensor:
    """Single gradient step of L2 length ``epsilon`` per sample, then pixel clipping.

    Samples whose input gradient is exactly zero are returned unperturbed and
    reported with a warning.

    Raises:
        ValueError: If ``spec`` describes another attack
        AttackError: On a non-finite gradient
    """
    if spec.kind != "fgsm_l2":
        msg = f"fgsm_l2_attack got a '{spec.kind}' spec"
        raise ValueError(msg)
    x0 = images.detach()
    if spec.epsilon == 0:
        return x0.clone()
    model.eval()
    grad = _input_gradient(model, x0, labels, step=0)
    norms = grad.flatten(1).norm(dim=1)
    zero = norms == 0
    if bool(zero.any()):
        logger.warning("FGSM-L2: %d of %d samples have a zero input gradient; left unperturbed", int(zero.sum()), len(zero))
    direction = grad / norms.clamp_min(torch.finfo(grad.dtype).tiny).view(-1, *([1] * (grad.ndim - 1)))
    direction[zero] = 0
    return (x0 + spec.epsilon * direction).clamp(0, 1).detach()


def run_attack(images: Tensor, labels: Tensor, model: MIAFormer, spec: AttackSpec) -> Tensor:
    if spec.kind == "pgd_linf":
        return pgd_attack(images, labels, model, spec)
    return fgsm_l2_attack(images, labels, model, spec)
