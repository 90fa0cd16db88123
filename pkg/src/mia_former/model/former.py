"""MIA-Former: backbone blocks interleaved with their controllers."""

from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import torch
from torch import Tensor, nn

from mia_former.cost.flops import BatchFlopsReport, exec_ratios, model_flops
from mia_former.errors import MaskError
from mia_former.model.backbone import ClassifierHead, FeatureMap, MIABlock, PatchEmbed, init_weights, masked_block_forward
from mia_former.model.controller import MIAController, controller_step
from mia_former.model.gumbel import Mode
from mia_former.model.masks import MaskBundle, PolicyTrace
from mia_former.types import MIAConfig

Policy = Literal["model", "all_on", "skip_all"]


@dataclass
class ForwardOutput:
    """Everything one forward pass produces.

    Attributes:
        logits: (batch, num_classes)
        bundles: One MaskBundle per block
        cfg: Config the model was built with
    """

    logits: Tensor
    bundles: list[MaskBundle]
    cfg: MIAConfig

    @cached_property
    def trace(self) -> PolicyTrace:
        return PolicyTrace.from_bundles(self.bundles)

    @cached_property
    def flops(self) -> BatchFlopsReport:
        return model_flops(self.trace, self.cfg)

    @property
    def exec_ratio(self) -> Tensor:
        """Per-sample executed FLOPs ratio, float64, no gradient."""
        return exec_ratios(self.bundles, self.cfg)


class MIAFormer(nn.Module):
    """Vision transformer with per-block input-adaptive depth/head/token masking.

    Input images are [0, 1]-scaled; normalization happens inside the model so
    adversarial perturbations live in pixel space.
    """

    def __init__(self, cfg: MIAConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        mean = torch.tensor(cfg.pixel_mean).view(1, -1, 1, 1)
        std = torch.tensor(cfg.pixel_std).view(1, -1, 1, 1)
        self.register_buffer("pixel_mean", mean)
        self.register_buffer("pixel_std", std)
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(MIABlock(cfg) for _ in range(cfg.num_blocks))
        self.controllers = nn.ModuleList(MIAController(cfg) for _ in range(cfg.num_blocks))
        self.head = ClassifierHead(cfg)
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        init_weights(self, generator)
        self.patch_embed.reset_parameters(generator)

    # -- parameter groups ---------------------------------------------------

    def backbone_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.patch_embed, self.blocks, self.head):
            yield from module.parameters()

    def controller_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.controllers.parameters()

    def rl_head_parameters(self) -> Iterator[nn.Parameter]:
        for ctrl in self.controller_modules():
            if ctrl.rl is not None:
                yield from ctrl.rl.parameters()

    def controller_modules(self) -> list[MIAController]:
        return [c for c in self.controllers if isinstance(c, MIAController)]

    def block_modules(self) -> list[MIABlock]:
        return [b for b in self.blocks if isinstance(b, MIABlock)]

    @property
    def has_rl_heads(self) -> bool:
        return all(c.has_rl_heads for c in self.controller_modules())

    def install_rl_heads(self, generator: torch.Generator | None = None) -> None:
        for ctrl in self.controller_modules():
            ctrl.install_rl_heads(generator)

    # -- forward ------------------------------------------------------------

    def embed(self, images: Tensor) -> FeatureMap:
        return self.patch_embed((images - self.pixel_mean) / self.pixel_std)

    def forward(
        self,
        images: Tensor,
        mode: Mode = "eval",
        tau: float | None = None,
        generator: torch.Generator | None = None,
        policy: Policy = "model",
        masks: Sequence[MaskBundle] | None = None,
    ) -> ForwardOutput:
        """Run the full dynamic model.

        Args:
            images: (batch, C, S, S) pixels in [0, 1]
            mode: "train" samples controller decisions, "eval" is deterministic
            tau: Gumbel/policy temperature (defaults to the config's tau_end)
            generator: RNG for train-mode decisions
            policy: "model" uses the controllers; "all_on" / "skip_all" force
                every block on / skipped without running the controllers
            masks: Explicit per-block bundles overriding the controllers

        Returns:
            ForwardOutput with logits, per-block bundles, trace and FLOPs
        """
        cfg = self.cfg
        tau = cfg.gumbel_tau_end if tau is None else tau
        if masks is not None and len(masks) != cfg.num_blocks:
            msg = f"Expected {cfg.num_blocks} mask bundles, got {len(masks)}"
            raise MaskError(msg)
        x = self.embed(images)
        batch = images.shape[0]
        bundles: list[MaskBundle] = []
        for index, (block, ctrl) in enumerate(zip(self.block_modules(), self.controller_modules(), strict=True)):
            if masks is not None:
                bundle = masks[index]
            elif policy == "all_on":
                bundle = MaskBundle.all_on(batch, cfg, images.device, x.tokens.dtype)
            elif policy == "skip_all":
                bundle = MaskBundle.skip_all(batch, cfg, images.device, x.tokens.dtype)
            else:
                bundle = controller_step(x, ctrl, tau, mode, generator)
            x = masked_block_forward(x, bundle, block)
            bundles.append(bundle)
        return ForwardOutput(self.head(x), bundles, cfg)


def model_forward(
    images: Tensor,
    model: MIAFormer,
    mode: Mode = "eval",
    generator: torch.Generator | None = None,
    tau: float | None = None,
) -> tuple[Tensor, PolicyTrace, BatchFlopsReport]:
    """Functional form returning (logits, PolicyTrace, FlopsReport)."""
    out = model(images, mode=mode, tau=tau, generator=generator)
    return out.logits, out.trace, out.flops
