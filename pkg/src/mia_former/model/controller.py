"""MIA-Controller: per-block block/head/token decisions.

The controller first decides whether to run its block at all. Head and token
branches are evaluated only for samples whose block is kept. Stages 1-2 use
straight-through Gumbel-sigmoid decisions; stage 3 swaps each branch's final
FC for a parallel actor/critic pair and samples Bernoulli actions.
"""

import logging
from typing import Literal

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from mia_former.cost.flops import pooled_size
from mia_former.errors import StageError
from mia_former.model.backbone import FeatureMap, init_weights
from mia_former.model.gumbel import Mode, bernoulli_policy, gumbel_binary
from mia_former.model.masks import MaskBundle, RLDecision
from mia_former.types import MIAConfig

logger = logging.getLogger(__name__)

DecisionMode = Literal["gumbel", "a2c"]

# final FC of each branch, replaced by actor/critic pairs in stage 3
FINAL_LAYERS = ("fc_b", "fc_h2", "fc_n")


def _pool(size: int) -> nn.Module:
    return nn.AvgPool2d(2, ceil_mode=True) if size >= 2 else nn.Identity()


class ActorCritic(nn.Module):
    """Parallel actor and critic heads for one decision dimension."""

    def __init__(self, actor_in: int, critic_in: int) -> None:
        super().__init__()
        self.actor = nn.Linear(actor_in, 1)
        self.critic = nn.Linear(critic_in, 1)


class MIAController(nn.Module):
    """Mask generator inserted ahead of one MIA-Block.

    Attributes:
        branch_evaluations: Number of samples for which the head/token branches
            ran; instrumentation for the skip-before-branch rule
    """

    def __init__(self, cfg: MIAConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d, w = cfg.embed_dim, cfg.ctrl_width
        n_h, _ = cfg.grid
        self.cnn_b = nn.Sequential(
            nn.Conv2d(d, w, kernel_size=3, padding=1),
            nn.GELU(),
            _pool(n_h),
            nn.Conv2d(w, w, kernel_size=3, padding=1),
            _pool(pooled_size(n_h)),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc_b: nn.Linear | None = nn.Linear(w, 1)
        self.fc_h1 = nn.Linear(w, cfg.num_heads * cfg.head_feat_dim)
        self.fc_h2: nn.Linear | None = nn.Linear(cfg.head_feat_dim, 1)
        self.mlp_n = nn.Sequential(nn.Linear(d, w), nn.GELU(), nn.Linear(w, w), nn.GELU())
        self.fc_n: nn.Linear | None = nn.Linear(w, 1)
        self.rl: nn.ModuleDict | None = None
        self.branch_evaluations = 0

    @property
    def has_rl_heads(self) -> bool:
        return self.rl is not None

    def install_rl_heads(self, generator: torch.Generator | None = None) -> None:
        """Replace each branch's final FC with a fresh actor/critic pair."""
        cfg = self.cfg
        w = cfg.ctrl_width
        self.rl = nn.ModuleDict(
            {
                "block": ActorCritic(w, w),
                "head": ActorCritic(cfg.head_feat_dim, cfg.num_heads * cfg.head_feat_dim),
                "token": ActorCritic(w, w),
            }
        )
        init_weights(self.rl, generator)
        for name in FINAL_LAYERS:
            setattr(self, name, None)

    # -- features -----------------------------------------------------------

    def block_features(self, x: FeatureMap) -> Tensor:
        """F_b with shape (batch, 1, 1, H*E')."""
        feats = self.cnn_b(rearrange(x.tokens, "b h w d -> b d h w"))
        return rearrange(feats, "b c h w -> b h w c")

    def head_features(self, f_b: Tensor) -> Tensor:
        """F_h with shape (batch, H, E'')."""
        flat = self.fc_h1(rearrange(f_b, "b h w c -> b (h w c)"))
        return F.gelu(rearrange(flat, "b (h e) -> b h e", h=self.cfg.num_heads))

    def token_features(self, x: FeatureMap) -> Tensor:
        """F_n with shape (batch, N, H*E'); the class token is not included."""
        return self.mlp_n(x.spatial())

    def _final(self, name: str) -> nn.Linear:
        layer = getattr(self, name)
        if layer is None:
            msg = f"Controller final layer '{name}' was replaced by actor/critic heads; use decision_mode='a2c'"
            raise StageError(msg)
        return layer

    # -- gumbel decisions ---------------------------------------------------

    def decide_block(
        self,
        x: FeatureMap,
        tau: float,
        mode: Mode,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (G_b, D_b, F_b); F_b is reused by the head branch."""
        f_b = self.block_features(x)
        logit = self._final("fc_b")(rearrange(f_b, "b h w c -> b (h w c)")).squeeze(-1)
        d_b, g_b = gumbel_binary(logit, tau, mode, generator)
        return g_b, d_b, f_b

    def decide_heads(
        self,
        f_b: Tensor,
        tau: float,
        mode: Mode,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (G_h, D_h), each (batch, H)."""
        logit = self._final("fc_h2")(self.head_features(f_b)).squeeze(-1)
        d_h, g_h = gumbel_binary(logit, tau, mode, generator)
        return g_h, d_h

    def decide_tokens(
        self,
        x: FeatureMap,
        tau: float,
        mode: Mode,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (G_n, D_n), each (batch, N)."""
        logit = self._final("fc_n")(self.token_features(x)).squeeze(-1)
        d_n, g_n = gumbel_binary(logit, tau, mode, generator)
        return g_n, d_n

    # -- actor/critic decisions ---------------------------------------------

    def _heads(self, dim: str) -> ActorCritic:
        if self.rl is None:
            msg = "Actor/critic heads are not installed; run inherit_weights before stage 3"
            raise StageError(msg)
        head = self.rl[dim]
        assert isinstance(head, ActorCritic)  # Type guard for ty
        return head

    def rl_block(self, f_b: Tensor, tau: float, mode: Mode, generator: torch.Generator | None) -> RLDecision:
        flat = rearrange(f_b, "b h w c -> b (h w c)")
        pair = self._heads("block")
        return a2c_decide(flat[:, None], flat, pair.actor, pair.critic, tau, mode, generator)

    def rl_heads(self, f_b: Tensor, tau: float, mode: Mode, generator: torch.Generator | None) -> RLDecision:
        f_h = self.head_features(f_b)
        pair = self._heads("head")
        return a2c_decide(f_h, f_h.flatten(1), pair.actor, pair.critic, tau, mode, generator)

    def rl_tokens(self, x: FeatureMap, tau: float, mode: Mode, generator: torch.Generator | None) -> RLDecision:
        f_n = self.token_features(x)
        pair = self._heads("token")
        return a2c_decide(f_n, f_n.mean(dim=1), pair.actor, pair.critic, tau, mode, generator)

    # -- step ---------------------------------------------------------------

    def forward(
        self,
        x: FeatureMap,
        tau: float,
        mode: Mode,
        generator: torch.Generator | None = None,
    ) -> MaskBundle:
        return controller_step(x, self, tau, mode, generator)


def a2c_decide(
    actor_features: Tensor,
    critic_features: Tensor,
    actor: nn.Linear,
    critic: nn.Linear,
    tau: float,
    mode: Mode,
    generator: torch.Generator | None = None,
) -> RLDecision:
    """Bernoulli actor decisions plus a scalar critic value.

    The critic only serves as the training baseline: in eval mode it is not
    run and the value is zero, so inference executes the actor heads alone.

    Args:
        actor_features: (batch, K, F) features, one row per binary decision
        critic_features: (batch, F') features for the value estimate
        actor: Linear F -> 1 keep-logit layer
        critic: Linear F' -> 1 value layer
        tau: Temperature applied to the actor logits
        mode: "train" samples actions; "eval" keeps when p >= 0.5
        generator: RNG for train-mode sampling

    Returns:
        RLDecision with per-decision log-probabilities and entropies
    """
    logit = actor(actor_features).squeeze(-1)
    sample = bernoulli_policy(logit, tau, mode, generator)
    if mode == "eval":
        value = logit.new_zeros(logit.shape[0])
    else:
        value = critic(critic_features).squeeze(-1)
    taken = torch.ones(value.shape[0], dtype=torch.bool, device=value.device)
    return RLDecision(sample.action, sample.log_prob, sample.entropy, value, taken)


def _scatter(base: Tensor, index: Tensor, rows: Tensor) -> Tensor:
    return base.index_put((index,), rows.to(base.dtype))


def _scatter_decision(batch: int, index: Tensor, sub: RLDecision) -> RLDecision:
    k = sub.action.shape[1]
    like = sub.value
    zeros_k = torch.zeros(batch, k, dtype=like.dtype, device=like.device)
    zeros = torch.zeros(batch, dtype=like.dtype, device=like.device)
    taken = torch.zeros(batch, dtype=torch.bool, device=like.device)
    return RLDecision(
        action=_scatter(torch.ones_like(zeros_k), index, sub.action),
        log_prob=_scatter(zeros_k, index, sub.log_prob),
        entropy=_scatter(zeros_k, index, sub.entropy),
        value=_scatter(zeros, index, sub.value),
        taken=_scatter(taken, index, sub.taken),
    )


def controller_step(
    x: FeatureMap,
    controller: MIAController,
    tau: float,
    mode: Mode,
    generator: torch.Generator | None = None,
) -> MaskBundle:
    """Produce one block's MaskBundle.

    The block decision comes first; head and token branches run only on the
    samples whose block is kept. Skipped samples record all-ones head/token
    masks. Dimensions outside ``cfg.dynamic_dims`` are forced on. With
    actor/critic heads installed the decisions are Bernoulli actions and each
    evaluated (block, dimension) group is recorded in ``bundle.rl``.
    """
    cfg = controller.cfg
    batch = x.batch_size
    like = x.tokens
    bundle = MaskBundle.all_on(batch, cfg, device=like.device, dtype=like.dtype)
    rl_mode = controller.has_rl_heads
    use_depth, use_head, use_token = (cfg.has_dim(d) for d in ("depth", "head", "token"))
    if not (use_depth or use_head or use_token):
        return bundle
    if rl_mode:
        # A2C gradients stop at the controller input; the backbone learns from the task loss only
        x = FeatureMap(x.tokens.detach(), None if x.cls is None else x.cls.detach())

    f_b = None
    if use_depth and not rl_mode:
        bundle.g_block, bundle.d_block, f_b = controller.decide_block(x, tau, mode, generator)
    elif use_depth or use_head:
        f_b = controller.block_features(x)
        if use_depth:
            decision = controller.rl_block(f_b, tau, mode, generator)
            bundle.d_block = bundle.g_block = decision.action[:, 0]
            bundle.rl["block"] = decision

    index = torch.nonzero(~bundle.skipped).squeeze(1)
    if index.numel() == 0 or not (use_head or use_token):
        return bundle
    controller.branch_evaluations += int(index.numel())
    sub_x = FeatureMap(x.tokens[index], None if x.cls is None else x.cls[index])

    if use_head and f_b is not None:
        sub_fb = f_b[index]
        if rl_mode:
            decision = controller.rl_heads(sub_fb, tau, mode, generator)
            bundle.rl["head"] = _scatter_decision(batch, index, decision)
            bundle.d_heads = bundle.g_heads = bundle.rl["head"].action
        else:
            g_h, d_h = controller.decide_heads(sub_fb, tau, mode, generator)
            bundle.d_heads = _scatter(bundle.d_heads, index, d_h)
            bundle.g_heads = _scatter(bundle.g_heads, index, g_h)
    if use_token:
        if rl_mode:
            decision = controller.rl_tokens(sub_x, tau, mode, generator)
            bundle.rl["token"] = _scatter_decision(batch, index, decision)
            bundle.d_tokens = bundle.g_tokens = bundle.rl["token"].action
        else:
            g_n, d_n = controller.decide_tokens(sub_x, tau, mode, generator)
            bundle.d_tokens = _scatter(bundle.d_tokens, index, d_n)
            bundle.g_tokens = _scatter(bundle.g_tokens, index, g_n)
    logger.debug("Controller kept %d/%d blocks in batch", index.numel(), batch)
    return bundle
