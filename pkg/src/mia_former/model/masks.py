"""Per-block decisions (MaskBundle) and per-sample policy records (PolicyTrace)."""

from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
from torch import Tensor

from mia_former.errors import MaskError, TraceError
from mia_former.types import MIAConfig


@dataclass
class RLDecision:
    """One (block, dimension) decision group taken by an actor/critic pair.

    Rows of samples whose branch was not evaluated (skipped block) carry zeros
    and ``taken = False``.

    Attributes:
        action: Hard actions, shape (batch, K)
        log_prob: Per-decision log-probabilities, shape (batch, K)
        entropy: Per-decision entropies, shape (batch, K)
        value: Critic estimate, shape (batch,)
        taken: Whether the group was evaluated for each sample, shape (batch,)
    """

    action: Tensor
    log_prob: Tensor
    entropy: Tensor
    value: Tensor
    taken: Tensor


@dataclass
class MaskBundle:
    """Hard masks and soft relaxations for one block over a batch.

    Hard tensors are straight-through values: exactly 0/1 in the forward pass,
    differentiable through the soft relaxation. For samples whose block is
    skipped, head and token masks (hard and soft) are recorded as all-ones.
    """

    d_block: Tensor  # (B,)
    g_block: Tensor  # (B,)
    d_heads: Tensor  # (B, H)
    g_heads: Tensor  # (B, H)
    d_tokens: Tensor  # (B, N)
    g_tokens: Tensor  # (B, N)
    rl: dict[str, RLDecision] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.d_block.shape[0]

    @property
    def skipped(self) -> Tensor:
        return self.d_block.detach() < 0.5

    @classmethod
    def all_on(
        cls,
        batch: int,
        cfg: MIAConfig,
        device: torch.device | str | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "MaskBundle":
        ones_b = torch.ones(batch, device=device, dtype=dtype)
        ones_h = torch.ones(batch, cfg.num_heads, device=device, dtype=dtype)
        ones_n = torch.ones(batch, cfg.num_tokens, device=device, dtype=dtype)
        return cls(ones_b, ones_b, ones_h, ones_h, ones_n, ones_n)

    @classmethod
    def skip_all(
        cls,
        batch: int,
        cfg: MIAConfig,
        device: torch.device | str | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "MaskBundle":
        bundle = cls.all_on(batch, cfg, device, dtype)
        zeros = torch.zeros(batch, device=device, dtype=dtype)
        return cls(zeros, zeros, bundle.d_heads, bundle.g_heads, bundle.d_tokens, bundle.g_tokens)

    @classmethod
    def from_hard(
        cls,
        d_block: Tensor,
        d_heads: Tensor,
        d_tokens: Tensor,
    ) -> "MaskBundle":
        """Build a bundle from fixed hard masks (soft values mirror them)."""
        skipped = (d_block < 0.5)[:, None]
        d_heads = torch.where(skipped, torch.ones_like(d_heads), d_heads)
        d_tokens = torch.where(skipped, torch.ones_like(d_tokens), d_tokens)
        return cls(d_block, d_block, d_heads, d_heads, d_tokens, d_tokens)

    def validate(self, cfg: MIAConfig, require_binary: bool = True) -> None:
        """Check shapes against the config and, optionally, binarity.

        Raises:
            MaskError: On a shape mismatch or a non-binary hard mask
        """
        batch = self.batch_size
        expected = {
            "d_block": (batch,),
            "d_heads": (batch, cfg.num_heads),
            "d_tokens": (batch, cfg.num_tokens),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                msg = f"Mask {name} has shape {actual}, expected {shape} for this config"
                raise MaskError(msg)
        if require_binary:
            for name in expected:
                values = getattr(self, name).detach()
                if not torch.all((values == 0) | (values == 1)):
                    msg = f"Mask {name} must be hard binary at inference, found non-binary values"
                    raise MaskError(msg)

    def token_mask(self, cfg: MIAConfig) -> Tensor:
        """Token mask over the full sequence, class token first and always on."""
        if not cfg.use_class_token:
            return self.d_tokens
        cls_on = torch.ones_like(self.d_tokens[:, :1])
        return torch.cat([cls_on, self.d_tokens], dim=1)


@dataclass
class PolicyTrace:
    """Executed-policy record for a set of samples.

    Attributes:
        sample_ids: Integer sample identifiers, shape (S,)
        skipped: Block skipped flags, shape (S, L)
        heads: Head keep masks, shape (S, L, H); all-ones for skipped blocks
        tokens: Token keep masks, shape (S, L, N); all-ones for skipped blocks
        correct: Prediction correctness, shape (S,), when known
    """

    sample_ids: Tensor
    skipped: Tensor
    heads: Tensor
    tokens: Tensor
    correct: Tensor | None = None

    def __len__(self) -> int:
        return int(self.sample_ids.shape[0])

    @property
    def num_blocks(self) -> int:
        return int(self.skipped.shape[1])

    @property
    def heads_kept(self) -> Tensor:
        return self.heads.sum(dim=-1)

    @property
    def tokens_kept(self) -> Tensor:
        return self.tokens.sum(dim=-1)

    @classmethod
    def from_bundles(
        cls,
        bundles: Sequence[MaskBundle],
        sample_ids: Tensor | None = None,
        correct: Tensor | None = None,
    ) -> "PolicyTrace":
        if not bundles:
            msg = "Cannot build a policy trace from an empty bundle list"
            raise TraceError(msg)
        batch = bundles[0].batch_size
        if sample_ids is None:
            sample_ids = torch.arange(batch)
        skipped = torch.stack([b.skipped for b in bundles], dim=1).cpu()
        heads = torch.stack([b.d_heads.detach() > 0.5 for b in bundles], dim=1).cpu()
        tokens = torch.stack([b.d_tokens.detach() > 0.5 for b in bundles], dim=1).cpu()
        return cls(
            sample_ids=sample_ids.detach().cpu().long(),
            skipped=skipped,
            heads=heads,
            tokens=tokens,
            correct=None if correct is None else correct.detach().cpu().bool(),
        )

    @classmethod
    def cat(cls, traces: Sequence["PolicyTrace"]) -> "PolicyTrace":
        if not traces:
            msg = "Cannot concatenate an empty list of traces"
            raise TraceError(msg)
        has_correct = all(t.correct is not None for t in traces)
        return cls(
            sample_ids=torch.cat([t.sample_ids for t in traces]),
            skipped=torch.cat([t.skipped for t in traces]),
            heads=torch.cat([t.heads for t in traces]),
            tokens=torch.cat([t.tokens for t in traces]),
            correct=torch.cat([t.correct for t in traces]) if has_correct else None,  # type: ignore[misc]
        )

    def select(self, index: int) -> "PolicyTrace":
        """Single-sample trace at a position."""
        sl = slice(index, index + 1)
        return PolicyTrace(
            sample_ids=self.sample_ids[sl],
            skipped=self.skipped[sl],
            heads=self.heads[sl],
            tokens=self.tokens[sl],
            correct=None if self.correct is None else self.correct[sl],
        )

    def validate(self, cfg: MIAConfig) -> None:
        """Check the trace covers every block and respects the config sizes.

        Raises:
            TraceError: If the trace is empty, incomplete, or inconsistent
        """
        if len(self) == 0:
            msg = "Policy trace is empty"
            raise TraceError(msg)
        if self.num_blocks != cfg.num_blocks:
            msg = f"Incomplete trace: covers {self.num_blocks} blocks, config has {cfg.num_blocks}"
            raise TraceError(msg)
        if self.heads.shape[-1] != cfg.num_heads or self.tokens.shape[-1] != cfg.num_tokens:
            msg = (
                f"Trace mask widths ({self.heads.shape[-1]} heads, {self.tokens.shape[-1]} tokens) "
                f"do not match config ({cfg.num_heads} heads, {cfg.num_tokens} tokens)"
            )
            raise TraceError(msg)
        skipped = self.skipped[..., None]
        if not (torch.all(self.heads | ~skipped) and torch.all(self.tokens | ~skipped)):
            msg = "Skipped blocks must record all-ones head and token masks"
            raise TraceError(msg)
