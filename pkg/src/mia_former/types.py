"""Configuration models shared by every MIA-Former module.

This module defines Pydantic models for the architecture, the three-stage
training recipe, datasets, and adversarial attacks. The models validate
themselves on construction; ``validate_config`` turns pydantic's errors into
``ConfigError`` values that name the offending field.
"""

import hashlib
import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mia_former.errors import ConfigError

SCHEMA_VERSION = 1

Dimension = Literal["depth", "head", "token"]
ALL_DIMENSIONS: tuple[Dimension, ...] = ("depth", "head", "token")


class TrainingConfig(BaseModel):
    """Optimizer and schedule settings for the three training stages.

    Attributes:
        batch_size: Mini-batch size for every stage
        backbone_epochs: Epochs of dense backbone training (stage 0)
        backbone_lr: AdamW learning rate for dense backbone training
        controller_pretrain_lr: Adam learning rate for stage 1
        controller_pretrain_max_epochs: Hard cap on stage-1 epochs
        cotrain_epochs: Stage-2 epochs
        cotrain_backbone_lr: AdamW learning rate for backbone weights in stages 2-3
        cotrain_controller_lr: AdamW learning rate for controller weights in stages 2-3
        weight_decay: AdamW decoupled weight decay
        rl_frozen_epochs: Stage-3 epochs training only the actor/critic heads
        rl_epochs: Total stage-3 epochs (frozen phase included)
        entropy_coef: Entropy bonus weight c_ent
        value_coef: Weight of the critic loss in the controller objective
        grad_clip: Global gradient-norm clip for stages 2-3
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=64, gt=0)
    backbone_epochs: int = Field(default=30, gt=0)
    backbone_lr: float = Field(default=1e-3, gt=0)
    controller_pretrain_lr: float = Field(default=1e-4, gt=0)
    controller_pretrain_max_epochs: int = Field(default=200, gt=0)
    cotrain_epochs: int = Field(default=60, gt=0)
    cotrain_backbone_lr: float = Field(default=1e-5, gt=0)
    cotrain_controller_lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    rl_frozen_epochs: int = Field(default=8, ge=0)
    rl_epochs: int = Field(default=20, gt=0)
    entropy_coef: float = Field(default=0.01, ge=0)
    value_coef: float = Field(default=0.5, ge=0)
    grad_clip: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_rl_split(self) -> Self:
        if self.rl_frozen_epochs > self.rl_epochs:
            msg = (
                f"rl_frozen_epochs: frozen phase ({self.rl_frozen_epochs}) longer "
                f"than the whole stage ({self.rl_epochs})"
            )
            raise ValueError(msg)
        return self


class MIAConfig(BaseModel):
    """Architecture and training description of one MIA-Former model.

    Derived quantities (token count, embedding width, MLP width, resolved
    controller widths) are exposed as properties and are never serialized.

    Examples:
        >>> cfg = MIAConfig.tiny()
        >>> cfg.num_tokens, cfg.embed_dim
        (16, 64)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = Field(default=SCHEMA_VERSION, description="Config schema version")
    num_blocks: int = Field(gt=0, description="L, number of MIA-Blocks")
    num_heads: int = Field(gt=0, description="H, heads per block")
    head_dim: int = Field(gt=0, description="E, hidden width per head")
    image_size: int = Field(gt=0)
    patch_size: int = Field(gt=0)
    in_channels: int = Field(default=3, gt=0)
    num_classes: int = Field(gt=0)
    use_class_token: bool = True
    mlp_ratio: float = Field(default=2.0, gt=0)
    controller_hidden: int | None = Field(
        default=None, gt=0, description="E', defaults to E/4"
    )
    head_feature_dim: int | None = Field(
        default=None, gt=0, description="E'', defaults to E/4"
    )
    gumbel_tau_start: float = Field(default=5.0, gt=0)
    gumbel_tau_end: float = Field(default=0.5, gt=0)
    target_flops_ratio: float = Field(default=0.7, gt=0, le=1)
    alpha_magnitude: float = Field(default=0.1, gt=0)
    beta: float = Field(default=0.5, gt=0)
    inherit_fraction: float = Field(default=0.75, ge=0, le=1)
    dynamic_dims: tuple[Dimension, ...] = ALL_DIMENSIONS
    pixel_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, ...] = (0.25, 0.25, 0.25)
    seed: int = 0
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @model_validator(mode="after")
    def _check_invariants(self) -> Self:
        if self.schema_version != SCHEMA_VERSION:
            msg = f"schema_version: unsupported version {self.schema_version}, expected {SCHEMA_VERSION}"
            raise ValueError(msg)
        if self.image_size % self.patch_size:
            msg = (
                f"image_size: {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )
            raise ValueError(msg)
        if (self.controller_hidden is None or self.head_feature_dim is None) and self.head_dim % 4:
            msg = (
                f"head_dim: E not divisible by 4 (E={self.head_dim}); set "
                "controller_hidden and head_feature_dim explicitly"
            )
            raise ValueError(msg)
        if self.mlp_ratio * self.head_dim != int(self.mlp_ratio * self.head_dim):
            msg = f"mlp_ratio: r*E must be an integer (r={self.mlp_ratio}, E={self.head_dim})"
            raise ValueError(msg)
        if len(set(self.dynamic_dims)) != len(self.dynamic_dims):
            msg = f"dynamic_dims: duplicate entries in {self.dynamic_dims}"
            raise ValueError(msg)
        if not len(self.pixel_mean) == len(self.pixel_std) == self.in_channels:
            msg = (
                f"pixel_mean: normalization constants need in_channels={self.in_channels} "
                f"entries (got {len(self.pixel_mean)} and {len(self.pixel_std)})"
            )
            raise ValueError(msg)
        return self

    @classmethod
    def tiny(cls, **overrides: Any) -> "MIAConfig":
        """Return the desk-scale TinyViT configuration.

        L=4, H=4, E=16, 32x32 inputs with patch 8 (4x4 token grid), r=2,
        10 classes, E'=E''=4.
        """
        base: dict[str, Any] = {
            "num_blocks": 4,
            "num_heads": 4,
            "head_dim": 16,
            "image_size": 32,
            "patch_size": 8,
            "num_classes": 10,
            "mlp_ratio": 2.0,
        }
        base.update(overrides)
        return validate_config(base)

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_tokens(self) -> int:
        """N, spatial tokens (class token excluded)."""
        n_h, n_w = self.grid
        return n_h * n_w

    @property
    def num_cls(self) -> int:
        return int(self.use_class_token)

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def mlp_group_dim(self) -> int:
        """Width r*E of one head's share of the MLP hidden layer."""
        return int(self.mlp_ratio * self.head_dim)

    @property
    def mlp_hidden(self) -> int:
        return self.num_heads * self.mlp_group_dim

    @property
    def ctrl_dim(self) -> int:
        """E', controller per-head feature width."""
        return self.controller_hidden or self.head_dim // 4

    @property
    def head_feat_dim(self) -> int:
        """E'', head-branch feature width."""
        return self.head_feature_dim or self.head_dim // 4

    @property
    def ctrl_width(self) -> int:
        """H*E', width of F_b and of the per-token controller features."""
        return self.num_heads * self.ctrl_dim

    def has_dim(self, dim: Dimension) -> bool:
        return dim in self.dynamic_dims

    def tau_at(self, epoch: int, epochs: int) -> float:
        """Exponentially annealed Gumbel temperature for a stage-2 epoch."""
        if epochs <= 1:
            return self.gumbel_tau_end
        frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
        return self.gumbel_tau_start * (self.gumbel_tau_end / self.gumbel_tau_start) ** frac


class AttackSpec(BaseModel):
    """One adversarial attack setting.

    Epsilons are on [0, 1]-scaled pixels. PGD step size defaults to epsilon/4.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["pgd_linf", "fgsm_l2"]
    epsilon: float = Field(ge=0)
    steps: int = Field(default=10, ge=1)
    step_size: float | None = Field(default=None, gt=0)
    random_start: bool = False
    seed: int = 0

    @classmethod
    def default(cls, kind: Literal["pgd_linf", "fgsm_l2"]) -> "AttackSpec":
        return cls(kind=kind, epsilon=0.002 if kind == "pgd_linf" else 0.03)

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4


class DatasetSpec(BaseModel):
    """Where a dataset comes from and how it is split.

    Attributes:
        source: "synthetic" (built-in generator), "directory" (images plus
            labels.csv with columns filename,label) or "packed" (.npz records)
        path: Directory or .npz file for non-synthetic sources
        num_classes: Label range [0, num_classes)
        num_samples: Sample count for the synthetic generator
        image_size: Side length images are resized to
        in_channels: Channels images are converted to (1 = grayscale, 3 = RGB)
        val_fraction: Fraction of samples assigned to validation
        seed: Seed for generation and for the hash-based split
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["synthetic", "directory", "packed"] = "synthetic"
    path: str | None = None
    num_classes: int = Field(default=10, gt=0)
    num_samples: int = Field(default=5000, gt=0)
    image_size: int = Field(default=32, gt=0)
    in_channels: int = Field(default=3, gt=0)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 7

    @model_validator(mode="after")
    def _check_path(self) -> Self:
        if self.source != "synthetic" and not self.path:
            msg = f"path: source '{self.source}' requires a path"
            raise ValueError(msg)
        if self.source == "synthetic" and self.in_channels != 3:
            msg = f"in_channels: the synthetic generator writes RGB images, got in_channels={self.in_channels}"
            raise ValueError(msg)
        return self


def _first_field(err: ValidationError) -> tuple[str, str]:
    first = err.errors()[0]
    loc = ".".join(str(part) for part in first["loc"])
    message = first["msg"].removeprefix("Value error, ")
    if not loc and ": " in message:
        loc, message = message.split(": ", 1)
    return loc or "<config>", message


def validate_config(cfg: MIAConfig | Mapping[str, Any]) -> MIAConfig:
    """Validate a configuration and return it.

    Args:
        cfg: An MIAConfig (returned unchanged when valid) or a raw mapping

    Returns:
        The validated MIAConfig

    Raises:
        ConfigError: If any invariant fails; ``field`` names the culprit

    Examples:
        >>> validate_config({"num_blocks": 4, "num_heads": 4, "head_dim": 6,
        ...                  "image_size": 32, "patch_size": 8, "num_classes": 10})
        Traceback (most recent call last):
        ConfigError: head_dim: E not divisible by 4 ...
    """
    data = cfg.model_dump() if isinstance(cfg, MIAConfig) else dict(cfg)
    try:
        validated = MIAConfig.model_validate(data)
    except ValidationError as e:
        field, message = _first_field(e)
        raise ConfigError(field, message) from e
    return cfg if isinstance(cfg, MIAConfig) else validated


def config_to_json(cfg: MIAConfig) -> str:
    """Canonical JSON (sorted keys) used for files and hashing."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)


def config_hash(cfg: MIAConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode()).hexdigest()


def save_config(cfg: MIAConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_json(cfg) + "\n")
    return path


def load_config(path: str | Path, **overrides: Any) -> MIAConfig:
    """Load a JSON config file, apply flag overrides, and validate.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: If the document is malformed or violates an invariant
    """
    path = Path(path)
    if not path.exists():
        msg = f"Config file not found: {path}. Write one with `save_config` or pass --config."
        raise FileNotFoundError(msg)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<config>", f"invalid JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("<config>", f"expected a JSON object in {path}")
    training_overrides = overrides.pop("training", None) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if training_overrides:
        data["training"] = {**data.get("training", {}), **training_overrides}
    return validate_config(data)
