"""Stage runners: dense backbone, controller pretraining, co-training, RL fine-tuning.

Each runner advances a TrainState in place, writes one metrics row per epoch,
and can resume from the epoch recorded in the state.
"""

import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from mia_former.cost.flops import differentiable_cost
from mia_former.data.loaders import DatasetHandle, Split
from mia_former.errors import DatasetError, StageError
from mia_former.model.former import MIAFormer, Policy
from mia_former.model.masks import MaskBundle, PolicyTrace
from mia_former.training.checkpoint import save_checkpoint
from mia_former.training.inherit import inherit_weights
from mia_former.training.losses import (
    a2c_losses,
    all_decisions,
    batch_rewards,
    check_finite,
    compute_reward,
    dynamic_alpha,
    pretrain_loss,
)
from mia_former.training.metrics import RunLogs, progress
from mia_former.training.optim import build_optimizer
from mia_former.training.state import Stage, TrainState
from mia_former.types import MIAConfig

logger = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass(frozen=True)
class EvalSummary:
    """Deterministic evaluation of a model on one split.

    Attributes:
        accuracy: Top-1 accuracy
        exec_ratio_mean: Mean executed FLOPs ratio
        exec_ratio_std: Standard deviation of the executed FLOPs ratio
        trace: Policy trace with correctness, one entry per sample
    """

    accuracy: float
    exec_ratio_mean: float
    exec_ratio_std: float
    trace: PolicyTrace


def epoch_seed(cfg: MIAConfig, stage: Stage, epoch: int) -> int:
    """Shuffle seed for one epoch; independent of any RNG state."""
    return cfg.seed * 1_000_003 + stage.order * 10_007 + epoch


@torch.no_grad()
def evaluate_accuracy(
    model: MIAFormer,
    split: Split,
    batch_size: int = EVAL_BATCH,
    policy: Policy = "model",
) -> EvalSummary:
    """Evaluate a split in eval mode and record the executed policies.

    Raises:
        DatasetError: If the split is empty
    """
    if len(split) == 0:
        msg = "Cannot evaluate an empty split; raise val_fraction or num_samples"
        raise DatasetError(msg)
    model.eval()
    traces, ratios, hits = [], [], 0
    for images, labels, ids in split.batches(batch_size):
        out = model(images, mode="eval", policy=policy)
        correct = out.logits.argmax(dim=-1) == labels
        hits += int(correct.sum())
        traces.append(PolicyTrace.from_bundles(out.bundles, ids, correct))
        ratios.append(out.exec_ratio)
    ratio = torch.cat(ratios)
    std = float(ratio.std()) if ratio.numel() > 1 else 0.0
    return EvalSummary(hits / len(split), float(ratio.mean()), std, PolicyTrace.cat(traces))


def mask_means(bundles: Iterable[MaskBundle]) -> dict[str, float]:
    bundles = list(bundles)
    return {
        "block_keep": float(torch.stack([b.d_block.detach().mean() for b in bundles]).mean()),
        "head_keep": float(torch.stack([b.d_heads.detach().mean() for b in bundles]).mean()),
        "token_keep": float(torch.stack([b.d_tokens.detach().mean() for b in bundles]).mean()),
    }


def grad_norm(params: Iterable[nn.Parameter]) -> float:
    """Global L2 norm of gradients; parameters without a gradient count as 0."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _std(values: list[float]) -> float | None:
    if len(values) < 2:  # noqa: PLR2004
        return 0.0 if values else None
    mu = sum(values) / len(values)
    return math.sqrt(sum((v - mu) ** 2 for v in values) / (len(values) - 1))


def _finish_epoch(state: TrainState, logs: RunLogs | None, row: dict[str, Any]) -> None:
    state.epoch = row["epoch"] + 1
    state.history.append(row)
    if logs is not None:
        logs.epochs.append(row)
    logger.info(
        "[%s] epoch %d: task_loss=%s exec_ratio=%s clean_acc=%s",
        row["stage"],
        row["epoch"],
        _fmt(row.get("task_loss")),
        _fmt(row.get("exec_ratio_mean")),
        _fmt(row.get("clean_acc")),
    )


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def _val_accuracy(model: MIAFormer, data: DatasetHandle, policy: Policy = "model") -> float | None:
    if len(data.val) == 0:
        return None
    return evaluate_accuracy(model, data.val, policy=policy).accuracy


def _ensure_optimizer(state: TrainState) -> torch.optim.Optimizer:
    if state.optimizer is None:
        state.optimizer = build_optimizer(state.stage, state.model)
    return state.optimizer


# -- stage 0 ---------------------------------------------------------------


def train_backbone(state: TrainState, data: DatasetHandle, logs: RunLogs | None = None) -> TrainState:
    """Train the dense backbone (every mask on, controllers idle).

    This is also the identically budgeted dense baseline for comparisons.
    """
    state.enter(Stage.BACKBONE)
    model, cfg = state.model, state.cfg
    t = cfg.training
    optimizer = _ensure_optimizer(state)
    for epoch in progress(range(state.epoch, t.backbone_epochs), desc="backbone"):
        model.train()
        losses = []
        batches = data.train.batches(t.batch_size, shuffle=True, seed=epoch_seed(cfg, Stage.BACKBONE, epoch))
        for step, (images, labels, _) in enumerate(batches):
            out = model(images, policy="all_on")
            loss = F.cross_entropy(out.logits, labels)
            check_finite(loss.item(), "backbone task loss", epoch=epoch, step=step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            logger.debug("[backbone] epoch %d step %d loss %.5f", epoch, step, losses[-1])
        row = {
            "stage": str(Stage.BACKBONE),
            "epoch": epoch,
            "task_loss": _mean(losses),
            "exec_ratio_mean": 1.0,
            "exec_ratio_std": 0.0,
            "clean_acc": _val_accuracy(model, data, policy="all_on"),
        }
        _finish_epoch(state, logs, row)
    state.complete()
    return state


# -- stage 1 ---------------------------------------------------------------


@torch.no_grad()
def hard_pretrain_loss(model: MIAFormer, splits: Iterable[Split], batch_size: int = EVAL_BATCH) -> float:
    """Eval-mode pretraining loss on hard masks, summed over every sample."""
    model.eval()
    total = 0.0
    for split in splits:
        for images, _, _ in split.batches(batch_size):
            out = model(images, mode="eval")
            total += float(pretrain_loss(out.bundles, hard=True)) * images.shape[0]
    return total


def run_controller_pretrain(state: TrainState, data: DatasetHandle, logs: RunLogs | None = None) -> TrainState:
    """Train the controllers alone until every hard mask is 1.

    Backbone weights stay frozen. Training runs in train mode at the initial
    Gumbel temperature; after each epoch the hard loss is measured in eval
    mode over both splits and the stage ends when it is exactly 0, at which
    point the model computes exactly what its backbone computes.

    Raises:
        StageError: If the hard loss is still positive after
            ``training.controller_pretrain_max_epochs`` epochs
    """
    state.enter(Stage.CONTROLLER_PRETRAIN)
    model, cfg = state.model, state.cfg
    t = cfg.training
    if not state.is_completed(Stage.BACKBONE):
        logger.warning("Controller pretraining on an untrained backbone; run train-backbone first for useful results")
    optimizer = _ensure_optimizer(state)
    state.tau = tau = cfg.gumbel_tau_start
    for p in model.backbone_parameters():
        p.requires_grad_(False)
    try:
        hard = math.inf
        for epoch in progress(range(state.epoch, t.controller_pretrain_max_epochs), desc="controller-pretrain"):
            model.train()
            losses, task_losses, ratios = [], [], []
            seed = epoch_seed(cfg, Stage.CONTROLLER_PRETRAIN, epoch)
            for step, (images, labels, _) in enumerate(data.train.batches(t.batch_size, shuffle=True, seed=seed)):
                out = model(images, mode="train", tau=tau, generator=state.generator)
                loss = pretrain_loss(out.bundles)
                check_finite(loss.item(), "pretrain loss", tau=tau, epoch=epoch, step=step, **mask_means(out.bundles))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                task_losses.append(F.cross_entropy(out.logits.detach(), labels).item())
                ratios.extend(out.exec_ratio.tolist())
            hard = hard_pretrain_loss(model, (data.train, data.val))
            row = {
                "stage": str(Stage.CONTROLLER_PRETRAIN),
                "epoch": epoch,
                "task_loss": _mean(task_losses),
                "cost_loss": _mean(losses),
                "exec_ratio_mean": _mean(ratios),
                "exec_ratio_std": _std(ratios),
                "clean_acc": _val_accuracy(model, data),
            }
            _finish_epoch(state, logs, row)
            logger.info("[controller_pretrain] epoch %d: hard pretrain loss %.6g", epoch, hard)
            if hard == 0:
                state.complete()
                return state
    finally:
        for p in model.backbone_parameters():
            p.requires_grad_(True)
    msg = (
        f"Hard pretrain loss is still {hard:.6g} after {t.controller_pretrain_max_epochs} epochs; "
        "raise training.controller_pretrain_max_epochs"
    )
    raise StageError(msg)


# -- stage 2 ---------------------------------------------------------------


def cotrain_step(
    images: Tensor,
    labels: Tensor,
    state: TrainState,
    tau: float,
    alpha_override: float | None = None,
) -> dict[str, Any]:
    """One joint update of backbone and controllers on L_task + alpha * L_cost.

    Args:
        images: Batch of [0, 1] pixels
        labels: Batch labels
        state: Training state in the co-training stage
        tau: Gumbel temperature for this step
        alpha_override: Use this alpha instead of the dynamic rule

    Returns:
        Step metrics (task/cost loss, alpha, exec ratio, target ratio)

    Raises:
        StageError: If the state is not in the co-training stage
        TrainingDivergedError: On a non-finite loss, with tau and mask means
    """
    if state.stage != Stage.COTRAIN:
        msg = f"cotrain_step needs the '{Stage.COTRAIN}' stage, state is in '{state.stage}'"
        raise StageError(msg)
    model, cfg = state.model, state.cfg
    optimizer = _ensure_optimizer(state)
    model.train()
    out = model(images, mode="train", tau=tau, generator=state.generator)
    task = F.cross_entropy(out.logits, labels)
    cost = differentiable_cost(out.bundles, cfg)
    exec_ratio = float(out.exec_ratio.mean())
    target = cfg.target_flops_ratio
    if alpha_override is None:
        alpha = dynamic_alpha(task.item(), cost.item(), exec_ratio, target, cfg)
    else:
        alpha = alpha_override
    loss = task + alpha * cost.to(task.dtype)
    check_finite(loss.item(), "co-training loss", tau=tau, alpha=alpha, **mask_means(out.bundles))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    nn.utils.clip_grad_norm_(model.parameters(), cfg.training.grad_clip)
    optimizer.step()
    return {
        "stage": str(Stage.COTRAIN),
        "tau": tau,
        "task_loss": task.item(),
        "cost_loss": cost.item(),
        "alpha": alpha,
        "exec_ratio": exec_ratio,
        "target_ratio": target,
        "per_sample_exec": out.exec_ratio.tolist(),
    }


def run_cotrain(state: TrainState, data: DatasetHandle, logs: RunLogs | None = None) -> TrainState:
    """Co-train backbone and controllers with the annealed Gumbel temperature."""
    state.enter(Stage.COTRAIN)
    cfg = state.cfg
    t = cfg.training
    for epoch in progress(range(state.epoch, t.cotrain_epochs), desc="cotrain"):
        state.tau = tau = cfg.tau_at(epoch, t.cotrain_epochs)
        steps = []
        ratios: list[float] = []
        seed = epoch_seed(cfg, Stage.COTRAIN, epoch)
        for step, (images, labels, _) in enumerate(data.train.batches(t.batch_size, shuffle=True, seed=seed)):
            metrics = cotrain_step(images, labels, state, tau)
            ratios.extend(metrics.pop("per_sample_exec"))
            metrics.update(epoch=epoch, step=step)
            steps.append(metrics)
            logger.debug("[cotrain] epoch %d step %d alpha %.5g exec %.4f", epoch, step, metrics["alpha"], metrics["exec_ratio"])
        if logs is not None:
            logs.steps.append_rows(steps)
        row = {
            "stage": str(Stage.COTRAIN),
            "epoch": epoch,
            "task_loss": _mean([s["task_loss"] for s in steps]),
            "cost_loss": _mean([s["cost_loss"] for s in steps]),
            "alpha": _mean([s["alpha"] for s in steps]),
            "exec_ratio_mean": _mean(ratios),
            "exec_ratio_std": _std(ratios),
            "clean_acc": _val_accuracy(state.model, data),
        }
        _finish_epoch(state, logs, row)
    state.tau = cfg.gumbel_tau_end
    state.complete()
    return state


# -- stage 3 ---------------------------------------------------------------


def set_rl_trainable(model: MIAFormer, rl_only: bool) -> None:
    """Freeze everything except the actor/critic heads, or unfreeze all."""
    for p in model.parameters():
        p.requires_grad_(not rl_only)
    for p in model.rl_head_parameters():
        p.requires_grad_(True)


def hybrid_step(
    images: Tensor,
    labels: Tensor,
    sample_ids: Tensor,
    state: TrainState,
    frozen: bool,
) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """One stage-3 update.

    The controller's actor/critic heads minimize the A2C losses on the
    reward ``y + beta * (target - exec)``; the backbone minimizes the task
    loss (skipped while ``frozen``). Controller inputs are detached in this
    stage, so the two objectives touch disjoint parameters.

    Returns:
        Tuple of (step metrics, per-sample reward rows)

    Raises:
        StageError: Outside the RL stage or without actor/critic heads
        TrainingDivergedError: On a non-finite loss or reward
    """
    if state.stage != Stage.RL_FINETUNE or not state.model.has_rl_heads:
        msg = "hybrid_step needs the rl_finetune stage with actor/critic heads installed (see inherit_weights)"
        raise StageError(msg)
    model, cfg = state.model, state.cfg
    t = cfg.training
    optimizer = _ensure_optimizer(state)
    model.train()
    out = model(images, mode="train", tau=cfg.gumbel_tau_end, generator=state.generator)
    task = F.cross_entropy(out.logits, labels)
    correct = out.logits.detach().argmax(dim=-1) == labels
    exec_ratio = out.exec_ratio
    reward = batch_rewards(correct, exec_ratio, cfg.target_flops_ratio, cfg.beta)
    a2c = a2c_losses(all_decisions(out.bundles), reward.to(task.dtype), t.entropy_coef)
    controller_loss = a2c.policy + t.value_coef * a2c.value + a2c.entropy
    loss = controller_loss if frozen else controller_loss + task
    check_finite(loss.item(), "hybrid loss", tau=cfg.gumbel_tau_end, **mask_means(out.bundles))

    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    backbone_norm = grad_norm(model.backbone_parameters())
    nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], t.grad_clip)
    optimizer.step()

    records = [
        compute_reward(int(y), float(e), cfg.target_flops_ratio, cfg.beta)
        for y, e in zip(correct.tolist(), exec_ratio.tolist(), strict=True)
    ]
    reward_rows = [
        {"sample_id": int(i), **vars(r)} for i, r in zip(sample_ids.tolist(), records, strict=True)
    ]
    metrics = {
        "stage": str(Stage.RL_FINETUNE),
        "tau": cfg.gumbel_tau_end,
        "task_loss": task.item(),
        "exec_ratio": float(exec_ratio.mean()),
        "target_ratio": cfg.target_flops_ratio,
        "backbone_grad_norm": backbone_norm,
        "reward_mean": float(reward.mean()),
        "policy_loss": a2c.policy.item(),
        "value_loss": a2c.value.item(),
    }
    return metrics, reward_rows


def run_rl_finetune(state: TrainState, data: DatasetHandle, logs: RunLogs | None = None) -> TrainState:
    """Hybrid supervised + A2C fine-tuning.

    The first ``rl_frozen_epochs`` epochs train only the actor/critic heads;
    the remaining epochs train every parameter.

    Raises:
        StageError: If actor/critic heads are not installed
    """
    if not state.model.has_rl_heads:
        msg = "RL fine-tuning needs actor/critic heads; build the state with inherit_weights first"
        raise StageError(msg)
    state.enter(Stage.RL_FINETUNE)
    model, cfg = state.model, state.cfg
    t = cfg.training
    state.tau = cfg.gumbel_tau_end
    try:
        for epoch in progress(range(state.epoch, t.rl_epochs), desc="rl-finetune"):
            frozen = epoch < t.rl_frozen_epochs
            set_rl_trainable(model, rl_only=frozen)
            steps, ratios, rewards = [], [], []
            seed = epoch_seed(cfg, Stage.RL_FINETUNE, epoch)
            for step, (images, labels, ids) in enumerate(data.train.batches(t.batch_size, shuffle=True, seed=seed)):
                metrics, reward_rows = hybrid_step(images, labels, ids, state, frozen)
                for r in reward_rows:
                    r.update(epoch=epoch, step=step)
                rewards.extend(r["reward"] for r in reward_rows)
                ratios.extend(r["exec_ratio"] for r in reward_rows)
                if logs is not None:
                    logs.rewards.append_rows(reward_rows)
                metrics.update(epoch=epoch, step=step)
                steps.append(metrics)
            if logs is not None:
                logs.steps.append_rows(steps)
            row = {
                "stage": str(Stage.RL_FINETUNE),
                "epoch": epoch,
                "task_loss": _mean([s["task_loss"] for s in steps]),
                "exec_ratio_mean": _mean(ratios),
                "exec_ratio_std": _std(ratios),
                "reward_mean": _mean(rewards),
                "value_loss": _mean([s["value_loss"] for s in steps]),
                "clean_acc": _val_accuracy(model, data),
            }
            _finish_epoch(state, logs, row)
            if frozen:
                max_norm = max((s["backbone_grad_norm"] for s in steps), default=0.0)
                logger.info("[rl_finetune] frozen epoch %d: max backbone grad norm %.3g", epoch, max_norm)
    finally:
        set_rl_trainable(model, rl_only=False)
    state.complete()
    return state


# -- orchestration -----------------------------------------------------------

RUNNERS: dict[Stage, Callable[[TrainState, DatasetHandle, RunLogs | None], TrainState]] = {
    Stage.BACKBONE: train_backbone,
    Stage.CONTROLLER_PRETRAIN: run_controller_pretrain,
    Stage.COTRAIN: run_cotrain,
    Stage.RL_FINETUNE: run_rl_finetune,
}


def run_stage(
    stage: Stage,
    state: TrainState,
    data: DatasetHandle,
    out_dir: str | Path | None = None,
    rho: float | None = None,
    seed: int | None = None,
) -> TrainState:
    """Run one stage end to end and checkpoint the result.

    For the RL stage a co-trained state is first converted with
    ``inherit_weights`` (``rho`` and ``seed`` default to the config's
    ``inherit_fraction`` and ``seed``).

    Args:
        stage: Stage to run
        state: State to advance (modified in place)
        data: Dataset
        out_dir: Run directory for metrics CSVs and ``checkpoint/``
        rho: Inherit fraction override for the RL stage
        seed: Inheritance seed override for the RL stage

    Returns:
        The advanced state

    Raises:
        StageError: If the stage's prerequisites are not met
    """
    cfg = state.cfg
    if stage == Stage.RL_FINETUNE and not state.model.has_rl_heads:
        if not state.is_completed(Stage.COTRAIN):
            msg = "RL fine-tuning requires a completed co-training stage; run cotrain first"
            raise StageError(msg)
        report = inherit_weights(
            state.model,
            cfg.inherit_fraction if rho is None else rho,
            cfg.seed if seed is None else seed,
        )
        state.model = report.model
        state.optimizer = None
        state.enter(Stage.RL_FINETUNE)
    logs = RunLogs.open(out_dir) if out_dir is not None else None
    RUNNERS[stage](state, data, logs)
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "checkpoint")
    return state
