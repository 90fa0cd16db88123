"""Tests for the staged training pipeline."""

from pathlib import Path

import numpy as np
import polars as pl
import pytest
import torch

from mia_former.data.loaders import DatasetHandle, load_dataset
from mia_former.errors import StageError
from mia_former.model.former import MIAFormer
from mia_former.runs import SINGLE_THREAD_ENV, configure_threads
from mia_former.training.checkpoint import load_checkpoint
from mia_former.training.inherit import inherit_weights
from mia_former.training.losses import RewardRecord, pretrain_loss
from mia_former.training.metrics import STEP_SCHEMA, RunLogs
from mia_former.training.stages import (
    cotrain_step,
    epoch_seed,
    evaluate_accuracy,
    hybrid_step,
    run_stage,
    set_rl_trainable,
)
from mia_former.training.state import Stage, TrainState
from mia_former.types import DatasetSpec, MIAConfig

from .conftest import FAST_TRAINING


def _pretrained(cfg: MIAConfig, data: DatasetHandle) -> TrainState:
    state = TrainState.fresh(cfg)
    run_stage(Stage.BACKBONE, state, data)
    return run_stage(Stage.CONTROLLER_PRETRAIN, state, data)


def _fake_cotrained(cfg: MIAConfig) -> TrainState:
    state = TrainState.fresh(cfg)
    state.completed = [Stage.BACKBONE, Stage.CONTROLLER_PRETRAIN]
    state.enter(Stage.COTRAIN)
    return state


def test_epoch_seed_distinct(cfg: MIAConfig) -> None:
    """Test shuffle seeds differ across stages and epochs."""
    seeds = {epoch_seed(cfg, stage, epoch) for stage in Stage for epoch in range(5)}
    assert len(seeds) == 20


def test_evaluate_accuracy_records_trace(model: MIAFormer, small_data: DatasetHandle) -> None:
    """Test evaluation returns accuracy, ratios and a per-sample trace."""
    summary = evaluate_accuracy(model, small_data.val, batch_size=10)
    assert 0.0 <= summary.accuracy <= 1.0
    assert len(summary.trace) == len(small_data.val)
    assert summary.trace.correct is not None
    assert summary.trace.sample_ids.tolist() == small_data.val.sample_ids.tolist()


def test_cotrain_requires_stage_one(fast_cfg: MIAConfig, small_data: DatasetHandle) -> None:
    """Test co-training without completed controller pretraining fails."""
    with pytest.raises(StageError, match="controller_pretrain"):
        run_stage(Stage.COTRAIN, TrainState.fresh(fast_cfg), small_data)


def test_rl_requires_cotrain(fast_cfg: MIAConfig, small_data: DatasetHandle) -> None:
    """Test RL fine-tuning without completed co-training fails."""
    with pytest.raises(StageError, match="co-training"):
        run_stage(Stage.RL_FINETUNE, TrainState.fresh(fast_cfg), small_data)


def test_cotrain_step_outside_stage(fast_cfg: MIAConfig, images: torch.Tensor, labels: torch.Tensor) -> None:
    """Test a co-training step on a fresh state raises StageError."""
    with pytest.raises(StageError, match="cotrain"):
        cotrain_step(images, labels, TrainState.fresh(fast_cfg), tau=1.0)


def test_cotrain_step_updates_both_groups(fast_cfg: MIAConfig, images: torch.Tensor, labels: torch.Tensor) -> None:
    """Test one co-training step moves backbone and controller weights."""
    state = _fake_cotrained(fast_cfg)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    metrics = cotrain_step(images, labels, state, tau=1.0, alpha_override=0.5)
    assert metrics["alpha"] == 0.5
    assert 0 < metrics["exec_ratio"] <= 1
    after = dict(state.model.named_parameters())
    assert not torch.equal(before["head.fc.weight"], after["head.fc.weight"])
    assert any(
        not torch.equal(before[n], after[n]) for n in before if n.startswith("controllers.") and "fc_" in n
    )


def test_alpha_sign_follows_budget(images: torch.Tensor, labels: torch.Tensor) -> None:
    """Test the dynamic alpha is positive above the budget and negative below."""
    above = _fake_cotrained(MIAConfig.tiny(target_flops_ratio=0.05))
    assert cotrain_step(images, labels, above, tau=1.0)["alpha"] > 0
    below = _fake_cotrained(MIAConfig.tiny(target_flops_ratio=1.0))
    assert cotrain_step(images, labels, below, tau=1.0)["alpha"] <= 0


def test_hybrid_step_frozen_backbone(fast_cfg: MIAConfig, images: torch.Tensor, labels: torch.Tensor) -> None:
    """Test frozen RL steps leave the backbone untouched and log exact rewards."""
    state = _fake_cotrained(fast_cfg)
    state.complete()
    state.model = inherit_weights(state.model, 0.75, seed=0).model
    state.enter(Stage.RL_FINETUNE)
    set_rl_trainable(state.model, rl_only=True)
    backbone = [p.detach().clone() for p in state.model.backbone_parameters()]
    metrics, rows = hybrid_step(images, labels, torch.arange(6), state, frozen=True)
    assert metrics["backbone_grad_norm"] == 0.0
    assert "cost_loss" not in metrics
    assert metrics["value_loss"] >= 0.0
    assert set(metrics) <= set(STEP_SCHEMA)
    for old, new in zip(backbone, state.model.backbone_parameters(), strict=True):
        assert torch.equal(old, new)
    assert len(rows) == 6
    for row in rows:
        expected = row["y"] + fast_cfg.beta * (fast_cfg.target_flops_ratio - row["exec_ratio"])
        assert row["reward"] == expected


def test_hybrid_step_needs_rl_heads(fast_cfg: MIAConfig, images: torch.Tensor, labels: torch.Tensor) -> None:
    """Test a hybrid step without actor/critic heads raises StageError."""
    with pytest.raises(StageError, match="actor/critic"):
        hybrid_step(images, labels, torch.arange(6), _fake_cotrained(fast_cfg), frozen=False)


@pytest.mark.slow
def test_controller_pretrain_reaches_all_keep(fast_cfg: MIAConfig, small_data: DatasetHandle) -> None:
    """Test stage 1 ends with every hard mask on and backbone-equal outputs."""
    state = _pretrained(fast_cfg, small_data)
    assert state.is_completed(Stage.CONTROLLER_PRETRAIN)
    model = state.model.eval()
    images = small_data.val.images[:8]
    with torch.no_grad():
        out = model(images)
        dense = model(images, policy="all_on")
    assert pretrain_loss(out.bundles, hard=True).item() == 0.0
    assert torch.equal(out.logits, dense.logits)


@pytest.mark.slow
def test_full_pipeline(tmp_path: Path, fast_cfg: MIAConfig, small_data: DatasetHandle) -> None:
    """Test all stages run, write their logs and checkpoint."""
    state = _pretrained(fast_cfg, small_data)
    run_stage(Stage.COTRAIN, state, small_data, out_dir=tmp_path / "cotrain")
    logs = RunLogs.open(tmp_path / "cotrain")
    assert logs.epochs.read().height == fast_cfg.training.cotrain_epochs
    assert logs.steps.read().height > 0
    assert state.tau == fast_cfg.gumbel_tau_end

    run_stage(Stage.RL_FINETUNE, state, small_data, out_dir=tmp_path / "rl", rho=0.75)
    assert state.is_completed(Stage.RL_FINETUNE)
    rewards = RunLogs.open(tmp_path / "rl").rewards.read()
    assert rewards.height == len(small_data.train) * fast_cfg.training.rl_epochs
    loaded = load_checkpoint(tmp_path / "rl" / "checkpoint")
    assert loaded.model.has_rl_heads
    assert loaded.completed == [Stage.BACKBONE, Stage.CONTROLLER_PRETRAIN, Stage.COTRAIN, Stage.RL_FINETUNE]


@pytest.mark.slow
def test_cotrain_is_reproducible(
    fast_cfg: MIAConfig, small_data: DatasetHandle, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    """Test two single-threaded co-training runs write byte-identical logs and end with identical weights."""
    monkeypatch.setenv(SINGLE_THREAD_ENV, "1")
    threads, deterministic = torch.get_num_threads(), torch.are_deterministic_algorithms_enabled()
    try:
        assert configure_threads()
        base = _pretrained(fast_cfg, small_data)
        a, b = base.clone(), base.clone()
        run_stage(Stage.COTRAIN, a, small_data, out_dir=tmp_path / "a")
        run_stage(Stage.COTRAIN, b, small_data, out_dir=tmp_path / "b")
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(deterministic)
    for name in ("steps.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    for (name, pa), pb in zip(a.model.state_dict().items(), b.model.state_dict().values(), strict=True):
        assert torch.equal(pa, pb), name


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory: pytest.TempPathFactory) -> tuple[MIAConfig, Path]:
    """Stages 0-3 on 320 synthetic samples with ten co-training epochs."""
    cfg = MIAConfig.tiny(training={**FAST_TRAINING, "cotrain_epochs": 10})
    data = load_dataset(DatasetSpec(num_samples=320, val_fraction=0.1, seed=3))
    root = tmp_path_factory.mktemp("pipeline")
    state = _pretrained(cfg, data)
    run_stage(Stage.COTRAIN, state, data, out_dir=root / "cotrain")
    run_stage(Stage.RL_FINETUNE, state, data, out_dir=root / "rl", rho=0.75)
    return cfg, root


@pytest.mark.slow
def test_cotrain_tracks_budget(pipeline_run: tuple[MIAConfig, Path]) -> None:
    """Test the last co-training epoch executes within 0.05 of the target FLOPs ratio."""
    cfg, root = pipeline_run
    epochs = RunLogs.open(root / "cotrain").epochs.read()
    assert epochs.height == 10
    assert abs(epochs["exec_ratio_mean"][-1] - cfg.target_flops_ratio) <= 0.05


@pytest.mark.slow
def test_alpha_sign_on_every_logged_step(pipeline_run: tuple[MIAConfig, Path]) -> None:
    """Test the alpha of every co-training step has the sign of exec_ratio - target_ratio."""
    _, root = pipeline_run
    steps = RunLogs.open(root / "cotrain").steps.read()
    assert steps.height > 0
    violations = [
        (row["epoch"], row["step"])
        for row in steps.iter_rows(named=True)
        if np.sign(row["alpha"]) != np.sign(row["exec_ratio"] - row["target_ratio"])
    ]
    assert violations == []


@pytest.mark.slow
def test_logged_rewards_rederive(pipeline_run: tuple[MIAConfig, Path]) -> None:
    """Test every stage-3 reward row re-derives exactly and frozen epochs leave the backbone gradient at 0."""
    cfg, root = pipeline_run
    logs = RunLogs.open(root / "rl")
    rewards = logs.rewards.read()
    assert rewards.height == 288 * cfg.training.rl_epochs
    for row in rewards.iter_rows(named=True):
        record = RewardRecord(row["y"], row["exec_ratio"], row["target_ratio"], row["beta"], row["reward"])
        assert record.rederive() == record.reward
    steps = logs.steps.read()
    assert steps["cost_loss"].null_count() == steps.height
    assert steps["value_loss"].null_count() == 0
    frozen = steps.filter(pl.col("epoch") < cfg.training.rl_frozen_epochs)
    assert frozen.height > 0
    assert frozen["backbone_grad_norm"].to_list() == [0.0] * frozen.height
