"""Dimension ablation grid and inheritance-fraction sweep.

Both harnesses start from a shared checkpoint and retrain only the stages the
varied setting affects: the ablation grid shares the stage-1 controllers and
reruns co-training (and optionally RL fine-tuning) per dimension subset; the
inheritance sweep shares the stage-2 checkpoint and reruns stage 3 per
inherit fraction.
"""

import logging
from collections.abc import Sequence
from itertools import combinations
from pathlib import Path

import polars as pl

from mia_former.data.loaders import DatasetHandle
from mia_former.errors import MIAFormerError, StageError
from mia_former.robustness.evaluate import evaluate
from mia_former.training.checkpoint import load_checkpoint
from mia_former.training.inherit import inherit_weights
from mia_former.training.stages import evaluate_accuracy, run_stage
from mia_former.training.state import Stage, TrainState
from mia_former.types import ALL_DIMENSIONS, AttackSpec, Dimension, MIAConfig, validate_config

logger = logging.getLogger(__name__)

ALL_SUBSETS: tuple[tuple[Dimension, ...], ...] = tuple(
    subset for size in range(len(ALL_DIMENSIONS) + 1) for subset in combinations(ALL_DIMENSIONS, size)
)

ABLATION_SCHEMA = {
    "dims": pl.String,
    "depth": pl.Boolean,
    "head": pl.Boolean,
    "token": pl.Boolean,
    "stage": pl.String,
    "accuracy": pl.Float64,
    "exec_ratio": pl.Float64,
    "disabled_all_on": pl.Boolean,
    "status": pl.String,
}

DEFAULT_FRACTIONS = (0.5, 0.75, 1.0)


def dims_label(dims: Sequence[Dimension]) -> str:
    """``"depth+token"`` style label; ``"none"`` for the empty subset."""
    ordered = [d for d in ALL_DIMENSIONS if d in dims]
    return "+".join(ordered) if ordered else "none"


def parse_dims(text: str) -> tuple[Dimension, ...]:
    """Inverse of ``dims_label``; also accepts commas.

    Raises:
        ValueError: On an unknown dimension name
    """
    text = text.strip()
    if text in {"", "none"}:
        return ()
    names = [part.strip() for part in text.replace(",", "+").split("+") if part.strip()]
    unknown = [n for n in names if n not in ALL_DIMENSIONS]
    if unknown:
        msg = f"Unknown dimension(s) {unknown}; choose from {list(ALL_DIMENSIONS)} or 'none'"
        raise ValueError(msg)
    return tuple(d for d in ALL_DIMENSIONS if d in names)


def _stage1_state(cfg: MIAConfig, data: DatasetHandle, out_dir: Path | None, base_ckpt: Path | None) -> TrainState:
    if base_ckpt is None and out_dir is not None and (out_dir / "stage1" / "checkpoint" / "manifest.json").exists():
        base_ckpt = out_dir / "stage1" / "checkpoint"
    if base_ckpt is not None:
        state = load_checkpoint(base_ckpt)
        if not state.is_completed(Stage.CONTROLLER_PRETRAIN):
            msg = f"Checkpoint {base_ckpt} has no completed controller pretraining; ablation cells start from stage 1"
            raise StageError(msg)
        logger.info("Ablation: reusing stage-1 checkpoint %s", base_ckpt)
        return state
    state = TrainState.fresh(validate_config({**cfg.model_dump(), "dynamic_dims": ALL_DIMENSIONS}))
    stage_dir = None if out_dir is None else out_dir / "stage1"
    run_stage(Stage.BACKBONE, state, data)
    return run_stage(Stage.CONTROLLER_PRETRAIN, state, data, out_dir=stage_dir)


def _disabled_all_on(state: TrainState, data: DatasetHandle) -> tuple[float, float, bool]:
    summary = evaluate_accuracy(state.model, data.val)
    trace, dims = summary.trace, state.cfg.dynamic_dims
    all_on = (
        ("depth" in dims or not bool(trace.skipped.any()))
        and ("head" in dims or bool(trace.heads.all()))
        and ("token" in dims or bool(trace.tokens.all()))
    )
    return summary.accuracy, summary.exec_ratio_mean, all_on


def _run_cell(
    cfg: MIAConfig,
    base: TrainState,
    dims: tuple[Dimension, ...],
    data: DatasetHandle,
    cell_dir: Path | None,
    rl: bool,
) -> TrainState:
    final = Stage.RL_FINETUNE if rl else Stage.COTRAIN
    if cell_dir is not None and (cell_dir / "checkpoint" / "manifest.json").exists():
        state = load_checkpoint(cell_dir / "checkpoint")
        if state.is_completed(final) and state.cfg.dynamic_dims == dims:
            logger.info("Ablation cell %s: reusing %s", dims_label(dims), cell_dir)
            return state
    state = base.clone(validate_config({**cfg.model_dump(), "dynamic_dims": dims}))
    run_stage(Stage.COTRAIN, state, data, out_dir=cell_dir)
    if rl:
        run_stage(Stage.RL_FINETUNE, state, data, out_dir=cell_dir)
    return state


def ablation_harness(
    cfg: MIAConfig,
    data: DatasetHandle,
    subsets: Sequence[Sequence[Dimension]] = ALL_SUBSETS,
    out_dir: str | Path | None = None,
    base_ckpt: str | Path | None = None,
    rl: bool = False,
) -> pl.DataFrame:
    """Train and evaluate one model per subset of dynamic dimensions.

    Stage 1 is run once (or loaded from ``base_ckpt``) and shared; every cell
    then co-trains with only its dimensions' controllers active, the others
    forced all-on. A failing cell is reported in the ``status`` column and
    the remaining cells still run.

    Args:
        cfg: Base configuration; its ``dynamic_dims`` is replaced per cell
        data: Dataset
        subsets: Dimension subsets to run, all 8 by default
        out_dir: Directory for the shared stage-1 and per-cell checkpoints;
            existing cell checkpoints are reused
        base_ckpt: Stage-1 checkpoint to share instead of training one
        rl: Also run RL fine-tuning per cell

    Returns:
        DataFrame with one row per subset: dims, depth/head/token flags,
        final stage, accuracy, exec_ratio, disabled_all_on and status

    Raises:
        StageError: If ``base_ckpt`` has no completed stage 1

    Examples:
        >>> report = ablation_harness(cfg, data, subsets=[(), ("depth",)])
        >>> report.filter(pl.col("dims") == "none")["exec_ratio"].item()
        1.0
    """
    out = None if out_dir is None else Path(out_dir)
    base = _stage1_state(cfg, data, out, None if base_ckpt is None else Path(base_ckpt))
    stage = str(Stage.RL_FINETUNE if rl else Stage.COTRAIN)
    rows = []
    for subset in subsets:
        dims = tuple(d for d in ALL_DIMENSIONS if d in subset)
        label = dims_label(dims)
        row = {"dims": label, "stage": stage, **{d: d in dims for d in ALL_DIMENSIONS}}
        cell_dir = None if out is None else out / f"cell-{label}"
        logger.info("Ablation cell %s", label)
        try:
            state = _run_cell(cfg, base, dims, data, cell_dir, rl)
            accuracy, ratio, all_on = _disabled_all_on(state, data)
        except (MIAFormerError, RuntimeError) as e:
            logger.warning("Ablation cell %s failed: %s; continuing with the remaining cells", label, e)
            rows.append({**row, "status": f"failed: {e}"})
            continue
        if not all_on:
            logger.error("Ablation cell %s: a disabled dimension produced a non-one mask", label)
        rows.append({**row, "accuracy": accuracy, "exec_ratio": ratio, "disabled_all_on": all_on, "status": "ok"})
    return pl.DataFrame(rows, schema=ABLATION_SCHEMA)


def inheritance_sweep(
    stage2: TrainState | str | Path,
    data: DatasetHandle,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    scratch: bool = True,
    attacks: Sequence[AttackSpec] | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> pl.DataFrame:
    """Run stage 3 once per inherit fraction and report clean and robust accuracy.

    Args:
        stage2: Co-trained state, or the path of its checkpoint
        data: Dataset; robustness is measured on the validation split
        fractions: Inherit fractions to sweep
        scratch: Add a row that re-initializes every inheritable controller
            tensor (fraction 0)
        attacks: Attacks to evaluate, default PGD-L-inf and FGSM-L2 at
            their default strengths
        out_dir: Directory for one ``rho-<fraction>`` run per row
        seed: Inheritance seed, default the config seed

    Returns:
        Long-format DataFrame: one row per (fraction, attack) with columns
        inherit, rho, inherited_fraction followed by the robustness report
        columns

    Raises:
        StageError: If the source state has no completed co-training
    """
    base = load_checkpoint(stage2) if isinstance(stage2, (str, Path)) else stage2
    if not base.is_completed(Stage.COTRAIN):
        msg = "The inheritance sweep needs a completed co-training stage; run cotrain first"
        raise StageError(msg)
    if attacks is None:
        attacks = (AttackSpec.default("pgd_linf"), AttackSpec.default("fgsm_l2"))
    seed = base.cfg.seed if seed is None else seed
    settings = [(f"{rho:g}", rho) for rho in fractions]
    if scratch:
        settings.append(("scratch", 0.0))

    frames = []
    for label, rho in settings:
        state = base.clone()
        report = inherit_weights(state.model, rho, seed)
        state.model = report.model
        state.optimizer = None
        state.enter(Stage.RL_FINETUNE)
        run_dir = None if out_dir is None else Path(out_dir) / f"rho-{label}"
        logger.info("Inheritance sweep: rho=%s inherits %.3f of the controller", label, report.inherited_fraction)
        run_stage(Stage.RL_FINETUNE, state, data, out_dir=run_dir)
        result = evaluate(state.model, data.val, attacks, checkpoint=str(run_dir or ""))
        frames.append(
            result.frame().with_columns(
                pl.lit(label).alias("inherit"),
                pl.lit(rho, dtype=pl.Float64).alias("rho"),
                pl.lit(report.inherited_fraction, dtype=pl.Float64).alias("inherited_fraction"),
            )
        )
    frame = pl.concat(frames)
    leading = ["inherit", "rho", "inherited_fraction"]
    return frame.select(leading + [c for c in frame.columns if c not in leading])
