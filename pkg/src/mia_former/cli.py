"""Command-line interface: ``mia-former <command> [options]``.

Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

from mia_former import __version__
from mia_former.analytics.ablation import ALL_SUBSETS, ablation_harness, inheritance_sweep, parse_dims
from mia_former.analytics.policy import skip_ratio_stats, write_trace
from mia_former.cost.flops import flops_frame, model_flops
from mia_former.data.loaders import DatasetHandle, fit_normalization, load_dataset
from mia_former.data.synthetic import synth_generate
from mia_former.errors import MIAFormerError
from mia_former.plotting.policy import export_policy_grid, plot_skip_ratios
from mia_former.robustness.evaluate import evaluate
from mia_former.runs import configure_threads, run_lock, write_run_manifest
from mia_former.training.checkpoint import checkpoint_config, load_checkpoint
from mia_former.training.metrics import set_progress
from mia_former.training.stages import evaluate_accuracy, run_stage
from mia_former.training.state import Stage, TrainState
from mia_former.types import AttackSpec, DatasetSpec, MIAConfig, load_config, validate_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

EPOCH_FIELDS = {
    "train-backbone": "backbone_epochs",
    "pretrain-controller": "controller_pretrain_max_epochs",
    "cotrain": "cotrain_epochs",
    "finetune-rl": "rl_epochs",
}

# Commands that cannot start from a fresh model
NEEDS_CKPT = {"cotrain", "finetune-rl", "eval", "attack-eval", "trace-policy"}

STAGES = {
    "train-backbone": Stage.BACKBONE,
    "pretrain-controller": Stage.CONTROLLER_PRETRAIN,
    "cotrain": Stage.COTRAIN,
    "finetune-rl": Stage.RL_FINETUNE,
}


class ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        msg = f"expected a number, got '{text}'"
        raise argparse.ArgumentTypeError(msg) from e
    if not 0 <= value <= 1:
        msg = f"expected a value in [0, 1], got {value}"
        raise argparse.ArgumentTypeError(msg)
    return value


def _dims(text: str) -> tuple[str, ...]:
    try:
        return parse_dims(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


# -- configuration -----------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "seed": args.seed,
        "target_flops_ratio": args.target_flops_ratio,
        "beta": args.beta,
        "inherit_fraction": args.inherit,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    field = EPOCH_FIELDS.get(args.command)
    if args.epochs is not None and field is not None:
        overrides["training"] = {field: args.epochs}
    return overrides


def _apply(cfg: MIAConfig, overrides: dict[str, Any]) -> MIAConfig:
    data = cfg.model_dump()
    training = {**data["training"], **overrides.get("training", {})}
    if "rl_epochs" in overrides.get("training", {}):
        # Keep the frozen/unfrozen proportion when the stage length changes
        t = cfg.training
        training["rl_frozen_epochs"] = round(training["rl_epochs"] * t.rl_frozen_epochs / t.rl_epochs)
    data.update({k: v for k, v in overrides.items() if k != "training"})
    data["training"] = training
    return validate_config(data)


def resolve_config(args: argparse.Namespace) -> MIAConfig:
    """Config from --config (or the checkpoint, or the tiny default) plus flag overrides."""
    if args.config is not None:
        base = load_config(args.config)
    elif getattr(args, "ckpt", None) is not None:
        base = checkpoint_config(args.ckpt)
    else:
        base = MIAConfig.tiny()
    return _apply(base, _overrides(args))


def resolve_state(args: argparse.Namespace, cfg: MIAConfig) -> TrainState:
    """Fresh state, or the --ckpt state moved onto ``cfg``."""
    if args.ckpt is None:
        return TrainState.fresh(cfg)
    state = load_checkpoint(args.ckpt)
    if state.cfg != cfg:
        logger.info("Applying config overrides to checkpoint %s (optimizer state is reset)", args.ckpt)
        state = state.clone(cfg)
    return state


def resolve_data(args: argparse.Namespace, cfg: MIAConfig) -> DatasetHandle:
    common = {
        "num_classes": cfg.num_classes,
        "image_size": cfg.image_size,
        "in_channels": cfg.in_channels,
        "val_fraction": args.val_fraction,
        "num_samples": args.num_samples,
    }
    if args.data is None:
        spec = DatasetSpec(source="synthetic", **common)
    else:
        path = Path(args.data)
        spec = DatasetSpec(source="directory" if path.is_dir() else "packed", path=str(path), **common)
    return load_dataset(spec)


def _attacks(args: argparse.Namespace) -> list[AttackSpec]:
    kinds = args.attack or ["pgd_linf", "fgsm_l2"]
    specs = []
    for kind in kinds:
        spec = AttackSpec.default(kind)
        updates = {"epsilon": args.epsilon, "steps": args.steps}
        spec = AttackSpec(**{**spec.model_dump(), **{k: v for k, v in updates.items() if v is not None}})
        specs.append(spec)
    return specs


# -- commands ----------------------------------------------------------------


def cmd_synth_data(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    path = synth_generate(cfg.num_classes, args.num_samples, cfg.seed, out, size=cfg.image_size, png=args.png)
    print(f"wrote {args.num_samples} samples to {path}")


def cmd_train(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    stage = STAGES[args.command]
    data = resolve_data(args, cfg)
    state = resolve_state(args, cfg)
    if stage == Stage.RL_FINETUNE and args.inherit_sweep:
        report = inheritance_sweep(state, data, attacks=_attacks(args), out_dir=out)
        report.write_csv(out / "inherit_sweep.csv")
        print(report)
        return
    # the RL stage inherits the controller weights itself when heads are missing
    run_stage(stage, state, data, out_dir=out)
    summary = evaluate_accuracy(state.model, data.val) if len(data.val) else None
    if summary is not None:
        print(f"{stage}: val_acc={summary.accuracy:.4f} exec_ratio={summary.exec_ratio_mean:.4f}")
    print(f"checkpoint: {out / 'checkpoint'}")


def cmd_eval(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    state = resolve_state(args, cfg)
    data = resolve_data(args, cfg)
    attacks = _attacks(args) if args.command == "attack-eval" else []
    report = evaluate(state.model, data.val, attacks, checkpoint=str(args.ckpt))
    name = "robustness.csv" if attacks else "eval.csv"
    report.write_csv(out / name)
    print(report.summary())


def cmd_flops(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    policy = args.policy.replace("-", "_")
    state = resolve_state(args, cfg)
    data = resolve_data(args, cfg)
    split = data.val.take(args.samples) if args.samples else data.val
    summary = evaluate_accuracy(state.model, split, policy=policy)
    report = model_flops(summary.trace, cfg)
    frame = flops_frame(report)
    frame.write_csv(out / "flops.csv")
    print(
        f"policy={args.policy} samples={len(report)} "
        f"mean_ratio={report.mean_ratio:.4f} without_controller={report.mean_ratio_without_controller:.4f}"
    )


def cmd_trace_policy(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    state = resolve_state(args, cfg)
    data = resolve_data(args, cfg)
    summary = evaluate_accuracy(state.model, data.val)
    trace = summary.trace
    write_trace(trace, out / "trace.csv")
    stats = skip_ratio_stats(trace, cfg)
    stats.write_csv(out / "skip_ratios.csv")
    plot_skip_ratios(stats, out / "skip_ratios.svg", title="Block-wise skip ratios")
    for index in range(min(args.grid_samples, len(trace))):
        sample = trace.select(index)
        export_policy_grid(sample, cfg, out / "grids" / f"sample-{int(sample.sample_ids[0])}.svg")
    print(stats)


def cmd_ablate(args: argparse.Namespace, cfg: MIAConfig, out: Path) -> None:
    data = resolve_data(args, cfg)
    subsets = args.dims or ALL_SUBSETS
    report = ablation_harness(cfg, data, subsets, out_dir=out, base_ckpt=args.ckpt, rl=args.rl)
    report.write_csv(out / "ablation.csv")
    print(report)


COMMANDS: dict[str, Callable[[argparse.Namespace, MIAConfig, Path], None]] = {
    "synth-data": cmd_synth_data,
    "train-backbone": cmd_train,
    "pretrain-controller": cmd_train,
    "cotrain": cmd_train,
    "finetune-rl": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_eval,
    "flops": cmd_flops,
    "trace-policy": cmd_trace_policy,
    "ablate": cmd_ablate,
}


# -- parser ------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (default: the tiny config)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--target-flops-ratio", type=_fraction, help="Override the FLOPs budget")
    common.add_argument("--beta", type=float, help="Override the reward budget weight")
    common.add_argument("--inherit", type=_fraction, help="Override the inherit fraction for stage 3")
    common.add_argument("--epochs", type=int, help="Epochs for the stage being run")
    common.add_argument("--out", type=Path, help="Output directory (default: runs/<command>)")
    common.add_argument("--ckpt", type=Path, help="Checkpoint directory to start from")
    common.add_argument("--data", type=Path, help="Image directory with labels.csv or a packed .npz (default: synthetic)")
    common.add_argument("--num-samples", type=int, default=5000, help="Synthetic dataset size")
    common.add_argument("--val-fraction", type=float, default=0.1, help="Validation fraction of the dataset")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="Disable progress bars")

    attack = ArgumentParser(add_help=False)
    attack.add_argument("--attack", action="append", choices=["pgd_linf", "fgsm_l2"], help="Attack to run (repeatable)")
    attack.add_argument("--epsilon", type=float, help="Attack strength on [0, 1] pixels")
    attack.add_argument("--steps", type=int, help="PGD iterations")

    parser = ArgumentParser(prog="mia-former", description="Input-adaptive vision transformer training and analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    synth = sub.add_parser("synth-data", parents=[common], help="Write a seeded synthetic dataset")
    synth.add_argument("--png", action="store_true", help="Also write PNG images and labels.csv")
    backbone = sub.add_parser("train-backbone", parents=[common], help="Train the dense backbone")
    backbone.add_argument(
        "--fit-normalization", action="store_true", help="Set pixel_mean/pixel_std from the training split"
    )
    sub.add_parser("pretrain-controller", parents=[common], help="Stage 1: controllers towards all-on")
    sub.add_parser("cotrain", parents=[common], help="Stage 2: budgeted co-training")
    rl = sub.add_parser("finetune-rl", parents=[common, attack], help="Stage 3: hybrid A2C fine-tuning")
    rl.add_argument("--inherit-sweep", action="store_true", help="Sweep inherit fractions 0.5/0.75/1.0 and scratch")
    sub.add_parser("eval", parents=[common], help="Clean accuracy and FLOPs ratio")
    sub.add_parser("attack-eval", parents=[common, attack], help="Robust accuracy under PGD / FGSM")
    flops = sub.add_parser("flops", parents=[common], help="Per-sample FLOPs breakdown")
    flops.add_argument("--policy", default="model", choices=["model", "all-on", "skip-all"])
    flops.add_argument("--samples", type=int, default=0, help="Limit to the first N validation samples")
    trace = sub.add_parser("trace-policy", parents=[common], help="Policy traces, skip ratios and grids")
    trace.add_argument("--grid-samples", type=int, default=8, help="Policy grids to export")
    ablate = sub.add_parser("ablate", parents=[common], help="Dimension ablation grid")
    ablate.add_argument(
        "--dims", action="append", type=_dims, help="Subset such as 'depth+token' or 'none' (repeatable; default all 8)"
    )
    ablate.add_argument("--rl", action="store_true", help="Also run stage 3 in every cell")
    return parser


def parse_args(parser: ArgumentParser, argv: Sequence[str] | None) -> argparse.Namespace:
    """Parse ``argv`` and check flag combinations; usage errors exit with status 1."""
    args = parser.parse_args(argv)
    if args.ckpt is None and (args.command in NEEDS_CKPT or getattr(args, "policy", None) == "model"):
        parser.error(f"{args.command} needs --ckpt pointing at a checkpoint directory")
    if getattr(args, "fit_normalization", False) and args.ckpt is not None:
        parser.error("--fit-normalization sets up a fresh backbone and cannot be combined with --ckpt")
    return args


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code."""
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except SystemExit as e:
        # usage errors, --help and --version
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    set_progress(not args.quiet)
    configure_threads()
    out = args.out or Path("runs") / args.command
    inputs = [p for p in (args.config, args.data, args.ckpt) if p is not None]
    recorded_argv = sys.argv if argv is None else [parser.prog, *argv]
    try:
        cfg = resolve_config(args)
        if getattr(args, "fit_normalization", False):
            cfg = fit_normalization(cfg, resolve_data(args, cfg))
        with run_lock(out):
            COMMANDS[args.command](args, cfg, out)
            write_run_manifest(out, args.command, cfg.seed, cfg, inputs, argv=recorded_argv)
    except (MIAFormerError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)  # noqa: TRY400
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
