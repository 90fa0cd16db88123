"""Tests for the mia-former command line."""

from pathlib import Path

import polars as pl
import pytest

from mia_former.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from mia_former.runs import LOCK_NAME, MANIFEST_NAME, read_run_manifest
from mia_former.training.checkpoint import checkpoint_config
from mia_former.types import MIAConfig, config_hash

SMALL = ["--num-samples", "40", "--quiet", "--log-level", "WARNING"]


def test_synth_data(tmp_path: Path) -> None:
    """Test synth-data writes the packed file and a run manifest."""
    out = tmp_path / "synth"
    assert main(["synth-data", "--out", str(out), "--png", *SMALL]) == EXIT_OK
    assert (out / "synthetic.npz").exists()
    assert (out / "labels.csv").exists()
    manifest = read_run_manifest(out)
    assert manifest.command == "synth-data"
    assert manifest.argv[:2] == ["mia-former", "synth-data"]
    assert not (out / LOCK_NAME).exists()


def test_flops_all_on(tmp_path: Path) -> None:
    """Test the all-on policy reports ratio 1 for every sample."""
    out = tmp_path / "flops"
    assert main(["flops", "--policy", "all-on", "--samples", "3", "--out", str(out), *SMALL]) == EXIT_OK
    frame = pl.read_csv(out / "flops.csv")
    summary = frame.filter(pl.col("block") == -1)
    assert summary.height == 3
    assert summary["ratio"].to_list() == [1.0, 1.0, 1.0]


@pytest.mark.parametrize(
    "argv",
    [
        ["eval"],
        ["trace-policy"],
        ["flops"],
        ["cotrain", "--target-flops-ratio", "1.5"],
        ["ablate", "--dims", "width"],
        ["no-such-command"],
        ["train-backbone", "--fit-normalization", "--ckpt", "runs/backbone/checkpoint"],
    ],
)
def test_usage_errors_exit_one(tmp_path: Path, argv: list[str], capsys: pytest.CaptureFixture[str]) -> None:
    """Test missing checkpoints and bad flags return status 1 with usage text."""
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "usage: mia-former" in capsys.readouterr().err
    assert not (tmp_path / MANIFEST_NAME).exists()


@pytest.mark.parametrize("flag", ["--help", "--version"])
def test_help_and_version_exit_zero(flag: str) -> None:
    """Test informational flags return status 0 instead of raising."""
    assert main([flag]) == EXIT_OK


def test_missing_data_exits_two(tmp_path: Path) -> None:
    """Test a runtime failure exits with status 2 and releases the lock."""
    out = tmp_path / "flops"
    argv = ["flops", "--policy", "all-on", "--data", str(tmp_path / "none.npz"), "--out", str(out), *SMALL]
    assert main(argv) == EXIT_RUNTIME
    assert not (out / LOCK_NAME).exists()
    assert not (out / MANIFEST_NAME).exists()


def test_locked_output_exits_two(tmp_path: Path) -> None:
    """Test a held output lock refuses the run."""
    (tmp_path / LOCK_NAME).write_text("123")
    assert main(["synth-data", "--out", str(tmp_path), *SMALL]) == EXIT_RUNTIME


def test_train_eval_trace(tmp_path: Path) -> None:
    """Test a backbone checkpoint feeds eval and trace-policy."""
    train = tmp_path / "backbone"
    assert main(["train-backbone", "--epochs", "1", "--out", str(train), *SMALL]) == EXIT_OK
    ckpt = train / "checkpoint"
    assert (ckpt / "manifest.json").exists()
    assert (train / "metrics.csv").exists()

    evaluated = tmp_path / "eval"
    assert main(["eval", "--ckpt", str(ckpt), "--out", str(evaluated), *SMALL]) == EXIT_OK
    report = pl.read_csv(evaluated / "eval.csv")
    assert report["attack"].to_list() == ["none"]
    assert any(p.startswith(str(ckpt)) for p in read_run_manifest(evaluated).inputs)

    traced = tmp_path / "trace"
    argv = ["trace-policy", "--ckpt", str(ckpt), "--grid-samples", "2", "--out", str(traced), *SMALL]
    assert main(argv) == EXIT_OK
    assert (traced / "trace.csv").exists()
    assert (traced / "trace.masks.txt").exists()
    assert pl.read_csv(traced / "skip_ratios.csv").height == 4
    assert (traced / "skip_ratios.svg").exists()
    assert len(list((traced / "grids").glob("*.svg"))) == 2


def test_fit_normalization_sets_pixel_stats(tmp_path: Path) -> None:
    """Test --fit-normalization stores the training-split statistics in the checkpoint config."""
    train = tmp_path / "backbone"
    argv = ["train-backbone", "--fit-normalization", "--epochs", "1", "--out", str(train), *SMALL]
    assert main(argv) == EXIT_OK
    cfg = checkpoint_config(train / "checkpoint")
    assert cfg.pixel_mean != MIAConfig.tiny().pixel_mean
    assert len(cfg.pixel_std) == cfg.in_channels
    assert all(0.0 < s < 1.0 for s in cfg.pixel_std)
    assert read_run_manifest(train).cfg_hash == config_hash(cfg)
