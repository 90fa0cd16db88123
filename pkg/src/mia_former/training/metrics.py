"""Append-only CSV logs for training runs."""

import logging
import os
import sys
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

import polars as pl
from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")

EPOCH_SCHEMA: dict[str, type[pl.DataType]] = {
    "stage": pl.String,
    "epoch": pl.Int64,
    "task_loss": pl.Float64,
    "cost_loss": pl.Float64,
    "alpha": pl.Float64,
    "exec_ratio_mean": pl.Float64,
    "exec_ratio_std": pl.Float64,
    "reward_mean": pl.Float64,
    "value_loss": pl.Float64,
    "clean_acc": pl.Float64,
}

STEP_SCHEMA: dict[str, type[pl.DataType]] = {
    "stage": pl.String,
    "epoch": pl.Int64,
    "step": pl.Int64,
    "tau": pl.Float64,
    "task_loss": pl.Float64,
    "cost_loss": pl.Float64,
    "alpha": pl.Float64,
    "exec_ratio": pl.Float64,
    "target_ratio": pl.Float64,
    "backbone_grad_norm": pl.Float64,
    "reward_mean": pl.Float64,
    "policy_loss": pl.Float64,
    "value_loss": pl.Float64,
}

REWARD_SCHEMA: dict[str, type[pl.DataType]] = {
    "epoch": pl.Int64,
    "step": pl.Int64,
    "sample_id": pl.Int64,
    "y": pl.Int64,
    "exec_ratio": pl.Float64,
    "target_ratio": pl.Float64,
    "beta": pl.Float64,
    "reward": pl.Float64,
}

_progress_enabled = True


def set_progress(enabled: bool) -> None:
    """Globally enable or disable tqdm progress bars."""
    global _progress_enabled  # noqa: PLW0603
    _progress_enabled = enabled


def progress(iterable: Iterable[T], desc: str, total: int | None = None) -> Iterator[T]:
    """Wrap a loop in a tqdm bar when attached to a terminal."""
    disable = not _progress_enabled or not sys.stderr.isatty()
    yield from tqdm(iterable, desc=desc, total=total, disable=disable, leave=False)


class CsvLog:
    """Append-only CSV file with a fixed column schema.

    The header is written once, when the file is created; later appends add
    rows only, so a run resumed from a checkpoint extends the same file.

    Examples:
        >>> log = CsvLog(tmp_path / "metrics.csv", EPOCH_SCHEMA)
        >>> log.append({"stage": "cotrain", "epoch": 0, "task_loss": 2.3})
    """

    def __init__(self, path: str | Path, schema: Mapping[str, type[pl.DataType]]) -> None:
        self.path = Path(path)
        self.schema = dict(schema)

    def append_rows(self, rows: list[Mapping[str, Any]]) -> None:
        if not rows:
            return
        unknown = set().union(*(row.keys() for row in rows)) - self.schema.keys()
        if unknown:
            msg = f"Unknown columns for {self.path.name}: {sorted(unknown)}. Expected a subset of {list(self.schema)}"
            raise ValueError(msg)
        frame = pl.DataFrame([{k: row.get(k) for k in self.schema} for row in rows], schema=self.schema)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not self.path.exists() or self.path.stat().st_size == 0
        with self.path.open("ab") as fh:
            frame.write_csv(fh, include_header=new_file)
            fh.flush()
            os.fsync(fh.fileno())

    def append(self, row: Mapping[str, Any]) -> None:
        self.append_rows([row])

    def read(self) -> pl.DataFrame:
        if not self.path.exists():
            return pl.DataFrame(schema=self.schema)
        return pl.read_csv(self.path, schema=self.schema)


@dataclass(frozen=True)
class RunLogs:
    """The three logs of a training run directory.

    Attributes:
        epochs: One row per epoch (``metrics.csv``)
        steps: One row per optimizer step (``steps.csv``)
        rewards: One row per sample and RL step (``rewards.csv``)
    """

    epochs: CsvLog
    steps: CsvLog
    rewards: CsvLog

    @classmethod
    def open(cls, out_dir: str | Path) -> "RunLogs":
        root = Path(out_dir)
        return cls(
            epochs=CsvLog(root / "metrics.csv", EPOCH_SCHEMA),
            steps=CsvLog(root / "steps.csv", STEP_SCHEMA),
            rewards=CsvLog(root / "rewards.csv", REWARD_SCHEMA),
        )
