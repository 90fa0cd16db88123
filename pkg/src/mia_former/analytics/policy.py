"""Skip-ratio statistics and trace persistence.

A trace file is a CSV with one row per (sample, block)::

    sample_id,block,skipped,heads_kept,tokens_kept,correct

An optional sidecar ``<name>.masks.txt`` stores the full head and token
bitmasks of each row as run-length encoded text, e.g. ``3x1,1x0``.
"""

import logging
from collections.abc import Sequence
from pathlib import Path

import polars as pl
import torch

from mia_former.errors import TraceError
from mia_former.model.masks import PolicyTrace
from mia_former.types import MIAConfig

logger = logging.getLogger(__name__)

TRACE_SCHEMA = {
    "sample_id": pl.Int64,
    "block": pl.Int64,
    "skipped": pl.Boolean,
    "heads_kept": pl.Int64,
    "tokens_kept": pl.Int64,
    "correct": pl.Boolean,
}


def rle_encode(bits: Sequence[bool | int]) -> str:
    """Run-length encode a bitmask as ``<count>x<bit>`` runs.

    Examples:
        >>> rle_encode([1, 1, 1, 0])
        '3x1,1x0'
    """
    runs: list[list[int]] = []
    for bit in (int(b) for b in bits):
        if runs and runs[-1][1] == bit:
            runs[-1][0] += 1
        else:
            runs.append([1, bit])
    return ",".join(f"{count}x{bit}" for count, bit in runs)


def rle_decode(text: str) -> list[int]:
    """Inverse of ``rle_encode``.

    Raises:
        TraceError: On a malformed run
    """
    bits: list[int] = []
    for run in filter(None, text.strip().split(",")):
        count, sep, bit = run.partition("x")
        if not sep or bit not in {"0", "1"} or not count.isdigit():
            msg = f"Malformed run '{run}' in mask sidecar; expected '<count>x<0|1>'"
            raise TraceError(msg)
        bits.extend([int(bit)] * int(count))
    return bits


def trace_frame(trace: PolicyTrace) -> pl.DataFrame:
    """Flatten a trace into trace-CSV rows, sample-major."""
    samples, blocks = trace.skipped.shape
    correct = trace.correct if trace.correct is not None else None
    return pl.DataFrame(
        {
            "sample_id": trace.sample_ids.repeat_interleave(blocks).tolist(),
            "block": list(range(blocks)) * samples,
            "skipped": trace.skipped.flatten().tolist(),
            "heads_kept": trace.heads_kept.flatten().tolist(),
            "tokens_kept": trace.tokens_kept.flatten().tolist(),
            "correct": None if correct is None else correct.repeat_interleave(blocks).tolist(),
        },
        schema=TRACE_SCHEMA,
    )


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.masks.txt")


def write_trace(trace: PolicyTrace, path: str | Path, masks: bool = True) -> Path:
    """Write a trace CSV and, with ``masks=True``, its bitmask sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(trace).write_csv(path)
    if masks:
        lines = []
        for s, sample_id in enumerate(trace.sample_ids.tolist()):
            for block in range(trace.num_blocks):
                heads = rle_encode(trace.heads[s, block].tolist())
                tokens = rle_encode(trace.tokens[s, block].tolist())
                lines.append(f"{sample_id} {block} {heads} {tokens}")
        sidecar_path(path).write_text("\n".join(lines) + "\n")
    logger.info("Wrote trace of %d samples to %s", len(trace), path)
    return path


def read_trace_frame(path: str | Path) -> pl.DataFrame:
    """Read a trace CSV.

    Raises:
        FileNotFoundError: If the file doesn't exist
        TraceError: If columns are missing
    """
    path = Path(path)
    if not path.exists():
        msg = f"File not found: {path}. Write one with `mia-former trace-policy`."
        raise FileNotFoundError(msg)
    frame = pl.read_csv(path)
    missing = [c for c in TRACE_SCHEMA if c not in frame.columns]
    if missing:
        msg = f"Trace file {path} is missing column(s) {missing}"
        raise TraceError(msg)
    return frame.select(pl.col(c).cast(t) for c, t in TRACE_SCHEMA.items())


def read_trace(path: str | Path, cfg: MIAConfig) -> PolicyTrace:
    """Rebuild a full PolicyTrace from a trace CSV and its sidecar.

    Raises:
        TraceError: If the sidecar is missing or inconsistent with the CSV
    """
    frame = read_trace_frame(path).sort(["sample_id", "block"])
    side = sidecar_path(path)
    if not side.exists():
        msg = f"Full masks need the sidecar {side}; rewrite the trace with masks enabled"
        raise TraceError(msg)
    masks: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
    for line in side.read_text().splitlines():
        if not line.strip():
            continue
        sample_id, block, heads, tokens = line.split()
        masks[int(sample_id), int(block)] = (rle_decode(heads), rle_decode(tokens))

    sample_ids = frame["sample_id"].unique(maintain_order=True).to_list()
    blocks = cfg.num_blocks
    if frame.height != len(sample_ids) * blocks:
        msg = f"Trace {path} has {frame.height} rows; expected {blocks} per sample for {len(sample_ids)} samples"
        raise TraceError(msg)
    heads, tokens = [], []
    for row in frame.iter_rows(named=True):
        key = (row["sample_id"], row["block"])
        if key not in masks:
            msg = f"Sidecar {side} has no masks for sample {key[0]} block {key[1]}"
            raise TraceError(msg)
        h, n = masks[key]
        if sum(h) != row["heads_kept"] or sum(n) != row["tokens_kept"]:
            msg = f"Sidecar masks for sample {key[0]} block {key[1]} disagree with the CSV counts"
            raise TraceError(msg)
        heads.append(h)
        tokens.append(n)
    correct = frame["correct"]
    trace = PolicyTrace(
        sample_ids=torch.tensor(sample_ids, dtype=torch.long),
        skipped=torch.tensor(frame["skipped"].to_list()).view(len(sample_ids), blocks),
        heads=torch.tensor(heads, dtype=torch.bool).view(len(sample_ids), blocks, -1),
        tokens=torch.tensor(tokens, dtype=torch.bool).view(len(sample_ids), blocks, -1),
        correct=None if correct.null_count() else torch.tensor(correct.to_list()).view(len(sample_ids), blocks)[:, 0],
    )
    trace.validate(cfg)
    return trace


def skip_ratio_stats(trace: PolicyTrace | pl.DataFrame, cfg: MIAConfig) -> pl.DataFrame:
    """Per-block skip ratios along each dynamic dimension.

    ``block_skip`` is the fraction of samples that skip the block.
    ``head_skip`` and ``token_skip`` are mean fractions of masked heads and
    tokens over the samples that execute the block; they are null for a
    block every sample skips.

    Args:
        trace: A PolicyTrace or the rows of a trace CSV
        cfg: Configuration the trace was recorded with

    Returns:
        DataFrame with columns block, samples, executed, block_skip,
        head_skip, token_skip; one row per block

    Raises:
        TraceError: If the trace is empty or its counts are out of range

    Examples:
        >>> stats = skip_ratio_stats(all_on_trace, cfg)
        >>> stats["block_skip"].to_list()
        [0.0, 0.0, 0.0, 0.0]
    """
    frame = trace_frame(trace) if isinstance(trace, PolicyTrace) else trace
    if frame.height == 0:
        msg = "Cannot compute skip ratios from an empty trace"
        raise TraceError(msg)
    bad = frame.filter(
        (pl.col("heads_kept") < 0)
        | (pl.col("heads_kept") > cfg.num_heads)
        | (pl.col("tokens_kept") < 0)
        | (pl.col("tokens_kept") > cfg.num_tokens)
        | (pl.col("block") >= cfg.num_blocks)
    )
    if bad.height:
        row = bad.row(0, named=True)
        msg = f"Trace row out of range for this config: {row}"
        raise TraceError(msg)

    executed = ~pl.col("skipped")
    return (
        frame.group_by("block")
        .agg(
            pl.len().alias("samples"),
            executed.sum().cast(pl.Int64).alias("executed"),
            pl.col("skipped").cast(pl.Float64).mean().alias("block_skip"),
            (1 - pl.col("heads_kept") / cfg.num_heads).filter(executed).mean().alias("head_skip"),
            (1 - pl.col("tokens_kept") / cfg.num_tokens).filter(executed).mean().alias("token_skip"),
        )
        .sort("block")
    )
