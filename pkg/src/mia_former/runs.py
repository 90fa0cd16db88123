"""Run directories: output lock, run manifest and thread settings.

Every CLI command that writes an output directory records a
``run_manifest.json`` with the command line, the seed, the config hash and
git-style blob hashes of its input files.
"""

import hashlib
import logging
import os
import sys
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from datetime import UTC, datetime
from pathlib import Path

import torch
from pydantic import BaseModel, Field

from mia_former import __version__
from mia_former.errors import RunLockedError
from mia_former.types import MIAConfig, config_hash

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"
MANIFEST_NAME = "run_manifest.json"
SINGLE_THREAD_ENV = "MIA_SINGLE_THREAD"


class RunManifest(BaseModel):
    """Provenance record written next to every run's outputs."""

    command: str
    argv: list[str]
    seed: int
    cfg_hash: str | None = None
    inputs: dict[str, str] = Field(default_factory=dict, description="path -> git blob sha1")
    version: str = __version__
    started_at: str = Field(default_factory=lambda: datetime.now(UTC).isoformat(timespec="seconds"))


def blob_hash(path: str | Path) -> str:
    """Git-style content hash: ``sha1(b"blob <size>\\0" + content)``.

    Examples:
        >>> _ = Path("empty").write_bytes(b"")
        >>> blob_hash("empty")
        'e69de29bb2d1d6434b8b29ae775ad8c2e48c5391'
    """
    content = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()  # noqa: S324


def input_hashes(paths: Sequence[str | Path]) -> dict[str, str]:
    """Blob hashes of input files; directories contribute every file inside."""
    hashes: dict[str, str] = {}
    for entry in map(Path, paths):
        files = sorted(p for p in entry.rglob("*") if p.is_file()) if entry.is_dir() else [entry]
        for file in files:
            if file.exists():
                hashes[str(file)] = blob_hash(file)
    return hashes


def configure_threads() -> bool:
    """Apply ``MIA_SINGLE_THREAD=1``: one intra-op thread and deterministic kernels.

    Returns:
        Whether single-thread mode is on
    """
    if os.environ.get(SINGLE_THREAD_ENV, "") not in {"1", "true", "yes"}:
        return False
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    logger.debug("Single-thread deterministic mode enabled")
    return True


@contextmanager
def run_lock(out_dir: str | Path) -> Iterator[Path]:
    """Hold ``<out_dir>/.lock`` for the duration of a run.

    Raises:
        RunLockedError: If another run holds the lock
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        msg = f"Output directory {out} is locked by another run; remove {lock} if that run is gone"
        raise RunLockedError(msg) from e
    with os.fdopen(fd, "w") as handle:
        handle.write(str(os.getpid()))
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    seed: int,
    cfg: MIAConfig | None = None,
    inputs: Sequence[str | Path] = (),
    argv: Sequence[str] | None = None,
) -> Path:
    """Write ``run_manifest.json`` into ``out_dir``."""
    manifest = RunManifest(
        command=command,
        argv=list(sys.argv if argv is None else argv),
        seed=seed,
        cfg_hash=None if cfg is None else config_hash(cfg),
        inputs=input_hashes(inputs),
    )
    path = Path(out_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    logger.debug("Wrote run manifest %s", path)
    return path


def read_run_manifest(out_dir: str | Path) -> RunManifest:
    return RunManifest.model_validate_json((Path(out_dir) / MANIFEST_NAME).read_text())
