"""Checkpoint directories: a JSON manifest plus one raw float32 file per tensor.

Layout::

    ckpt/
      manifest.json          schema version, stage, epoch, tau, config, tensor index
      rng.bin                torch.Generator state
      tensors/
        model/blocks.0.qkv.weight.f32
        optim/0/exp_avg.f32
        ...

Tensor files hold little-endian IEEE-754 float32 values in C order; the
manifest records each file's shape. Tensor names are the canonical
``state_dict`` paths of the model and optimizer.
"""

import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError
from torch import Tensor

from mia_former.errors import CheckpointError, ConfigError
from mia_former.model.former import MIAFormer
from mia_former.training.optim import build_optimizer
from mia_former.training.state import Stage, TrainState
from mia_former.types import SCHEMA_VERSION, MIAConfig, config_hash, validate_config

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RNG_FILE = "rng.bin"
TENSOR_DIR = "tensors"


class TensorEntry(BaseModel):
    name: str
    file: str
    shape: list[int]


class CheckpointManifest(BaseModel):
    """Contents of ``manifest.json``."""

    schema_version: int = SCHEMA_VERSION
    stage: Stage
    epoch: int = Field(ge=0)
    tau: float
    completed: list[Stage]
    config: dict[str, Any]
    cfg_hash: str
    rl_heads: bool
    optimizer_groups: list[dict[str, Any]] | None = None
    tensors: list[TensorEntry]
    history: list[dict[str, Any]] = Field(default_factory=list)


def _write_tensor(root: Path, name: str, tensor: Tensor) -> TensorEntry:
    rel = f"{TENSOR_DIR}/{name}.f32"
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    array = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
    array.tofile(path)
    return TensorEntry(name=name, file=rel, shape=list(tensor.shape))


def _read_tensor(root: Path, entry: TensorEntry) -> Tensor:
    path = root / entry.file
    if not path.exists():
        msg = f"Checkpoint tensor file missing: {path}"
        raise CheckpointError(msg)
    array = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(entry.shape)) if entry.shape else 1
    if array.size != expected:
        msg = f"Tensor '{entry.name}' in {path} has {array.size} values, manifest shape {entry.shape} needs {expected}"
        raise CheckpointError(msg)
    return torch.from_numpy(array.astype(np.float32).reshape(entry.shape))


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write ``state`` to a checkpoint directory.

    The manifest is written last, so a directory without one is incomplete.

    Returns:
        The checkpoint directory
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = [_write_tensor(root, f"model/{name}", t) for name, t in state.model.state_dict().items()]
    groups = None
    if state.optimizer is not None:
        opt_state = state.optimizer.state_dict()
        for index, slots in opt_state["state"].items():
            entries.extend(_write_tensor(root, f"optim/{index}/{key}", value) for key, value in slots.items())
        groups = opt_state["param_groups"]
    (root / RNG_FILE).write_bytes(state.generator.get_state().numpy().tobytes())
    cfg = state.cfg
    manifest = CheckpointManifest(
        stage=state.stage,
        epoch=state.epoch,
        tau=state.tau,
        completed=list(state.completed),
        config=cfg.model_dump(mode="json"),
        cfg_hash=config_hash(cfg),
        rl_heads=state.model.has_rl_heads,
        optimizer_groups=groups,
        tensors=entries,
        history=state.history,
    )
    (root / MANIFEST).write_text(manifest.model_dump_json(indent=2) + "\n")
    logger.info("Saved %s checkpoint (epoch %d) to %s", state.stage, state.epoch, root)
    return root


def read_manifest(path: str | Path) -> CheckpointManifest:
    """Parse and validate a checkpoint manifest.

    Raises:
        CheckpointError: If the directory or manifest is missing or malformed
    """
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        msg = f"No checkpoint at {root}: {MANIFEST} not found. Run the previous stage with --out {root}."
        raise CheckpointError(msg)
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as e:
        msg = f"Malformed checkpoint manifest {manifest_path}: {e.errors()[0]['msg']}"
        raise CheckpointError(msg) from e
    if manifest.schema_version != SCHEMA_VERSION:
        msg = f"Checkpoint schema_version {manifest.schema_version} is not supported (expected {SCHEMA_VERSION})"
        raise CheckpointError(msg)
    return manifest


def load_checkpoint(path: str | Path, cfg: MIAConfig | None = None) -> TrainState:
    """Restore a TrainState written by ``save_checkpoint``.

    Args:
        path: Checkpoint directory
        cfg: Expected configuration; its hash must match the stored one

    Returns:
        State with model, optimizer, RNG, counters and history restored

    Raises:
        CheckpointError: If the checkpoint is missing, damaged, or was written
            for a different configuration
    """
    root = Path(path)
    manifest = read_manifest(root)
    try:
        stored = validate_config(manifest.config)
    except ConfigError as e:
        msg = f"Checkpoint {root} carries an invalid config: {e}"
        raise CheckpointError(msg) from e
    if cfg is not None and config_hash(cfg) != manifest.cfg_hash:
        msg = (
            f"Checkpoint {root} was written for config {manifest.cfg_hash[:12]}, "
            f"current config is {config_hash(cfg)[:12]}; pass the matching --config"
        )
        raise CheckpointError(msg)

    model = MIAFormer(stored)
    if manifest.rl_heads:
        model.install_rl_heads()
    tensors = {entry.name: _read_tensor(root, entry) for entry in manifest.tensors}
    model_state = {name.removeprefix("model/"): t for name, t in tensors.items() if name.startswith("model/")}
    try:
        model.load_state_dict(model_state)
    except RuntimeError as e:
        msg = f"Checkpoint {root} does not match the model layout: {e}"
        raise CheckpointError(msg) from e

    generator = torch.Generator()
    rng_path = root / RNG_FILE
    if rng_path.exists():
        generator.set_state(torch.frombuffer(bytearray(rng_path.read_bytes()), dtype=torch.uint8))

    state = TrainState(
        model=model,
        stage=manifest.stage,
        epoch=manifest.epoch,
        tau=manifest.tau,
        completed=list(manifest.completed),
        generator=generator,
        history=list(manifest.history),
    )
    if manifest.optimizer_groups is not None:
        optimizer = build_optimizer(manifest.stage, model)
        slots: dict[int, dict[str, Tensor]] = {}
        for name, tensor in tensors.items():
            if name.startswith("optim/"):
                _, index, key = name.split("/", 2)
                slots.setdefault(int(index), {})[key] = tensor
        optimizer.load_state_dict({"state": slots, "param_groups": manifest.optimizer_groups})
        state.optimizer = optimizer
    logger.info("Loaded %s checkpoint (epoch %d) from %s", state.stage, state.epoch, root)
    return state


def checkpoint_config(path: str | Path) -> MIAConfig:
    """Config stored in a checkpoint manifest."""
    return validate_config(read_manifest(path).config)

