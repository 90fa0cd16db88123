"""Dataset ingestion: synthetic, image directory with labels.csv, or packed .npz.

Every source is decoded into one in-memory uint8 array, verified, and split
into train/validation by a seeded hash of each sample id.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor
from torch.utils.data import DataLoader, TensorDataset

from mia_former.data.synthetic import synth_arrays
from mia_former.errors import DatasetError
from mia_former.types import DatasetSpec, MIAConfig, validate_config

logger = logging.getLogger(__name__)

LABEL_COLUMNS = ("filename", "label")

# PIL mode per channel count
IMAGE_MODES = {1: "L", 3: "RGB"}


@dataclass(frozen=True)
class Split:
    """One partition of a dataset as tensors.

    Attributes:
        images: float32 pixels in [0, 1], shape (S, C, size, size)
        labels: int64 labels, shape (S,)
        sample_ids: int64 sample identifiers, shape (S,)
    """

    images: Tensor
    labels: Tensor
    sample_ids: Tensor

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, n: int) -> "Split":
        return Split(self.images[:n], self.labels[:n], self.sample_ids[:n])

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0) -> DataLoader:
        """Iterate (images, labels, sample_ids) mini-batches.

        Shuffling uses its own generator seeded with ``seed``, so the order
        depends only on the seed.
        """
        generator = torch.Generator().manual_seed(seed) if shuffle else None
        dataset = TensorDataset(self.images, self.labels, self.sample_ids)
        return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator)


@dataclass(frozen=True)
class DatasetHandle:
    """A loaded, verified dataset.

    Attributes:
        spec: Source description the handle was built from
        train: Training split
        val: Validation split
        normalization: Per-channel (mean, std) of the training pixels
    """

    spec: DatasetSpec
    train: Split
    val: Split
    normalization: tuple[tuple[float, ...], tuple[float, ...]]

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val)


def split_by_hash(sample_ids: np.ndarray, val_fraction: float, seed: int) -> np.ndarray:
    """Boolean validation mask from a seeded hash of each sample id.

    Samples are ordered by ``sha256(f"{seed}:{id}")`` and the first
    ``round(val_fraction * n)`` go to validation, so the split size is exact
    and membership does not depend on the on-disk order.
    """
    keys = [hashlib.sha256(f"{seed}:{int(i)}".encode()).hexdigest() for i in sample_ids]
    order = sorted(range(len(keys)), key=keys.__getitem__)
    mask = np.zeros(len(keys), dtype=bool)
    mask[order[: round(val_fraction * len(keys))]] = True
    return mask


def _check_labels(labels: np.ndarray, num_classes: int, names: list[str]) -> None:
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        row = int(bad[0])
        msg = f"Sample {names[row]} has label {int(labels[row])} outside [0, {num_classes})"
        raise DatasetError(msg)


def _load_directory(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    root = Path(spec.path or "")
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        msg = f"File not found: {labels_path}. A directory dataset needs labels.csv with columns filename,label."
        raise DatasetError(msg)
    try:
        table = pl.read_csv(labels_path)
    except Exception as e:
        msg = f"Failed to read CSV file '{labels_path}': {e}. Please ensure the file is a valid CSV format."
        raise DatasetError(msg) from e
    missing = [c for c in LABEL_COLUMNS if c not in table.columns]
    if missing:
        msg = f"{labels_path} is missing column(s) {missing}; expected header 'filename,label'"
        raise DatasetError(msg)

    filenames = table["filename"].cast(pl.String).to_list()
    try:
        labels = table["label"].cast(pl.Int64).to_numpy()
    except pl.exceptions.InvalidOperationError as e:
        msg = f"{labels_path}: labels must be integers ({e})"
        raise DatasetError(msg) from e
    names = [f"row {i + 1} ({name})" for i, name in enumerate(filenames)]
    _check_labels(labels, spec.num_classes, names)

    mode = IMAGE_MODES.get(spec.in_channels)
    if mode is None:
        msg = f"Directory datasets decode to 1 (grayscale) or 3 (RGB) channels, got in_channels={spec.in_channels}"
        raise DatasetError(msg)
    size, channels = spec.image_size, spec.in_channels
    images = np.empty((len(filenames), size, size, channels), dtype=np.uint8)
    for i, name in enumerate(filenames):
        path = root / name
        if not path.exists():
            msg = f"Sample {names[i]}: image file not found at {path}"
            raise DatasetError(msg)
        try:
            with Image.open(path) as img:
                converted = img.convert(mode)
                if converted.size != (size, size):
                    converted = converted.resize((size, size), Image.Resampling.BILINEAR)
                images[i] = np.asarray(converted, dtype=np.uint8).reshape(size, size, channels)
        except (UnidentifiedImageError, OSError) as e:
            msg = f"Sample {names[i]}: cannot decode image {path}: {e}"
            raise DatasetError(msg) from e
    return images, labels, np.arange(len(filenames), dtype=np.int64)


def _load_packed(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(spec.path or "")
    if not path.exists():
        msg = f"File not found: {path}. Generate one with `mia-former synth-data` or pass a valid --data path."
        raise DatasetError(msg)
    with np.load(path) as records:
        for key in ("images", "labels"):
            if key not in records:
                msg = f"Packed dataset {path} has no '{key}' array"
                raise DatasetError(msg)
        images = records["images"]
        labels = records["labels"].astype(np.int64)
        sample_ids = records["sample_ids"].astype(np.int64) if "sample_ids" in records else np.arange(len(labels))
    size, channels = spec.image_size, spec.in_channels
    if images.ndim != 4 or images.shape[1:] != (size, size, channels) or images.dtype != np.uint8:
        msg = f"Packed images in {path} must be uint8 (n, {size}, {size}, {channels}), got {images.dtype} {images.shape}"
        raise DatasetError(msg)
    if len(labels) != len(images) or len(sample_ids) != len(images):
        msg = f"Packed dataset {path}: {len(images)} images, {len(labels)} labels, {len(sample_ids)} sample ids"
        raise DatasetError(msg)
    _check_labels(labels, spec.num_classes, [f"sample_id {int(i)}" for i in sample_ids])
    return images, labels, sample_ids


def load_dataset(spec: DatasetSpec) -> DatasetHandle:
    """Load and verify a dataset, then split it.

    Args:
        spec: Source description

    Returns:
        DatasetHandle with train and validation splits

    Raises:
        DatasetError: On a missing file, a label out of range or an undecodable
            image; the message names the offending sample

    Examples:
        >>> handle = load_dataset(DatasetSpec(num_samples=5000, val_fraction=0.1))
        >>> len(handle.train), len(handle.val)
        (4500, 500)
    """
    if spec.source == "synthetic":
        arrays = synth_arrays(spec.num_classes, spec.num_samples, spec.seed, spec.image_size)
        images, labels, sample_ids = arrays.images, arrays.labels, arrays.sample_ids
    elif spec.source == "directory":
        images, labels, sample_ids = _load_directory(spec)
    else:
        images, labels, sample_ids = _load_packed(spec)
    if len(labels) == 0:
        msg = f"Dataset from {spec.source} source is empty"
        raise DatasetError(msg)

    is_val = split_by_hash(sample_ids, spec.val_fraction, spec.seed)
    pixels = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 255.0
    labels_t = torch.from_numpy(labels)
    ids_t = torch.from_numpy(sample_ids)
    val_mask = torch.from_numpy(is_val)
    train = Split(pixels[~val_mask], labels_t[~val_mask], ids_t[~val_mask])
    val = Split(pixels[val_mask], labels_t[val_mask], ids_t[val_mask])
    channels = spec.in_channels
    mean = tuple(train.images.mean(dim=(0, 2, 3)).tolist()) if len(train) else (0.5,) * channels
    std = tuple(train.images.std(dim=(0, 2, 3)).tolist()) if len(train) > 1 else (0.25,) * channels
    logger.info("Loaded %s dataset: %d train / %d val samples", spec.source, len(train), len(val))
    return DatasetHandle(spec=spec, train=train, val=val, normalization=(mean, std))


def fit_normalization(cfg: MIAConfig, data: DatasetHandle) -> MIAConfig:
    """Return ``cfg`` with ``pixel_mean``/``pixel_std`` set to the training-split statistics.

    Raises:
        DatasetError: If a channel is constant over the training split
        ConfigError: If the dataset's channel count differs from the config's
    """
    mean, std = data.normalization
    flat = [i for i, s in enumerate(std) if s == 0]
    if flat:
        msg = f"Cannot fit pixel normalization: channel(s) {flat} are constant over the training split"
        raise DatasetError(msg)
    fitted = validate_config(
        {**cfg.model_dump(), "pixel_mean": [round(m, 6) for m in mean], "pixel_std": [round(s, 6) for s in std]}
    )
    logger.info("Fitted pixel normalization: mean %s std %s", fitted.pixel_mean, fitted.pixel_std)
    return fitted
