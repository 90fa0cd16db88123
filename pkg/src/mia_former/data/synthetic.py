"""Seeded, class-structured synthetic image corpus.

Each class is an oriented colour grating: orientation, spatial frequency and
tint depend on the class. Every sample draws a difficulty in [0, 1] that
lowers contrast and raises pixel noise, so the corpus mixes easy and hard
inputs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from mia_former.errors import DatasetError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticArrays:
    """Generated samples.

    Attributes:
        images: uint8 pixels, shape (n, size, size, 3)
        labels: int64 class indices, shape (n,)
        sample_ids: int64 identifiers 0..n-1
        difficulty: float32 per-sample difficulty in [0, 1]
    """

    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    difficulty: np.ndarray


def class_palette(classes: int) -> np.ndarray:
    """RGB tint per class, evenly spaced in hue."""
    hues = np.arange(classes) / classes
    hsv = np.stack([hues, np.full(classes, 0.8), np.ones(classes)], axis=-1)
    return hsv_to_rgb(hsv)


def synth_arrays(classes: int, n: int, seed: int, size: int = 32) -> SyntheticArrays:
    """Generate ``n`` class-balanced images in memory.

    Raises:
        DatasetError: If n < classes
    """
    if n < classes:
        msg = f"Need at least one sample per class: n={n} < classes={classes}"
        raise DatasetError(msg)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    difficulty = rng.uniform(0.0, 1.0, size=n).astype(np.float32)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    jitter = rng.normal(0.0, 0.05, size=n)
    noise = rng.standard_normal((n, size, size, 3), dtype=np.float32)

    palette = class_palette(classes)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    angle = np.pi * labels / classes + jitter
    freq = 2.0 + (labels % 3)
    proj = xx[None] * np.cos(angle)[:, None, None] + yy[None] * np.sin(angle)[:, None, None]
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])

    contrast = 1.0 - 0.7 * difficulty
    sigma = 0.05 + 0.25 * difficulty
    tint = palette[labels]
    pixels = 0.5 + 0.45 * contrast[:, None, None, None] * wave[..., None] * tint[:, None, None, :]
    pixels = pixels + sigma[:, None, None, None] * noise
    images = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    return SyntheticArrays(
        images=images,
        labels=labels,
        sample_ids=np.arange(n, dtype=np.int64),
        difficulty=difficulty,
    )


def synth_generate(
    classes: int,
    n: int,
    seed: int,
    out_dir: str | Path,
    size: int = 32,
    png: bool = False,
) -> Path:
    """Write a synthetic dataset to disk.

    Always writes ``synthetic.npz`` (a packed record file readable with
    ``DatasetSpec(source="packed")``). With ``png=True`` it also writes
    ``images/NNNNNN.png`` plus ``labels.csv`` (the directory format).

    Args:
        classes: Number of classes
        n: Number of samples
        seed: Generator seed; the same seed yields identical pixel bytes
        out_dir: Output directory
        size: Image side length
        png: Also export the directory format

    Returns:
        Path of the packed ``.npz`` file

    Examples:
        >>> path = synth_generate(10, 5000, seed=7, out_dir="data/synth")
        >>> path.name
        'synthetic.npz'
    """
    arrays = synth_arrays(classes, n, seed, size)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    packed = root / "synthetic.npz"
    with packed.open("wb") as fh:
        np.savez(
            fh,
            images=arrays.images,
            labels=arrays.labels,
            sample_ids=arrays.sample_ids,
            difficulty=arrays.difficulty,
        )
    if png:
        image_dir = root / "images"
        image_dir.mkdir(exist_ok=True)
        names = []
        for sample_id, pixels in zip(arrays.sample_ids.tolist(), arrays.images, strict=True):
            name = f"images/{sample_id:06d}.png"
            Image.fromarray(pixels).save(root / name, optimize=False)
            names.append(name)
        pl.DataFrame({"filename": names, "label": arrays.labels}).write_csv(root / "labels.csv")
    logger.info("Wrote %d synthetic samples (%d classes, seed %d) to %s", n, classes, seed, root)
    return packed
