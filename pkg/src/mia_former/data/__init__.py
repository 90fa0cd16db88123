"""Data module for MIA-Former.

This module provides dataset loading, splitting and the seeded synthetic
image generator.
"""

from mia_former.data.loaders import DatasetHandle, Split, load_dataset, split_by_hash
from mia_former.data.synthetic import synth_arrays, synth_generate

__all__ = ["DatasetHandle", "Split", "load_dataset", "split_by_hash", "synth_arrays", "synth_generate"]
