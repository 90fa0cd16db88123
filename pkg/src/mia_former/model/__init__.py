"""Model module for MIA-Former.

This module provides the maskable transformer backbone, the per-block
controllers and the binary decision primitives they share.
"""

from mia_former.model.backbone import FeatureMap, MIABlock, classify, masked_block_forward, patch_embed
from mia_former.model.controller import MIAController, a2c_decide, controller_step
from mia_former.model.former import ForwardOutput, MIAFormer, model_forward
from mia_former.model.gumbel import bernoulli_policy, gumbel_binary
from mia_former.model.masks import MaskBundle, PolicyTrace, RLDecision

__all__ = [
    "FeatureMap",
    "ForwardOutput",
    "MIABlock",
    "MIAController",
    "MIAFormer",
    "MaskBundle",
    "PolicyTrace",
    "RLDecision",
    "a2c_decide",
    "bernoulli_policy",
    "classify",
    "controller_step",
    "gumbel_binary",
    "masked_block_forward",
    "model_forward",
    "patch_embed",
]
