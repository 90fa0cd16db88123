"""MIA-Former: input-adaptive vision transformers with depth, head and token skipping.

A backbone of MIA-Blocks is paired with one lightweight controller per block
that decides, per input, whether to run the block, which attention heads to
keep and which tokens to process. Controllers are trained in three stages:
pretraining towards an all-on policy, Gumbel straight-through co-training
under a FLOPs budget, and hybrid supervised plus A2C fine-tuning.
"""

__version__ = "0.1.0"
