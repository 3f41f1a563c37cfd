"""Dual-view semantic enhancement for sequential recommendation.

A numpy library covering the full pipeline: interaction-log preparation,
three-route prompt construction and embedding acquisition, per-route
adapters with in-batch contrastive alignment, bidirectional
cross-attention fusion of the coarse and fine semantic views, two
sequential backbones, joint training, and a sampled-ranking evaluation
harness with long-tail slicing. A thin CLI (``dualrec``) ties the stages
together: prepare -> embed -> train -> eval -> report.
"""

from .tensor import Tensor, backward, cosine_sim, no_grad, softmax_rows
from .optim import Parameter, adam_step

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "cosine_sim",
    "no_grad",
    "softmax_rows",
    "adam_step",
]

__version__ = "0.1.0"
