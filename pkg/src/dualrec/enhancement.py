"""Route adapters and in-batch contrastive alignment.

Four independent adapters exist: one per prompted route (text, visual,
hybrid) producing candidates for the coarse view, and a fourth for the
raw attribute text producing the fine view. An adapter is two affine
maps with no nonlinearity, d0 -> d0//2 -> d.

The alignment loss pulls the adapted views of the same item together and
pushes different items of the batch apart, with cosine similarities
scaled by a temperature. The denominator deliberately excludes the
positive pair, so the loss can go below zero; tests pin the hand-computed
value -1.0 for the orthonormal two-item case. Visual and hybrid routes
are aligned toward the text route only, never toward each other, and the
adapted text embedding is the unified coarse representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .optim import Parameter, xavier_uniform
from .tensor import ShapeError, Tensor, as_tensor, cosine_rows, logsumexp_rows

ADAPTER_ROUTES = ("text_route", "visual_route", "hybrid_route", "original_text")
DEFAULT_ALIGN_CAP = 512


@dataclass
class AdapterParams:
    """Two affine maps: W2 (W1 e + b1) + b2, with d1 = d0 // 2."""

    w1: Parameter   # [d1, d0]
    b1: Parameter   # [d1]
    w2: Parameter   # [d, d1]
    b2: Parameter   # [d]

    @classmethod
    def create(cls, d0: int, d: int, rng: np.random.Generator) -> "AdapterParams":
        d1 = d0 // 2
        return cls(
            w1=Parameter(xavier_uniform((d1, d0), rng)),
            b1=Parameter(np.zeros(d1)),
            w2=Parameter(xavier_uniform((d, d1), rng)),
            b2=Parameter(np.zeros(d)),
        )

    @property
    def d0(self) -> int:
        return self.w1.shape[1]

    @property
    def d(self) -> int:
        return self.w2.shape[0]

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def adapt(params: AdapterParams, e) -> Tensor:
    """Project route embeddings [n, d0] (or a single [d0] vector) to [n, d]."""
    e = as_tensor(e)
    single = e.ndim == 1
    if single:
        e = e.reshape(1, -1)
    if e.shape[1] != params.d0:
        raise ShapeError(f"adapter expects width {params.d0}, got {e.shape[1]}")
    hidden = e @ params.w1.T + params.b1.reshape(1, -1)
    out = hidden @ params.w2.T + params.b2.reshape(1, -1)
    return out.reshape(-1) if single else out


def make_route_adapters(d0: int, d: int, rng: np.random.Generator) -> dict[str, AdapterParams]:
    """Four disjoint parameter sets, one per route."""
    return {route: AdapterParams.create(d0, d, rng) for route in ADAPTER_ROUTES}


@dataclass
class AlignmentConfig:
    tau: float = 2.0       # temperature dividing the cosine similarities
    alpha: float = 0.1     # weight of the alignment loss in the total
    cap: int = DEFAULT_ALIGN_CAP

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0:
            raise ValueError("alignment weight must be non-negative")


def alignment_loss_directed(e_a, e_b, tau: float) -> Tensor:
    """-(1/B) sum_i log[ exp(sim_ii / tau) / sum_{k != i} exp(sim_ik / tau) ].

    ``sim`` is cosine similarity between row i of ``e_a`` and row k of
    ``e_b``. Stabilised with log-sum-exp; needs at least two rows so the
    positive-excluding denominator is non-empty.
    """
    e_a, e_b = as_tensor(e_a), as_tensor(e_b)
    if e_a.shape != e_b.shape:
        raise ShapeError(f"alignment inputs disagree: {e_a.shape} vs {e_b.shape}")
    batch = e_a.shape[0]
    if batch < 2:
        raise ShapeError("alignment needs a batch of at least 2 items")
    logits = cosine_rows(e_a, e_b) / tau
    eye = np.eye(batch)
    positives = (logits * eye).sum(axis=1, keepdims=True)
    diag_mask = Tensor(np.where(eye > 0, -np.inf, 0.0))
    denominators = logsumexp_rows(logits + diag_mask)
    return (denominators - positives).mean()


def total_alignment_loss(e_text, e_visual, e_hybrid, tau: float) -> Tensor:
    """Sum of both directions of (text, visual) and (text, hybrid).

    Visual and hybrid are anchored to the text space; they are never
    aligned to each other.
    """
    e_text, e_visual, e_hybrid = map(as_tensor, (e_text, e_visual, e_hybrid))
    if not (e_text.shape == e_visual.shape == e_hybrid.shape):
        raise ShapeError(
            f"alignment inputs disagree: {e_text.shape}, {e_visual.shape}, {e_hybrid.shape}"
        )
    text_visual = alignment_loss_directed(e_text, e_visual, tau) + alignment_loss_directed(
        e_visual, e_text, tau
    )
    text_hybrid = alignment_loss_directed(e_text, e_hybrid, tau) + alignment_loss_directed(
        e_hybrid, e_text, tau
    )
    return text_visual + text_hybrid


def build_alignment_batch(
    user_sequences: Iterable[Sequence[int]],
    cap: int = DEFAULT_ALIGN_CAP,
) -> list[int]:
    """Deduplicated item ids of the batch's input sequences, in first
    occurrence order, truncated to ``cap``. Fewer than two distinct items
    means the alignment loss is skipped for the batch.
    """
    seen: set[int] = set()
    out: list[int] = []
    for seq in user_sequences:
        for item in seq:
            if item not in seen:
                seen.add(item)
                out.append(item)
                if len(out) >= cap:
                    return out
    return out
