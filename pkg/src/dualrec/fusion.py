"""Bidirectional single-head cross-attention between the two item views.

For one user sequence, the coarse view is refined by attending over it
with queries projected from the fine view, and vice versa with a second
independent parameter triple. The output is the bare attention product
Softmax(Q K^T / sqrt(d)) V: no residual connection, no output projection,
one head, one layer. A ``residual`` switch exists for ablation runs and
is off by default.

Attention is non-causal within the sequence it is given; callers prevent
leakage by only ever fusing prefixes that exclude evaluation targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Parameter, xavier_uniform
from .tensor import ShapeError, Tensor, as_tensor, softmax_rows


@dataclass
class CrossAttnParams:
    """One direction's projection triple; all matrices are [d, d]."""

    wq: Parameter
    wk: Parameter
    wv: Parameter

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "CrossAttnParams":
        return cls(
            wq=Parameter(xavier_uniform((d, d), rng)),
            wk=Parameter(xavier_uniform((d, d), rng)),
            wv=Parameter(xavier_uniform((d, d), rng)),
        )

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}


@dataclass
class FusionParams:
    """Independent triples for the two refinement directions."""

    coarse_dir: CrossAttnParams   # refines the coarse view (queries from fine)
    fine_dir: CrossAttnParams     # refines the fine view (queries from coarse)

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "FusionParams":
        return cls(CrossAttnParams.create(d, rng), CrossAttnParams.create(d, rng))

    def named(self, prefix: str = "fusion") -> dict[str, Parameter]:
        out = {}
        out.update(self.coarse_dir.named(f"{prefix}.coarse_dir"))
        out.update(self.fine_dir.named(f"{prefix}.fine_dir"))
        return out


@dataclass
class FusedSequenceBatch:
    """Refined coarse/fine sequences with their validity mask; masked
    positions are zero rows in both outputs."""

    coarse: Tensor      # [L, d]
    fine: Tensor        # [L, d]
    mask: np.ndarray    # [L] bool


def _validate_mask(length: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        mask = np.ones(length, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length,):
        raise ShapeError(f"mask shape {mask.shape} does not match sequence length {length}")
    if not mask.any():
        raise ShapeError("cross-attention over a fully masked sequence")
    return mask


def cross_attend(q_src, kv_src, params: CrossAttnParams, mask=None, residual: bool = False) -> Tensor:
    """Attend from ``q_src`` rows over ``kv_src`` rows, both [L, d].

    Masked key columns get -inf logits; masked query rows are zeroed in
    the output. Every valid output row is a convex combination of the
    value-projected valid rows.
    """
    q_src, kv_src = as_tensor(q_src), as_tensor(kv_src)
    if q_src.shape != kv_src.shape:
        raise ShapeError(f"query/key sources disagree: {q_src.shape} vs {kv_src.shape}")
    length, d = q_src.shape
    if d != params.d:
        raise ShapeError(f"sequence width {d} does not match parameters ({params.d})")
    mask = _validate_mask(length, mask)

    q = q_src @ params.wq
    k = kv_src @ params.wk
    v = kv_src @ params.wv
    logits = (q @ k.T) / np.sqrt(d)
    key_bias = Tensor(np.where(mask, 0.0, -np.inf)[None, :])
    weights = softmax_rows(logits + key_bias)
    out = weights @ v
    if residual:
        out = out + q_src
    row_gate = Tensor(mask.astype(np.float64)[:, None])
    return out * row_gate


def fuse_bidirectional(
    e_coarse,
    e_fine,
    params: FusionParams,
    mask=None,
    residual: bool = False,
) -> FusedSequenceBatch:
    """Refine each view with queries from the other over one sequence."""
    e_coarse, e_fine = as_tensor(e_coarse), as_tensor(e_fine)
    if e_coarse.shape != e_fine.shape:
        raise ShapeError(f"view shapes disagree: {e_coarse.shape} vs {e_fine.shape}")
    mask = _validate_mask(e_coarse.shape[0], mask)
    refined_coarse = cross_attend(e_fine, e_coarse, params.coarse_dir, mask, residual)
    refined_fine = cross_attend(e_coarse, e_fine, params.fine_dir, mask, residual)
    return FusedSequenceBatch(coarse=refined_coarse, fine=refined_fine, mask=mask)
