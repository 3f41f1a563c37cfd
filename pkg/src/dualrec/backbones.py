"""Sequential encoders turning a sequence of item embeddings into a user
representation.

Two interchangeable kinds:

* ``self_attention`` - learned positional embeddings, then per layer:
  causal masked self-attention, residual, layer norm, a two-layer
  position-wise feed-forward with ReLU, residual, layer norm.
* ``recurrent`` - a gated recurrent unit scanned left to right from a
  zero initial state.

Both consume externally supplied sequence embeddings (the fused views)
rather than owning an item-embedding table; an optional id-embedding
table exists for embedding-free baseline runs. The user representation is
the hidden state at the last valid position, and hidden state k never
depends on positions after k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import Parameter, xavier_uniform
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    gather_rows,
    slice_cols,
    softmax_rows,
)

BACKBONE_KINDS = ("self_attention", "recurrent")


@dataclass
class BackboneConfig:
    kind: str = "self_attention"
    layers: int = 2
    heads: int = 1
    max_len: int = 200
    dropout: float = 0.2
    d: int = 128

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind '{self.kind}'")
        if self.kind == "self_attention" and self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if self.kind == "recurrent" and self.layers < 1:
            raise ValueError("recurrent backbone needs at least one layer")

    @classmethod
    def default_for(cls, kind: str, d: int, max_len: int, dropout: float | None = None) -> "BackboneConfig":
        if kind == "recurrent":
            return cls(kind=kind, layers=1, heads=1, max_len=max_len,
                       dropout=0.0 if dropout is None else dropout, d=d)
        return cls(kind=kind, layers=2, heads=1, max_len=max_len,
                   dropout=0.2 if dropout is None else dropout, d=d)


@dataclass
class EncodedSequence:
    hidden: Tensor   # [L, d], masked rows zeroed
    u: Tensor        # [1, d], hidden state at the last valid position


def _validate(seq: Tensor, mask, max_len: int) -> np.ndarray:
    if seq.ndim != 2:
        raise ShapeError(f"backbone expects [L, d] input, got shape {seq.shape}")
    length = seq.shape[0]
    if length > max_len:
        raise ShapeError(f"sequence length {length} exceeds max_len {max_len}")
    if mask is None:
        mask = np.ones(length, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length,):
        raise ShapeError(f"mask shape {mask.shape} does not match length {length}")
    if not mask.any():
        raise ShapeError("encoding a fully masked sequence")
    return mask


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


def _layer_norm(x: Tensor, gain: Parameter, bias: Parameter, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gain.reshape(1, -1) + bias.reshape(1, -1)


# ---------------------------------------------------------------------------
# self-attention backbone


@dataclass
class AttentionLayerParams:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ffn_w1: Parameter
    ffn_b1: Parameter
    ffn_w2: Parameter
    ffn_b2: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "AttentionLayerParams":
        return cls(
            wq=Parameter(xavier_uniform((d, d), rng)),
            wk=Parameter(xavier_uniform((d, d), rng)),
            wv=Parameter(xavier_uniform((d, d), rng)),
            wo=Parameter(xavier_uniform((d, d), rng)),
            ln1_gain=Parameter(np.ones(d)),
            ln1_bias=Parameter(np.zeros(d)),
            ffn_w1=Parameter(xavier_uniform((d, d), rng)),
            ffn_b1=Parameter(np.zeros(d)),
            ffn_w2=Parameter(xavier_uniform((d, d), rng)),
            ffn_b2=Parameter(np.zeros(d)),
            ln2_gain=Parameter(np.ones(d)),
            ln2_bias=Parameter(np.zeros(d)),
        )

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias",
            "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gain", "ln2_bias",
        )}


@dataclass
class SelfAttentionParams:
    config: BackboneConfig
    pos_emb: Parameter
    layers: list[AttentionLayerParams] = field(default_factory=list)

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator) -> "SelfAttentionParams":
        pos = Parameter(0.02 * rng.standard_normal((config.max_len, config.d)))
        layers = [AttentionLayerParams.create(config.d, rng) for _ in range(config.layers)]
        return cls(config=config, pos_emb=pos, layers=layers)

    def named(self, prefix: str = "backbone") -> dict[str, Parameter]:
        out = {f"{prefix}.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out


def _attention_block(x: Tensor, layer: AttentionLayerParams, bias: Tensor, heads: int) -> Tensor:
    d = x.shape[1]
    q = x @ layer.wq
    k = x @ layer.wk
    v = x @ layer.wv
    if heads == 1:
        weights = softmax_rows((q @ k.T) / np.sqrt(d) + bias)
        return weights @ v @ layer.wo
    dh = d // heads
    pieces = []
    for h in range(heads):
        qh = slice_cols(q, h * dh, dh)
        kh = slice_cols(k, h * dh, dh)
        vh = slice_cols(v, h * dh, dh)
        weights = softmax_rows((qh @ kh.T) / np.sqrt(dh) + bias)
        pieces.append(weights @ vh)
    return concat(pieces, axis=1) @ layer.wo


def encode_self_attention(
    seq,
    mask,
    params: SelfAttentionParams,
    rng: np.random.Generator | None = None,
) -> EncodedSequence:
    """Causal transformer encoding; pass ``rng`` to enable dropout."""
    seq = as_tensor(seq)
    cfg = params.config
    mask = _validate(seq, mask, cfg.max_len)
    length = seq.shape[0]

    x = seq + gather_rows(params.pos_emb, np.arange(length))
    x = _dropout(x, cfg.dropout, rng)

    # causal lower-triangular attention restricted to valid key columns
    allowed = np.tril(np.ones((length, length), dtype=bool)) & mask[None, :]
    bias = Tensor(np.where(allowed, 0.0, -np.inf))

    for layer in params.layers:
        att = _attention_block(x, layer, bias, cfg.heads)
        att = _dropout(att, cfg.dropout, rng)
        x = _layer_norm(x + att, layer.ln1_gain, layer.ln1_bias)
        ff = (x @ layer.ffn_w1 + layer.ffn_b1.reshape(1, -1)).relu() @ layer.ffn_w2 \
            + layer.ffn_b2.reshape(1, -1)
        ff = _dropout(ff, cfg.dropout, rng)
        x = _layer_norm(x + ff, layer.ln2_gain, layer.ln2_bias)

    x = x * Tensor(mask.astype(np.float64)[:, None])
    last_valid = int(np.max(np.nonzero(mask)[0]))
    u = gather_rows(x, np.array([last_valid]))
    return EncodedSequence(hidden=x, u=u)


# ---------------------------------------------------------------------------
# recurrent backbone


@dataclass
class GruLayerParams:
    w_ir: Parameter
    w_hr: Parameter
    b_r: Parameter
    w_iz: Parameter
    w_hz: Parameter
    b_z: Parameter
    w_in: Parameter
    w_hn: Parameter
    b_n: Parameter

    @classmethod
    def create(cls, d: int, rng: np.random.Generator) -> "GruLayerParams":
        mk = lambda: Parameter(xavier_uniform((d, d), rng))
        return cls(
            w_ir=mk(), w_hr=mk(), b_r=Parameter(np.zeros(d)),
            w_iz=mk(), w_hz=mk(), b_z=Parameter(np.zeros(d)),
            w_in=mk(), w_hn=mk(), b_n=Parameter(np.zeros(d)),
        )

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "w_ir", "w_hr", "b_r", "w_iz", "w_hz", "b_z", "w_in", "w_hn", "b_n",
        )}


@dataclass
class RecurrentParams:
    config: BackboneConfig
    layers: list[GruLayerParams] = field(default_factory=list)

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator) -> "RecurrentParams":
        return cls(config=config, layers=[GruLayerParams.create(config.d, rng)
                                          for _ in range(config.layers)])

    def named(self, prefix: str = "backbone") -> dict[str, Parameter]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.gru{i}"))
        return out


def encode_recurrent(
    seq,
    mask,
    params: RecurrentParams,
    rng: np.random.Generator | None = None,
) -> EncodedSequence:
    """Left-to-right gated recurrence over valid positions, zero initial
    state; dropout (if enabled) applies between stacked layers."""
    seq = as_tensor(seq)
    cfg = params.config
    mask = _validate(seq, mask, cfg.max_len)
    length, d = seq.shape

    x = seq
    for depth, p in enumerate(params.layers):
        # input-side projections for the whole sequence in three matmuls
        xr = x @ p.w_ir + p.b_r.reshape(1, -1)
        xz = x @ p.w_iz + p.b_z.reshape(1, -1)
        xn = x @ p.w_in + p.b_n.reshape(1, -1)
        h = Tensor(np.zeros((1, d)))
        states = []
        for t in range(length):
            if mask[t]:
                row = np.array([t])
                r = (gather_rows(xr, row) + h @ p.w_hr).sigmoid()
                z = (gather_rows(xz, row) + h @ p.w_hz).sigmoid()
                n = (gather_rows(xn, row) + (h @ p.w_hn) * r).tanh()
                h = (1.0 - z) * n + z * h
                states.append(h)
            else:
                states.append(Tensor(np.zeros((1, d))))
        x = concat(states, axis=0)
        if depth + 1 < len(params.layers):
            x = _dropout(x, cfg.dropout, rng)

    last_valid = int(np.max(np.nonzero(mask)[0]))
    u = gather_rows(x, np.array([last_valid]))
    return EncodedSequence(hidden=x, u=u)


# ---------------------------------------------------------------------------
# dispatch + optional id-embedding table


def create_backbone_params(config: BackboneConfig, rng: np.random.Generator):
    if config.kind == "self_attention":
        return SelfAttentionParams.create(config, rng)
    return RecurrentParams.create(config, rng)


def encode_sequence(seq, mask, params, rng: np.random.Generator | None = None) -> EncodedSequence:
    if isinstance(params, SelfAttentionParams):
        return encode_self_attention(seq, mask, params, rng)
    if isinstance(params, RecurrentParams):
        return encode_recurrent(seq, mask, params, rng)
    raise TypeError(f"unknown backbone parameters: {type(params).__name__}")


class IdEmbeddingTable:
    """Item-id embedding table for runs without semantic inputs."""

    def __init__(self, num_items: int, d: int, rng: np.random.Generator):
        self.table = Parameter(0.1 * rng.standard_normal((num_items, d)))

    def lookup(self, item_ids) -> Tensor:
        return gather_rows(self.table, np.asarray(item_ids, dtype=np.int64))

    def named(self, prefix: str = "id_embedding") -> dict[str, Parameter]:
        return {f"{prefix}.table": self.table}
