"""The assembled dual-view model: adapters, fusion and backbone in one
parameter container, plus the precomputed scoring context used by
evaluation.

Candidate items are always scored with their pre-fusion adapter outputs;
cross-attention refinement applies only to the members of a user's
sequence. This makes scoring well defined for arbitrary catalog items and
keeps candidate representations independent of which sequence they are
ranked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbones import BackboneConfig, create_backbone_params, encode_sequence
from .checkpoint import load_checkpoint, save_checkpoint
from .enhancement import AdapterParams, adapt, make_route_adapters
from .fusion import FusionParams, fuse_bidirectional
from .optim import Parameter
from .semantics import SemanticMatrices
from .tensor import Tensor, no_grad

ABLATION_FLAGS = ("no_cl", "no_ca", "no_ori_view", "no_twp")


@dataclass
class ModelConfig:
    d0: int = 1536
    d: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion_residual: bool = False
    per_view_backbone: bool = False   # default: one shared encoder for both views

    def metadata(self) -> dict[str, str]:
        return {
            "d0": str(self.d0),
            "d": str(self.d),
            "backbone_kind": self.backbone.kind,
            "backbone_layers": str(self.backbone.layers),
            "backbone_heads": str(self.backbone.heads),
            "backbone_max_len": str(self.backbone.max_len),
            "backbone_dropout": str(self.backbone.dropout),
            "fusion_residual": str(self.fusion_residual),
            "per_view_backbone": str(self.per_view_backbone),
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelConfig":
        backbone = BackboneConfig(
            kind=meta["backbone_kind"],
            layers=int(meta["backbone_layers"]),
            heads=int(meta["backbone_heads"]),
            max_len=int(meta["backbone_max_len"]),
            dropout=float(meta["backbone_dropout"]),
            d=int(meta["d"]),
        )
        return cls(
            d0=int(meta["d0"]),
            d=int(meta["d"]),
            backbone=backbone,
            fusion_residual=meta.get("fusion_residual", "False") == "True",
            per_view_backbone=meta.get("per_view_backbone", "False") == "True",
        )


class DualViewModel:
    """All trainable state for the dual-view recommender."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.backbone.d != config.d:
            raise ValueError(
                f"backbone width {config.backbone.d} must equal model width {config.d}"
            )
        self.config = config
        self.adapters: dict[str, AdapterParams] = make_route_adapters(config.d0, config.d, rng)
        self.fusion = FusionParams.create(config.d, rng)
        self.backbone = create_backbone_params(config.backbone, rng)
        self.backbone_fine = (
            create_backbone_params(config.backbone, rng) if config.per_view_backbone else None
        )

    # -- parameter bookkeeping ------------------------------------------
    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for route, adapter in self.adapters.items():
            out.update(adapter.named(f"adapter.{route}"))
        out.update(self.fusion.named("fusion"))
        out.update(self.backbone.named("backbone"))
        if self.backbone_fine is not None:
            out.update(self.backbone_fine.named("backbone_fine"))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()

    def save(self, path, extra_metadata: dict[str, str] | None = None) -> None:
        meta = self.config.metadata()
        if extra_metadata:
            meta.update(extra_metadata)
        save_checkpoint(path, {n: p.data for n, p in self.named_parameters().items()}, meta)

    @classmethod
    def load(cls, path) -> tuple["DualViewModel", dict[str, str]]:
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_metadata(meta), np.random.default_rng(0))
        model.restore(tensors)
        return model, meta

    # -- forward pieces ---------------------------------------------------
    def fine_view_route(self, ablations: frozenset[str]) -> str:
        return "text_route" if "no_ori_view" in ablations else "original_text"

    def item_views(
        self,
        matrices: SemanticMatrices,
        item_ids: np.ndarray,
        ablations: frozenset[str] = frozenset(),
    ) -> tuple[Tensor, Tensor]:
        """Pre-fusion (coarse, fine) views for the given dense item ids.

        Coarse is always the adapted text route. Fine is the adapted
        original text unless the original view is ablated, in which case
        the coarse tensor itself is reused.
        """
        item_ids = np.asarray(item_ids, dtype=np.int64)
        coarse = adapt(self.adapters["text_route"], Tensor(matrices.text[item_ids]))
        if "no_ori_view" in ablations:
            return coarse, coarse
        fine = adapt(self.adapters["original_text"], Tensor(matrices.original[item_ids]))
        return coarse, fine

    def encode_user(
        self,
        prefix_coarse: Tensor,
        prefix_fine: Tensor,
        ablations: frozenset[str] = frozenset(),
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Fuse the two views over one prefix and encode both; returns
        (u_coarse, u_fine), each [1, d]."""
        if "no_ca" in ablations:
            refined_coarse, refined_fine = prefix_coarse, prefix_fine
        else:
            fused = fuse_bidirectional(
                prefix_coarse, prefix_fine, self.fusion,
                residual=self.config.fusion_residual,
            )
            refined_coarse, refined_fine = fused.coarse, fused.fine
        enc_coarse = encode_sequence(refined_coarse, None, self.backbone, rng)
        fine_backbone = self.backbone_fine if self.backbone_fine is not None else self.backbone
        enc_fine = encode_sequence(refined_fine, None, fine_backbone, rng)
        return enc_coarse.u, enc_fine.u

    def encode_user_states(
        self,
        prefix_coarse: Tensor,
        prefix_fine: Tensor,
        ablations: frozenset[str] = frozenset(),
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Like :meth:`encode_user` but returns the full per-position hidden
        state matrices [L, d] used for next-item training targets."""
        if "no_ca" in ablations:
            refined_coarse, refined_fine = prefix_coarse, prefix_fine
        else:
            fused = fuse_bidirectional(
                prefix_coarse, prefix_fine, self.fusion,
                residual=self.config.fusion_residual,
            )
            refined_coarse, refined_fine = fused.coarse, fused.fine
        enc_coarse = encode_sequence(refined_coarse, None, self.backbone, rng)
        fine_backbone = self.backbone_fine if self.backbone_fine is not None else self.backbone
        enc_fine = encode_sequence(refined_fine, None, fine_backbone, rng)
        return enc_coarse.hidden, enc_fine.hidden


def candidate_views(
    model: DualViewModel,
    matrices: SemanticMatrices,
    item_ids,
    ablations: frozenset[str] = frozenset(),
) -> tuple[Tensor, Tensor]:
    """Pre-fusion dual-view embeddings used for scoring candidates."""
    return model.item_views(matrices, np.atleast_1d(np.asarray(item_ids, dtype=np.int64)), ablations)


class ScoringContext:
    """Read-only candidate scorer built once per evaluation pass.

    Adapter outputs for the whole catalog are precomputed; scoring one
    instance only runs fusion and the backbone over the prefix and takes
    dot products against the cached candidate views. Safe to share across
    threads as long as parameters stay frozen.
    """

    def __init__(
        self,
        model: DualViewModel,
        matrices: SemanticMatrices,
        ablations: frozenset[str] = frozenset(),
    ):
        self.model = model
        self.ablations = frozenset(ablations)
        with no_grad():
            all_items = np.arange(matrices.text.shape[0])
            coarse, fine = model.item_views(matrices, all_items, self.ablations)
            self.coarse_all = coarse.data
            self.fine_all = fine.data

    def score_candidates(self, prefix, candidates) -> np.ndarray:
        """Dot-product scores of ``candidates`` against the user state built
        from ``prefix`` (both dense item-id sequences)."""
        prefix = np.asarray(prefix, dtype=np.int64)
        candidates = np.asarray(candidates, dtype=np.int64)
        with no_grad():
            pc = Tensor(self.coarse_all[prefix])
            pf = Tensor(self.fine_all[prefix])
            u_coarse, u_fine = self.model.encode_user(pc, pf, self.ablations)
            scores = (
                self.coarse_all[candidates] @ u_coarse.data[0]
                + self.fine_all[candidates] @ u_fine.data[0]
            )
        return scores
