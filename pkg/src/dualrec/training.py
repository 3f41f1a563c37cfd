"""Joint training: batch assembly, dual-view scoring, the pairwise BCE
objective, the weighted alignment term, Adam optimization and early
stopping on validation NDCG@10.

Per batch the loss is ``L_srs + alpha * L_align``. The ranking part sums
``-[log sigma(s+) + log(1 - sigma(s-))]`` over every user and every
next-item position of the training prefix, pairing each ground-truth item
with one uniformly sampled negative (resampled every epoch, never drawn
from the user's history). The alignment part runs over the deduplicated
items of the batch's sequences.

Position k's prediction uses the hidden state at k of the encoded prefix.
Fusion is non-causal, so it is applied to the training prefix as a whole;
the prefix never contains validation or test targets, which is what keeps
evaluation leakage-free. Ablation switches: ``no_cl`` drops the alignment
term, ``no_ca`` skips fusion, ``no_ori_view`` reuses the coarse view as
the fine view, ``no_twp`` keeps only the text prompting route (which also
leaves alignment without partners, so it contributes zero).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SplitResult, sample_negatives
from .enhancement import adapt, build_alignment_batch, total_alignment_loss
from .evaluation import EvalReport, evaluate
from .model import ABLATION_FLAGS, DualViewModel, ScoringContext
from .optim import adam_step, clip_global_norm, zero_gradients
from .semantics import SemanticMatrices
from .tensor import ShapeError, Tensor, as_tensor, backward, gather_rows

PROB_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    """The loss stopped being finite; message carries epoch/batch context."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    alpha: float = 0.1
    tau: float = 2.0
    seed: int = 0
    align_cap: int = 512
    grad_clip: float = 5.0
    ablations: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        unknown = set(self.ablations) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        if not isinstance(self.ablations, frozenset):
            object.__setattr__(self, "ablations", frozenset(self.ablations))


def write_config(path: str | Path, train: TrainConfig, backbone_fields: dict) -> None:
    """Flat ``key = value`` config file covering training and backbone."""
    lines = []
    for key in ("learning_rate", "batch_size", "max_epochs", "patience",
                "alpha", "tau", "seed", "align_cap", "grad_clip"):
        lines.append(f"{key} = {getattr(train, key)}")
    lines.append(f"ablations = {','.join(sorted(train.ablations))}")
    for key, value in backbone_fields.items():
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_config(path: str | Path) -> dict[str, str]:
    """Read a flat key = value file; '#' starts a comment line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{raw}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def train_config_from_mapping(values: dict[str, str]) -> TrainConfig:
    kwargs = {}
    casts = {
        "learning_rate": float, "batch_size": int, "max_epochs": int,
        "patience": int, "alpha": float, "tau": float, "seed": int,
        "align_cap": int, "grad_clip": float,
    }
    for key, cast in casts.items():
        if key in values:
            kwargs[key] = cast(values[key])
    if "ablations" in values and values["ablations"]:
        kwargs["ablations"] = frozenset(
            flag.strip() for flag in values["ablations"].split(",") if flag.strip()
        )
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# losses


def score(cand_coarse, cand_fine, u_coarse, u_fine) -> Tensor:
    """Dot product of the concatenated candidate and user views."""
    cand_coarse, cand_fine = as_tensor(cand_coarse), as_tensor(cand_fine)
    u_coarse, u_fine = as_tensor(u_coarse), as_tensor(u_fine)
    if cand_coarse.shape != u_coarse.shape or cand_fine.shape != u_fine.shape:
        raise ShapeError("candidate and user view widths disagree")
    return (cand_coarse * u_coarse).sum() + (cand_fine * u_fine).sum()


def srs_loss(positive_scores, negative_scores) -> Tensor:
    """Pairwise binary cross-entropy summed over all scored positions."""
    positive_scores, negative_scores = as_tensor(positive_scores), as_tensor(negative_scores)
    if positive_scores.shape != negative_scores.shape:
        raise ShapeError("each positive needs exactly one paired negative")
    p_pos = positive_scores.sigmoid().clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_neg = negative_scores.sigmoid().clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(p_pos.log().sum() + (1.0 - p_neg).log().sum())


@dataclass
class BatchUser:
    """One user's training prefix with per-position sampled negatives."""

    user: int
    sequence: list[int]            # training prefix, >= 2 items to contribute
    negatives: list[int]           # len(sequence) - 1 sampled negative items


@dataclass
class LossBreakdown:
    srs: Tensor
    align: Tensor
    total: Tensor
    alpha: float
    align_skipped: bool = False

    @property
    def l_srs(self) -> float:
        return self.srs.item()

    @property
    def l_align(self) -> float:
        return self.align.item()

    @property
    def l_total(self) -> float:
        return self.total.item()


def forward_batch(
    model: DualViewModel,
    matrices: SemanticMatrices,
    batch: Sequence[BatchUser],
    config: TrainConfig,
) -> LossBreakdown:
    """Compute the batch loss exactly as the training loop sees it."""
    ablations = config.ablations

    # alignment over the deduplicated items of the batch's sequences
    align = Tensor(np.zeros(()))
    align_skipped = False
    if "no_cl" not in ablations and "no_twp" not in ablations:
        align_items = build_alignment_batch(
            [b.sequence for b in batch], cap=config.align_cap
        )
        if len(align_items) >= 2:
            ids = np.asarray(align_items, dtype=np.int64)
            e_text = adapt(model.adapters["text_route"], Tensor(matrices.text[ids]))
            e_visual = adapt(model.adapters["visual_route"], Tensor(matrices.visual[ids]))
            e_hybrid = adapt(model.adapters["hybrid_route"], Tensor(matrices.hybrid[ids]))
            align = total_alignment_loss(e_text, e_visual, e_hybrid, config.tau)
        else:
            align_skipped = True
    else:
        align_skipped = True

    # adapter views for every item the ranking loss touches, computed once
    needed: list[int] = []
    seen: set[int] = set()
    for b in batch:
        for item in list(b.sequence) + list(b.negatives):
            if item not in seen:
                seen.add(item)
                needed.append(item)

    positive_parts: list[Tensor] = []
    negative_parts: list[Tensor] = []
    if needed:
        ids = np.asarray(needed, dtype=np.int64)
        row_of = {item: row for row, item in enumerate(needed)}
        coarse_all, fine_all = model.item_views(matrices, ids, ablations)

        for b in batch:
            length = len(b.sequence)
            if length < 2:
                continue
            if len(b.negatives) != length - 1:
                raise ShapeError(
                    f"user {b.user}: {length - 1} positions need {length - 1} negatives, "
                    f"got {len(b.negatives)}"
                )
            rows = np.asarray([row_of[v] for v in b.sequence], dtype=np.int64)
            prefix_coarse = gather_rows(coarse_all, rows)
            prefix_fine = gather_rows(fine_all, rows)
            hidden_coarse, hidden_fine = model.encode_user_states(
                prefix_coarse, prefix_fine, ablations
            )

            state_rows = np.arange(length - 1)
            h_coarse = gather_rows(hidden_coarse, state_rows)
            h_fine = gather_rows(hidden_fine, state_rows)

            pos_rows = rows[1:]
            neg_rows = np.asarray([row_of[v] for v in b.negatives], dtype=np.int64)
            pos_scores = (
                (h_coarse * gather_rows(coarse_all, pos_rows)).sum(axis=1, keepdims=True)
                + (h_fine * gather_rows(fine_all, pos_rows)).sum(axis=1, keepdims=True)
            )
            neg_scores = (
                (h_coarse * gather_rows(coarse_all, neg_rows)).sum(axis=1, keepdims=True)
                + (h_fine * gather_rows(fine_all, neg_rows)).sum(axis=1, keepdims=True)
            )
            positive_parts.append(pos_scores)
            negative_parts.append(neg_scores)

    if positive_parts:
        from .tensor import concat

        srs = srs_loss(concat(positive_parts, axis=0), concat(negative_parts, axis=0))
    else:
        srs = Tensor(np.zeros(()))

    total = srs + config.alpha * align
    return LossBreakdown(srs=srs, align=align, total=total,
                         alpha=config.alpha, align_skipped=align_skipped)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class FitResult:
    best_epoch: int
    best_valid: EvalReport
    log: list[dict]
    checkpoint_path: Path | None = None


def _resample_negatives(
    split: SplitResult,
    histories: list[set[int]],
    num_items: int,
    user_order: Sequence[int],
    rng: np.random.Generator,
) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for user in user_order:
        seq = split.train[user]
        if len(seq) < 2:
            out[user] = []
            continue
        out[user] = sample_negatives(
            num_items, histories[user], len(seq) - 1, rng, user=user
        )
    return out


def fit(
    model: DualViewModel,
    matrices: SemanticMatrices,
    split: SplitResult,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    valid_eval_fn: Callable[[DualViewModel], EvalReport] | None = None,
    log_sink: Callable[[dict], None] | None = None,
) -> FitResult:
    """Epochs of shuffled mini-batches with early stopping on validation
    NDCG@10; returns the model restored to its best epoch.

    ``valid_eval_fn`` defaults to sampled-ranking evaluation on the
    validation split; tests may substitute a stub to exercise the
    stopping rule. Identical (seed, config, semantic matrices) reproduce
    the identical log, timing field aside.
    """
    rng = np.random.default_rng(config.seed)
    num_items = matrices.text.shape[0]
    num_users = len(split.train)
    histories: list[set[int]] = []
    for user in range(num_users):
        history = set(split.train[user])
        if user < len(split.valid) and split.valid[user].user == user:
            history.add(split.valid[user].positive)
        if user < len(split.test) and split.test[user].user == user:
            history.add(split.test[user].positive)
        histories.append(history)

    if valid_eval_fn is None:
        def valid_eval_fn(m: DualViewModel) -> EvalReport:
            return evaluate(ScoringContext(m, matrices, config.ablations), split.valid)

    params = model.named_parameters()
    param_list = list(params.values())

    best_ndcg = -np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    best_report: EvalReport | None = None
    epochs_since_best = 0
    log: list[dict] = []

    trainable_users = [u for u in range(num_users) if len(split.train[u]) >= 2]

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = list(trainable_users)
        rng.shuffle(order)
        negatives = _resample_negatives(split, histories, num_items, order, rng)

        srs_sum = 0.0
        align_sum = 0.0
        total_sum = 0.0
        batches = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo:lo + config.batch_size]
            batch = [BatchUser(u, list(split.train[u]), negatives[u]) for u in chunk]
            zero_gradients(param_list)
            breakdown = forward_batch(model, matrices, batch, config)
            total_value = breakdown.l_total
            if not np.isfinite(total_value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batches}: "
                    f"srs={breakdown.l_srs}, align={breakdown.l_align}"
                )
            backward(breakdown.total)
            clip_global_norm(param_list, config.grad_clip)
            adam_step(param_list, config.learning_rate)
            srs_sum += breakdown.l_srs
            align_sum += breakdown.l_align
            total_sum += total_value
            batches += 1

        report = valid_eval_fn(model)
        seconds = time.perf_counter() - start
        record = {
            "epoch": epoch,
            "l_srs": srs_sum / max(batches, 1),
            "l_align": align_sum / max(batches, 1),
            "total": total_sum / max(batches, 1),
            "valid_hr": report.hr,
            "valid_ndcg": report.ndcg,
            "seconds": seconds,
        }
        log.append(record)
        if log_sink is not None:
            log_sink(record)

        current = report.ndcg if report.ndcg is not None else -np.inf
        if current > best_ndcg:
            best_ndcg = current
            best_epoch = epoch
            best_state = model.snapshot()
            best_report = report
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    if best_state is not None:
        model.restore(best_state)
    if best_report is None:
        best_report = valid_eval_fn(model)

    checkpoint_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = run_dir / "checkpoint.ckpt"
        model.save(checkpoint_path, extra_metadata=train_metadata(config, best_epoch))

    return FitResult(
        best_epoch=best_epoch,
        best_valid=best_report,
        log=log,
        checkpoint_path=checkpoint_path,
    )


def train_metadata(config: TrainConfig, best_epoch: int) -> dict[str, str]:
    return {
        "alpha": str(config.alpha),
        "tau": str(config.tau),
        "seed": str(config.seed),
        "ablations": ",".join(sorted(config.ablations)),
        "best_epoch": str(best_epoch),
    }


def with_ablations(config: TrainConfig, flags: Sequence[str]) -> TrainConfig:
    return replace(config, ablations=frozenset(flags))
