"""Sampled-ranking evaluation: HR@K and NDCG@K over 101 candidates.

Each evaluation instance ranks the held-out positive against its 100
precomputed negatives. Ties count against the positive (a constant scorer
lands at rank 101), so degenerate models cannot register inflated hit
rates. The long-tail report reuses the same outcomes restricted to
instances whose positive falls in the tail partition.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import EvalInstance

EXPECTED_CANDIDATES = 101
DEFAULT_K = 10

# identifies the exact metric conventions baked into this module
METRIC_DEFINITION = (
    "rank=1+|{others with score>=positive}|;hr=[rank<=K];"
    "ndcg=1/log2(rank+1) if rank<=K else 0;candidates=101;ties=pessimistic"
)
METRIC_FINGERPRINT = hashlib.sha256(METRIC_DEFINITION.encode("utf-8")).hexdigest()[:12]


class CandidateScorer(Protocol):
    def score_candidates(self, prefix, candidates) -> np.ndarray: ...


@dataclass
class RankOutcome:
    user: int
    positive: int
    rank: int                      # 1-based among the 101 candidates
    scores: np.ndarray | None = None


@dataclass
class EvalReport:
    k: int
    hr: float | None
    ndcg: float | None
    count: int
    outcomes: list[RankOutcome] = field(default_factory=list)
    fingerprint: str = METRIC_FINGERPRINT
    undefined: bool = False        # True when the slice is empty

    def as_record(self) -> dict:
        return {
            "k": self.k,
            "hr": self.hr,
            "ndcg": self.ndcg,
            "count": self.count,
            "undefined": self.undefined,
            "fingerprint": self.fingerprint,
        }


def rank_positive(scores: Sequence[float], positive_index: int) -> int:
    """1 + number of other candidates scoring at least the positive."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (EXPECTED_CANDIDATES,):
        raise ValueError(
            f"expected exactly {EXPECTED_CANDIDATES} candidate scores, got {scores.shape}"
        )
    positive_score = scores[positive_index]
    others = np.delete(scores, positive_index)
    return 1 + int(np.count_nonzero(others >= positive_score))


def hr_at_k(rank: int, k: int = DEFAULT_K) -> float:
    if rank < 1:
        raise ValueError("ranks are 1-based")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int = DEFAULT_K) -> float:
    if rank < 1:
        raise ValueError("ranks are 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate(
    scorer: CandidateScorer,
    instances: Iterable[EvalInstance],
    k: int = DEFAULT_K,
    keep_scores: bool = False,
) -> EvalReport:
    """Score positive-plus-negatives per instance and aggregate the means.

    The positive is placed first in the candidate list; the reported rank
    is independent of that placement because ties count against it.
    """
    outcomes: list[RankOutcome] = []
    hr_total = 0.0
    ndcg_total = 0.0
    for inst in instances:
        candidates = [inst.positive] + list(inst.negatives)
        scores = np.asarray(scorer.score_candidates(list(inst.prefix), candidates))
        rank = rank_positive(scores, 0)
        outcomes.append(
            RankOutcome(inst.user, inst.positive, rank, scores if keep_scores else None)
        )
        hr_total += hr_at_k(rank, k)
        ndcg_total += ndcg_at_k(rank, k)
    count = len(outcomes)
    if count == 0:
        return EvalReport(k=k, hr=None, ndcg=None, count=0, undefined=True)
    return EvalReport(
        k=k, hr=hr_total / count, ndcg=ndcg_total / count, count=count, outcomes=outcomes
    )


def report_from_outcomes(outcomes: Sequence[RankOutcome], k: int = DEFAULT_K) -> EvalReport:
    if not outcomes:
        return EvalReport(k=k, hr=None, ndcg=None, count=0, undefined=True)
    hr = sum(hr_at_k(o.rank, k) for o in outcomes) / len(outcomes)
    ndcg = sum(ndcg_at_k(o.rank, k) for o in outcomes) / len(outcomes)
    return EvalReport(k=k, hr=hr, ndcg=ndcg, count=len(outcomes), outcomes=list(outcomes))


def long_tail_report(report: EvalReport, tail_items: set[int]) -> EvalReport:
    """Metrics restricted to instances whose positive target is a tail item.

    An empty slice yields count 0 with metrics flagged undefined rather
    than reported as zero.
    """
    sliced = [o for o in report.outcomes if o.positive in tail_items]
    return report_from_outcomes(sliced, k=report.k)
