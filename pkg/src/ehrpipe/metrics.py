"""Threshold-free ranking metrics: AU-ROC, AU-PR and Recall@Prec80.

AU-ROC is the tie-aware concordance probability (equal scores count 1/2),
identical to the trapezoidal area with tied scores grouped into single
threshold steps. AU-PR uses step-wise summation over descending unique
score thresholds, with no interpolation between points. Micro averaging
pools all (sample, category) cells before computing the scalar metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateLabels, IoFailure, NonFiniteValue, ShapeMismatch


def _validate(scores: np.ndarray, truths: np.ndarray) -> tuple[np.ndarray,
                                                               np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truths = np.asarray(truths).ravel().astype(bool)
    if scores.shape != truths.shape:
        raise ShapeMismatch(
            f"scores {scores.shape} vs truths {truths.shape}"
        )
    if scores.size == 0:
        raise DegenerateLabels("empty input")
    if not np.isfinite(scores).all():
        raise NonFiniteValue("scores contain NaN or Inf")
    return scores, truths


def roc_auc(scores, truths) -> float:
    """Area under ROC via tie-averaged ranks (Mann-Whitney statistic)."""
    scores, truths = _validate(scores, truths)
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    pos_rank_sum = float(ranks[truths].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_counts(scores: np.ndarray,
                      truths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after each descending unique score threshold."""
    order = np.argsort(-scores, kind="mergesort")
    sorted_truth = truths[order].astype(np.int64)
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_truth)
    fp = np.cumsum(1 - sorted_truth)
    # keep only the last index of each tied block
    last = np.flatnonzero(np.diff(sorted_scores, append=np.nan) != 0)
    return tp[last], fp[last]


def pr_auc(scores, truths) -> float:
    """Step-wise area under the precision-recall curve."""
    scores, truths = _validate(scores, truths)
    n_pos = int(truths.sum())
    if n_pos == 0:
        raise DegenerateLabels("need at least one positive")
    tp, fp = _threshold_counts(scores, truths)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def recall_at_precision(scores, truths, target: float = 0.8) -> float:
    """Maximum recall over thresholds achieving precision >= target.

    0.0 when no threshold reaches the target.
    """
    scores, truths = _validate(scores, truths)
    n_pos = int(truths.sum())
    if n_pos == 0:
        raise DegenerateLabels("need at least one positive")
    tp, fp = _threshold_counts(scores, truths)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    feasible = recall[precision >= target]
    return float(feasible.max()) if feasible.size else 0.0


@dataclass
class CategoryMetrics:
    support: int
    auroc: Optional[float]
    aupr: float
    recall_at_prec80: float


@dataclass
class MetricReport:
    micro_auroc: float
    micro_aupr: float
    micro_recall_at_prec80: float
    positive_ratio: float
    per_category: dict[int, CategoryMetrics] = field(default_factory=dict)
    unsupported_categories: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "micro": {
                "auroc": self.micro_auroc,
                "aupr": self.micro_aupr,
                "recall_at_prec80": self.micro_recall_at_prec80,
            },
            "positive_ratio": self.positive_ratio,
            "per_category": {
                str(k): {
                    "support": v.support,
                    "auroc": v.auroc,
                    "aupr": v.aupr,
                    "recall_at_prec80": v.recall_at_prec80,
                }
                for k, v in self.per_category.items()
            },
            "unsupported_categories": self.unsupported_categories,
        }


def micro_average(scores, truths, target: float = 0.8) -> MetricReport:
    """Micro metrics over pooled cells plus per-category breakdown.

    Categories without a positive in the evaluated data are reported as
    unsupported (their cells still count toward the micro pool). AU-ROC of
    a category without negatives is None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    if scores.shape != truths.shape or scores.ndim != 2:
        raise ShapeMismatch(
            f"scores {scores.shape} vs truths {truths.shape}"
        )
    report = MetricReport(
        micro_auroc=roc_auc(scores.ravel(), truths.ravel()),
        micro_aupr=pr_auc(scores.ravel(), truths.ravel()),
        micro_recall_at_prec80=recall_at_precision(
            scores.ravel(), truths.ravel(), target
        ),
        positive_ratio=float(truths.mean()),
    )
    for c in range(scores.shape[1]):
        col_scores = scores[:, c]
        col_truths = truths[:, c]
        support = int(col_truths.sum())
        if support == 0:
            report.unsupported_categories.append(c)
            continue
        auroc = (
            roc_auc(col_scores, col_truths)
            if support < col_truths.size
            else None
        )
        report.per_category[c] = CategoryMetrics(
            support=support,
            auroc=auroc,
            aupr=pr_auc(col_scores, col_truths),
            recall_at_prec80=recall_at_precision(col_scores, col_truths,
                                                 target),
        )
    return report


def save_report(path, report: MetricReport):
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, indent=1)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
