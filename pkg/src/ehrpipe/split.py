"""Iterative stratified train/validation/test splitting for multi-label data.

Greedy algorithm: repeatedly take the label with the fewest unassigned
positive samples, and place each of its remaining samples into the partition
with the greatest remaining desired count for that label. Ties fall back to
the greatest remaining overall capacity, then to a seeded random choice.
Samples without any label are distributed last by remaining capacity.
Desired sample and per-label counts use largest-remainder rounding so the
totals are exact.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, IoFailure
from .labels import LabelVector

PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self) -> None:
        if len(self.ratios) != len(PARTITIONS):
            raise InvalidSpec("need one ratio per partition")
        if any(not 0.0 < r < 1.0 for r in self.ratios):
            raise InvalidSpec("each ratio must be in (0,1)")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise InvalidSpec("ratios must sum to 1")


@dataclass
class SplitResult:
    assignment: dict[str, str]  # admission_id -> partition tag
    sizes: dict[str, int]
    label_counts: dict[str, np.ndarray] = field(default_factory=dict)


def _largest_remainder(total: int, ratios) -> list[int]:
    """Integer allocation of `total` by ratios, exact by construction."""
    raw = [total * r for r in ratios]
    counts = [int(x) for x in raw]
    leftovers = total - sum(counts)
    order = sorted(
        range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def iterative_stratified_split(
    vectors: list[LabelVector], spec: SplitSpec
) -> SplitResult:
    spec.validate()
    n = len(vectors)
    if n < 3:
        raise InvalidSpec("need at least 3 samples")
    if not vectors[0].bits.size or not any(v.bits.any() for v in vectors):
        raise InvalidSpec("need at least one label present")
    n_labels = vectors[0].bits.shape[0]

    rng = random.Random(spec.seed)
    capacity = _largest_remainder(n, spec.ratios)

    bits = np.stack([v.bits for v in vectors])
    label_totals = bits.sum(axis=0)
    # desired[p][l]: how many positives of label l partition p still wants
    desired = np.zeros((len(PARTITIONS), n_labels), dtype=np.int64)
    for lab in range(n_labels):
        desired[:, lab] = _largest_remainder(int(label_totals[lab]), spec.ratios)

    unassigned = set(range(n))
    remaining_by_label: list[set[int]] = [
        set(np.flatnonzero(bits[:, lab])) for lab in range(n_labels)
    ]
    assignment_index = np.full(n, -1, dtype=np.int64)

    def _place(sample: int, partition: int) -> None:
        assignment_index[sample] = partition
        unassigned.discard(sample)
        capacity[partition] -= 1
        for lab in np.flatnonzero(bits[sample]):
            desired[partition, lab] -= 1
            remaining_by_label[lab].discard(sample)

    def _pick_partition(scores) -> int:
        best = max(scores)
        tied = [p for p, s in enumerate(scores) if s == best]
        if len(tied) == 1:
            return tied[0]
        cap_best = max(capacity[p] for p in tied)
        tied = [p for p in tied if capacity[p] == cap_best]
        return tied[0] if len(tied) == 1 else rng.choice(tied)

    while True:
        candidates = [
            (len(remaining_by_label[lab]), lab)
            for lab in range(n_labels)
            if remaining_by_label[lab]
        ]
        if not candidates:
            break
        _, label = min(candidates)
        for sample in sorted(remaining_by_label[label]):
            _place(sample, _pick_partition(list(desired[:, label])))

    for sample in sorted(unassigned):
        _place(sample, _pick_partition(capacity))

    assignment = {
        vectors[i].admission_id: PARTITIONS[assignment_index[i]]
        for i in range(n)
    }
    sizes = {
        tag: int((assignment_index == p).sum())
        for p, tag in enumerate(PARTITIONS)
    }
    label_counts = {
        tag: bits[assignment_index == p].sum(axis=0)
        for p, tag in enumerate(PARTITIONS)
    }
    return SplitResult(
        assignment=assignment, sizes=sizes, label_counts=label_counts
    )


def verify_distribution(
    result: SplitResult,
    vectors: list[LabelVector],
    tolerance: float,
    min_support: int = 1,
) -> dict:
    """Compare per-partition positive fractions against the global fraction.

    Labels with fewer than min_support global positives are skipped. Entries
    whose worst deviation exceeds the tolerance are flagged.
    """
    bits = np.stack([v.bits for v in vectors])
    n, n_labels = bits.shape
    members = {
        tag: [
            i for i, v in enumerate(vectors)
            if result.assignment[v.admission_id] == tag
        ]
        for tag in PARTITIONS
    }
    report: dict = {"tolerance": tolerance, "labels": {}, "flagged": []}
    for lab in range(n_labels):
        support = int(bits[:, lab].sum())
        if support < min_support:
            continue
        global_frac = support / n
        entry = {"support": support, "global": global_frac, "partitions": {}}
        worst = 0.0
        for tag in PARTITIONS:
            if not members[tag]:
                continue
            frac = float(bits[members[tag], lab].mean())
            entry["partitions"][tag] = frac
            worst = max(worst, abs(frac - global_frac))
        entry["max_deviation"] = worst
        report["labels"][lab] = entry
        if worst > tolerance:
            report["flagged"].append(lab)
    return report


def save_split(path, result: SplitResult):
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(result.assignment, handle, indent=0, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_split(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            assignment = json.load(handle)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return {str(k): str(v) for k, v in assignment.items()}
