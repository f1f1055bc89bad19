"""Confusion tallies, balanced accuracy and worst-group balanced accuracy.

A class that is absent from a tally has an undefined rate. Such a rate is
dropped and the balanced accuracy falls back to the remaining rate; when both
rates are undefined the value is 0.5. :func:`is_degenerate` reports when that
convention was used so reports can flag it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class GroupedConfusion:
    per_group: Mapping[int, ConfusionCounts]
    overall: ConfusionCounts = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        total = ConfusionCounts()
        for c in self.per_group.values():
            total = total + c
        if self.overall is None:
            object.__setattr__(self, "overall", total)
        elif self.overall != total:
            raise ValueError("overall counts must equal the sum of per-group counts")


def confusion(labels, predictions, groups) -> GroupedConfusion:
    """Tally TP/FP/TN/FN overall and for every group index present."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    groups = np.asarray(groups)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("confusion needs at least one row")
    if predictions.shape[0] != n or groups.shape[0] != n:
        raise ValueError(
            f"length mismatch: labels={n}, predictions={predictions.shape[0]}, "
            f"groups={groups.shape[0]}")
    y = labels.astype(bool)
    p = predictions.astype(bool)
    per_group = {}
    for g in np.unique(groups):
        m = groups == g
        yg, pg = y[m], p[m]
        per_group[int(g)] = ConfusionCounts(
            tp=int(np.sum(yg & pg)), fp=int(np.sum(~yg & pg)),
            tn=int(np.sum(~yg & ~pg)), fn=int(np.sum(yg & ~pg)))
    return GroupedConfusion(per_group)


def balanced_accuracy(c: ConfusionCounts) -> float:
    pos = c.tp + c.fn
    neg = c.tn + c.fp
    if pos > 0 and neg > 0:
        return 0.5 * (c.tp / pos + c.tn / neg)
    if pos > 0:
        return c.tp / pos
    if neg > 0:
        return c.tn / neg
    return 0.5


def is_degenerate(c: ConfusionCounts) -> bool:
    """True when one of the two classes is missing from the tally."""
    return c.positives == 0 or c.negatives == 0


def per_group_ba(gc: GroupedConfusion) -> dict[int, float]:
    return {g: balanced_accuracy(c) for g, c in sorted(gc.per_group.items())}


def worst_group_ba(gc: GroupedConfusion) -> float:
    if not gc.per_group:
        raise ValueError("worst-group balanced accuracy needs at least one group")
    return min(per_group_ba(gc).values())


def ba_arrays(tp, fp, tn, fn) -> np.ndarray:
    """Elementwise balanced accuracy over arrays of counts.

    Uses the same arithmetic as :func:`balanced_accuracy`, so values agree
    bit for bit with the scalar version.
    """
    tp, fp, tn, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, tn, fn))
    pos = tp + fn
    neg = tn + fp
    with np.errstate(divide="ignore", invalid="ignore"):
        tpr = tp / pos
        tnr = tn / neg
    out = np.where(pos > 0,
                   np.where(neg > 0, 0.5 * (tpr + tnr), tpr),
                   np.where(neg > 0, tnr, 0.5))
    return out


def evaluate(labels, predictions, groups) -> tuple[float, float]:
    """Return (BA, WG-BA) for a set of binary predictions."""
    gc = confusion(labels, predictions, groups)
    return balanced_accuracy(gc.overall), worst_group_ba(gc)
