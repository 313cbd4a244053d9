"""Pixel-wise agreement between binary vessel masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


def confusion(pred, ref) -> EvalCounts:
    """Tally vessel (positive) / background (negative) agreement of ``pred`` against ``ref``."""
    p = np.asarray(pred, bool)
    r = np.asarray(ref, bool)
    if p.shape != r.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {r.shape}")
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return EvalCounts(tp, fp, fn, p.size - tp - fp - fn)


def accuracy(c: EvalCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty comparison is undefined")
    return (c.TP + c.TN) / (c.TP + c.TN + c.FP + c.FN)


def dice(c: EvalCounts) -> float:
    """2TP / (2TP + FP + FN); two empty masks agree perfectly (1.0)."""
    den = 2 * c.TP + c.FP + c.FN
    if den == 0:
        return 1.0
    return 2 * c.TP / den


def dice_score(pred, ref) -> float:
    return dice(confusion(pred, ref))


def compare_raters(mask_a, mask_b):
    """(accuracy, dice) of rater A against rater B; checks both orientations agree."""
    ab = confusion(mask_a, mask_b)
    ba = confusion(mask_b, mask_a)
    acc, dsc = accuracy(ab), dice(ab)
    if acc != accuracy(ba) or dsc != dice(ba):
        raise AssertionError("rater comparison is not symmetric")
    return acc, dsc
