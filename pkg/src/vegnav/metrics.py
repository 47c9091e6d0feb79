"""Confusion-matrix metrics. The positive class is TR (traversable)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def swapped(self) -> "Confusion":
        """The same predictions scored with the other class as positive."""
        return Confusion(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_predictions(cls, pred_tr, true_tr) -> "Confusion":
        pred = np.asarray(pred_tr, dtype=bool)
        true = np.asarray(true_tr, dtype=bool)
        return cls(
            tp=int((pred & true).sum()),
            tn=int((~pred & ~true).sum()),
            fp=int((pred & ~true).sum()),
            fn=int((~pred & true).sum()),
        )


def mcc(c: Confusion) -> float:
    """Matthews correlation coefficient, 0 when any marginal is empty."""
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def f1(c: Confusion) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 0.0 if denom == 0 else 2 * c.tp / denom
