"""Paired-classifier significance testing and run comparison.

Two classifiers evaluated on one test set are compared through their
discordant predictions: the chi-square approximation with continuity
correction when there are enough discordant pairs, the exact binomial tail
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ConsistencyError

ALPHA = 0.05
# Smallest discordant count for which the chi-square approximation is used.
CHI2_MIN_DISCORDANT = 20


@dataclass
class ContingencyTable:
    """Counts of (A correct?, B correct?) pairs over a shared test set."""

    n00: int
    n01: int
    n10: int
    n11: int

    def __post_init__(self):
        if min(self.n00, self.n01, self.n10, self.n11) < 0:
            raise ValueError("contingency counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11


@dataclass
class McNemarResult:
    statistic: float
    p_value: float
    significant: bool
    method: str  # chi2_cc | exact_binomial

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
            "significant": self.significant,
        }


def contingency(preds_a: Sequence, preds_b: Sequence, truth: Sequence) -> ContingencyTable:
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    t = np.asarray(truth)
    if not (a.shape == b.shape == t.shape) or a.ndim != 1:
        raise ConsistencyError(
            f"prediction/truth lengths disagree: {a.shape}, {b.shape}, {t.shape}"
        )
    a_ok = a == t
    b_ok = b == t
    return ContingencyTable(
        n00=int((~a_ok & ~b_ok).sum()),
        n01=int((~a_ok & b_ok).sum()),
        n10=int((a_ok & ~b_ok).sum()),
        n11=int((a_ok & b_ok).sum()),
    )


def chi2_sf_df1(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0:
        raise ValueError(f"chi-square statistic must be non-negative, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar(table: ContingencyTable) -> McNemarResult:
    """Test whether two classifiers' error patterns differ.

    With at least CHI2_MIN_DISCORDANT discordant pairs the continuity-
    corrected chi-square statistic is used; below that, the exact two-sided
    binomial tail on min(n01, n10) with p = 1/2 (its statistic field is that
    minimum). Zero discordance means the classifiers are indistinguishable:
    statistic 0, p-value 1.
    """
    d = table.n01 + table.n10
    if d == 0:
        return McNemarResult(0.0, 1.0, False, "exact_binomial")
    if d >= CHI2_MIN_DISCORDANT:
        statistic = (abs(table.n01 - table.n10) - 1) ** 2 / d
        p = chi2_sf_df1(statistic)
        return McNemarResult(float(statistic), p, p < ALPHA, "chi2_cc")
    k = min(table.n01, table.n10)
    p = min(1.0, 2.0 * sum(math.comb(d, i) for i in range(k + 1)) / 2.0**d)
    return McNemarResult(float(k), p, p < ALPHA, "exact_binomial")


def compare_runs(
    predictions_a: Mapping[str, Sequence],
    predictions_b: Mapping[str, Sequence],
    truth: Sequence,
) -> list[dict]:
    """Per-protocol accuracy deltas (B minus A) with paired significance.

    Both runs must supply predictions for the same protocols on the same
    test set. Returns JSON-ready entries with fixed field names.
    """
    if set(predictions_a) != set(predictions_b):
        raise ConsistencyError(
            f"protocol sets differ: {sorted(predictions_a)} vs {sorted(predictions_b)}"
        )
    truth = np.asarray(truth)
    report = []
    for protocol in predictions_a:
        a = np.asarray(predictions_a[protocol])
        b = np.asarray(predictions_b[protocol])
        table = contingency(a, b, truth)
        acc_a = float((a == truth).mean())
        acc_b = float((b == truth).mean())
        report.append(
            {
                "protocol": protocol,
                "acc_a": acc_a,
                "acc_b": acc_b,
                "delta": acc_b - acc_a,
                "mcnemar": mcnemar(table).as_dict(),
            }
        )
    return report
