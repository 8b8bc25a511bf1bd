"""Leakage and utility metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dplab.accountant import advantage_bound

__all__ = [
    "LeakageReport",
    "MetricsError",
    "OverlapLevel",
    "OverlapReport",
    "accuracy_loss",
    "attribute_advantage",
    "mean_se",
    "membership_advantage",
    "overlap_analysis",
    "ppv",
]


class MetricsError(ValueError):
    pass


def ppv(tp: int, fp: int) -> float | None:
    """Fraction of member predictions that are true members; None when no
    record was predicted a member."""
    if tp < 0 or fp < 0:
        raise MetricsError("counts must be nonnegative")
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


@dataclass(frozen=True)
class LeakageReport:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    advantage: float
    ppv: float | None
    bound: float | None = None

    @property
    def bound_clamped(self) -> float | None:
        return None if self.bound is None else min(self.bound, 1.0)


def membership_advantage(decisions, truth, epsilon: float | None = None) -> LeakageReport:
    """Confusion counts, TPR - FPR and PPV of membership decisions.

    `bound` is ``e^epsilon - 1`` when `epsilon` is given.
    """
    d = np.asarray(decisions, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if d.shape != t.shape or d.ndim != 1:
        raise MetricsError("decisions and truth must be equal-length vectors")
    tp = int(np.sum(d & t))
    fn = int(np.sum(~d & t))
    fp = int(np.sum(d & ~t))
    tn = int(np.sum(~d & ~t))
    if tp + fn == 0 or fp + tn == 0:
        raise MetricsError("truth must contain both members and non-members")
    tpr = tp / (tp + fn)
    fpr = fp / (fp + tn)
    bound = None if epsilon is None else advantage_bound(epsilon)
    return LeakageReport(tp, fp, tn, fn, tpr, fpr, tpr - fpr, ppv(tp, fp), bound)


def accuracy_loss(acc_private: float, acc_nonprivate: float) -> float:
    """``1 - acc_private / acc_nonprivate``; negative values are kept."""
    if not acc_nonprivate > 0:
        raise MetricsError("non-private accuracy must be positive")
    return 1.0 - acc_private / acc_nonprivate


def attribute_advantage(correct_on_members: float, correct_on_nonmembers: float) -> float:
    """Gap in attribute-recovery accuracy between members and non-members."""
    for r in (correct_on_members, correct_on_nonmembers):
        if not 0.0 <= r <= 1.0:
            raise MetricsError("recovery rates must lie in [0, 1]")
    return correct_on_members - correct_on_nonmembers


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(R)); SE is nan for R < 2."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class OverlapLevel:
    min_runs: int
    predicted: int
    true_members: int
    ppv: float | None
    random_predicted: float
    random_ppv: float


@dataclass(frozen=True)
class OverlapReport:
    levels: tuple[OverlapLevel, ...]
    pairwise: np.ndarray
    pairwise_true: np.ndarray


def overlap_analysis(per_run_decisions, truth) -> OverlapReport:
    """How consistently records are flagged as members across R runs.

    Level m counts records predicted member in at least m runs and how many
    of them are true members. The random baseline is a predictor flagging
    each record independently with probability 1/2 in every run: it flags a
    ``P(Binomial(R, 1/2) >= m)`` fraction of the population with PPV equal
    to the member fraction.
    """
    runs = [np.asarray(r, dtype=bool) for r in per_run_decisions]
    t = np.asarray(truth, dtype=bool)
    if len(runs) < 2:
        raise MetricsError("overlap analysis needs at least two runs")
    if any(r.shape != t.shape for r in runs):
        raise MetricsError("every run must have one decision per record")
    stacked = np.vstack(runs)
    r_count = len(runs)
    hits = stacked.sum(axis=0)
    member_frac = float(t.mean()) if t.size else math.nan
    levels = []
    for m in range(1, r_count + 1):
        sel = hits >= m
        n_sel = int(sel.sum())
        n_true = int(np.sum(sel & t))
        tail = sum(math.comb(r_count, j) for j in range(m, r_count + 1)) / 2**r_count
        levels.append(OverlapLevel(m, n_sel, n_true, ppv(n_true, n_sel - n_true), tail * t.size, member_frac))
    as_int = stacked.astype(np.int64)
    pairwise = as_int @ as_int.T
    pairwise_true = (as_int * t) @ as_int.T
    return OverlapReport(tuple(levels), pairwise, pairwise_true)
