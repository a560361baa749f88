"""Rank vectors, the Spearman coefficient, and cheater-position statistics.

Ranks are 0-based (0 = lowest score). A participant's true quality rank is
``n - 1`` because higher ids receive less label noise. A correlation that is
undefined because a rank vector is constant is returned as NaN, never 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from qinfer.errors import DomainError

TIE_POLICIES = ("average", "min", "max", "ordinal")


def ground_truth_ranks(n_participants: int) -> np.ndarray:
    return np.arange(n_participants, dtype=np.float64)


def ranks(phi, tie_policy: str = "average") -> np.ndarray:
    """Ascending 0-based ranks; tied scores share the mean of the ranks they span."""
    phi = np.asarray(getattr(phi, "phi", phi), dtype=np.float64)
    n = phi.size
    if n < 2:
        raise DomainError(f"ranking needs at least two participants, got {n}")
    if tie_policy not in TIE_POLICIES:
        raise DomainError(f"unknown tie policy {tie_policy!r}")
    order = np.argsort(phi, kind="stable")
    out = np.empty(n)
    if tie_policy == "ordinal":
        out[order] = np.arange(n)
        return out
    ordered = phi[order]
    starts = np.concatenate(([0], np.flatnonzero(ordered[1:] != ordered[:-1]) + 1))
    ends = np.concatenate((starts[1:], [n]))
    if tie_policy == "average":
        value = (starts + ends - 1) / 2.0
    elif tie_policy == "min":
        value = starts.astype(np.float64)
    else:
        value = (ends - 1).astype(np.float64)
    out[order] = np.repeat(value, ends - starts)
    return out


def _is_permutation(q: np.ndarray) -> bool:
    return np.array_equal(np.sort(q), np.arange(q.size))


def spearman_distance(q, truth) -> np.ndarray:
    return np.abs(np.asarray(truth, dtype=np.float64) - np.asarray(q, dtype=np.float64))


def spearman_eq(q, truth) -> float:
    """``1 - 6 sum d^2 / (N (N^2 - 1))``; only meaningful for tie-free rank vectors."""
    d = spearman_distance(q, truth)
    n = d.size
    return 1.0 - 6.0 * float(np.sum(d * d)) / (n * (n * n - 1))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return math.nan
    return float(xc @ yc) / denom


def spearman(q, truth=None) -> float:
    """Rank correlation between inferred ranks ``q`` and the true ranks.

    Tie-free inputs use the closed form on the squared rank distances;
    inputs with ties fall back to the Pearson correlation of the rank
    vectors. NaN marks a constant (degenerate) rank vector.
    """
    q = np.asarray(q, dtype=np.float64)
    truth = ground_truth_ranks(q.size) if truth is None else np.asarray(truth, dtype=np.float64)
    if q.shape != truth.shape or q.ndim != 1:
        raise DomainError(f"rank vectors must be 1-D of equal length, got {q.shape} and {truth.shape}")
    if q.size < 2:
        raise DomainError("correlation needs at least two entries")
    if np.all(q == q[0]) or np.all(truth == truth[0]):
        return math.nan
    if _is_permutation(q) and _is_permutation(truth):
        return spearman_eq(q, truth)
    return pearson(q, truth)


def is_degenerate(r: float) -> bool:
    return r is None or math.isnan(r)


@dataclass(frozen=True)
class CheaterReport:
    positions: dict[int, float]
    honest_mean: float
    cheater_mean: float

    @property
    def gap(self) -> float:
        return self.honest_mean - self.cheater_mean


def cheater_metrics(phi, cheaters: Iterable[int]) -> CheaterReport:
    """Rank of each cheater (participant ids are 1-based) and both group means."""
    phi = np.asarray(getattr(phi, "phi", phi), dtype=np.float64)
    cheaters = sorted(set(int(c) for c in cheaters))
    n = phi.size
    if not cheaters:
        raise DomainError("cheater set is empty")
    if any(not 1 <= c <= n for c in cheaters):
        raise DomainError(f"cheater ids must lie in 1..{n}")
    if len(cheaters) == n:
        raise DomainError("every participant is a cheater; no honest group to compare with")
    q = ranks(phi)
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(cheaters) - 1] = True
    return CheaterReport(
        positions={c: float(q[c - 1]) for c in cheaters},
        honest_mean=float(phi[~mask].mean()),
        cheater_mean=float(phi[mask].mean()),
    )
