"""The Good, The Bad and The Ugly: score participants from round improvements.

Per round ``i`` with improvement ``omega_i``:

* Good  -- ``omega_i - omega_{i-1} > tau_good``: every member of ``S_i`` gains.
* Bad   -- ``omega_i - omega_{i-1} > tau_bad``: every member of ``S_{i-1}`` loses
  (the previous round improved less than this one).
* Ugly  -- ``omega_i < -tau_ugly``: every member of ``S_i`` loses.

Good and Bad need ``i > 1``; nothing is scored for rounds ``i <= skip``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from qinfer.errors import DomainError
from qinfer.metrics import ground_truth_ranks, ranks, spearman
from qinfer.rounds import RoundLog

RULES = ("good", "bad", "ugly")
GRID_THRESHOLDS = (0.0, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56)
GRID_SKIPS = tuple(range(11))


@dataclass(frozen=True)
class RuleConfig:
    rules: frozenset = frozenset(RULES)
    tau_good: float = 0.0
    tau_bad: float = 0.0
    tau_ugly: float = 0.0
    value_based: bool = False
    skip: int = 0

    def __post_init__(self):
        rules = frozenset(str(r).lower() for r in self.rules)
        if not rules:
            raise DomainError("at least one scoring rule must be enabled")
        unknown = rules - set(RULES)
        if unknown:
            raise DomainError(f"unknown scoring rules {sorted(unknown)}")
        object.__setattr__(self, "rules", rules)
        for name in ("tau_good", "tau_bad", "tau_ugly"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be non-negative")
        if self.skip < 0:
            raise DomainError("skip must be non-negative")

    def sort_key(self) -> tuple:
        return (
            tuple(r for r in RULES if r in self.rules),
            self.tau_good,
            self.tau_bad,
            self.tau_ugly,
            self.value_based,
            self.skip,
        )

    def as_dict(self) -> dict:
        return {
            "rules": [r for r in RULES if r in self.rules],
            "tau_good": self.tau_good,
            "tau_bad": self.tau_bad,
            "tau_ugly": self.tau_ugly,
            "value_based": self.value_based,
            "skip": self.skip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RuleConfig:
        return cls(
            rules=frozenset(d.get("rules", RULES)),
            tau_good=float(d.get("tau_good", 0.0)),
            tau_bad=float(d.get("tau_bad", 0.0)),
            tau_ugly=float(d.get("tau_ugly", 0.0)),
            value_based=bool(d.get("value_based", False)),
            skip=int(d.get("skip", 0)),
        )


DEFAULT_RULES = RuleConfig()


@dataclass(frozen=True)
class RuleEvents:
    """Which rules fired in one round, for whom, and with what magnitude."""

    good: tuple[int, ...] = ()
    bad: tuple[int, ...] = ()
    ugly: tuple[int, ...] = ()
    good_delta: float = 0.0
    bad_delta: float = 0.0
    ugly_delta: float = 0.0

    @property
    def rewarded(self) -> list[int]:
        return list(self.good)

    @property
    def punished(self) -> list[int]:
        return list(self.bad) + list(self.ugly)


def rule_events(
    i: int,
    omega: float,
    omega_prev: float | None,
    selected: Sequence[int],
    selected_prev: Sequence[int] | None,
    cfg: RuleConfig = DEFAULT_RULES,
) -> RuleEvents:
    if i < 1:
        raise DomainError(f"rounds are numbered from 1, got {i}")
    if i <= cfg.skip:
        return RuleEvents()
    out = {}
    if i > 1:
        if omega_prev is None or selected_prev is None:
            raise DomainError(f"round {i} needs the previous round's improvement and selection")
        diff = omega - omega_prev
        delta = abs(diff) if cfg.value_based else 1.0
        if "good" in cfg.rules and diff > cfg.tau_good:
            out.update(good=tuple(selected), good_delta=delta)
        if "bad" in cfg.rules and diff > cfg.tau_bad:
            out.update(bad=tuple(selected_prev), bad_delta=delta)
    if "ugly" in cfg.rules and omega < -cfg.tau_ugly:
        out.update(ugly=tuple(selected), ugly_delta=abs(omega) if cfg.value_based else 1.0)
    return RuleEvents(**out)


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Accumulated score per participant (index ``n - 1`` holds participant ``n``)."""

    phi: np.ndarray
    round: int = 0

    @classmethod
    def zeros(cls, n_participants: int) -> ScoreVector:
        return cls(np.zeros(n_participants), 0)

    def __len__(self) -> int:
        return len(self.phi)


def apply_events(phi: ScoreVector, i: int, events: RuleEvents) -> ScoreVector:
    new = phi.phi.copy()
    for n in events.good:
        new[n - 1] += events.good_delta
    for n in events.bad:
        new[n - 1] -= events.bad_delta
    for n in events.ugly:
        new[n - 1] -= events.ugly_delta
    return ScoreVector(new, i)


def score_round(
    phi: ScoreVector,
    i: int,
    omega: float,
    omega_prev: float | None,
    selected: Sequence[int],
    selected_prev: Sequence[int] | None,
    cfg: RuleConfig = DEFAULT_RULES,
) -> ScoreVector:
    events = rule_events(i, omega, omega_prev, selected, selected_prev, cfg)
    return apply_events(phi, i, events)


def score_trajectory(
    logs: Sequence[RoundLog], n_participants: int, cfg: RuleConfig = DEFAULT_RULES
) -> list[ScoreVector]:
    """Scores after each round of ``logs`` (same length as ``logs``)."""
    phi = ScoreVector.zeros(n_participants)
    out, prev = [], None
    for log in logs:
        phi = score_round(
            phi,
            log.index,
            log.omega,
            None if prev is None else prev.omega,
            log.selected,
            None if prev is None else prev.selected,
            cfg,
        )
        out.append(phi)
        prev = log
    return out


def final_scores(logs: Sequence[RoundLog], n_participants: int, cfg: RuleConfig = DEFAULT_RULES) -> np.ndarray:
    """Vectorised replay giving the same totals as iterating :func:`score_round`."""
    if not logs:
        return np.zeros(n_participants)
    omega = np.array([log.omega for log in logs])
    index = np.array([log.index for log in logs])
    member = np.zeros((len(logs), n_participants))
    for row, log in enumerate(logs):
        member[row, np.asarray(log.selected) - 1] = 1.0
    active = index > cfg.skip
    diff = np.zeros_like(omega)
    diff[1:] = omega[1:] - omega[:-1]
    paired = active & (index > 1)
    paired[0] = False
    step = np.abs(diff) if cfg.value_based else np.ones_like(diff)
    weights_now = np.zeros_like(omega)
    weights_prev = np.zeros_like(omega)
    if "good" in cfg.rules:
        weights_now += np.where(paired & (diff > cfg.tau_good), step, 0.0)
    if "bad" in cfg.rules:
        weights_prev[:-1] -= np.where(paired & (diff > cfg.tau_bad), step, 0.0)[1:]
    if "ugly" in cfg.rules:
        hit = active & (omega < -cfg.tau_ugly)
        weights_now -= np.where(hit, np.abs(omega) if cfg.value_based else 1.0, 0.0)
    return member.T @ (weights_now + weights_prev)


@dataclass(frozen=True)
class Grid:
    """Search space for rule fine-tuning.

    Thresholds are shared by all rules unless ``tie_thresholds`` is false, in
    which case every (good, bad, ugly) triple is tried. ``explicit`` replaces
    the product with a fixed list of configurations.
    """

    rule_sets: tuple = tuple(
        frozenset(c) for k in range(1, 4) for c in itertools.combinations(RULES, k)
    )
    thresholds: tuple = GRID_THRESHOLDS
    value_based: tuple = (False, True)
    skips: tuple = GRID_SKIPS
    tie_thresholds: bool = True
    explicit: tuple = ()

    @classmethod
    def singleton(cls, cfg: RuleConfig = DEFAULT_RULES) -> Grid:
        return cls(explicit=(cfg,))

    def configs(self, rounds: int | None = None) -> Iterable[RuleConfig]:
        if self.explicit:
            candidates = iter(self.explicit)
        else:
            if self.tie_thresholds:
                taus = [(t, t, t) for t in self.thresholds]
            else:
                taus = list(itertools.product(self.thresholds, repeat=3))
            candidates = (
                RuleConfig(rules, tg, tb, tu, vb, k)
                for rules, (tg, tb, tu), vb, k in itertools.product(
                    self.rule_sets, taus, self.value_based, self.skips
                )
            )
        for cfg in candidates:
            if rounds is None or cfg.skip < rounds:
                yield cfg


@dataclass
class GridResult:
    best: RuleConfig
    best_score: float
    default_score: float | None
    table: list[tuple[RuleConfig, float]] = field(default_factory=list)


def mean_coefficient(
    folds: Sequence[Sequence[RoundLog]], n_participants: int, cfg: RuleConfig, truth=None
) -> float:
    """Fold-mean Spearman coefficient of the final scores; a degenerate fold counts as 0."""
    truth = ground_truth_ranks(n_participants) if truth is None else truth
    total = 0.0
    for logs in folds:
        r = spearman(ranks(final_scores(logs, n_participants, cfg)), truth)
        total += 0.0 if math.isnan(r) else r
    return total / len(folds)


def run_grid_search(
    folds: Sequence[Sequence[RoundLog]], n_participants: int, grid: Grid | None = None, truth=None
) -> GridResult:
    """Replay stored round logs under every grid configuration and keep the best.

    Ties on the mean coefficient go to the configuration with the smaller
    :meth:`RuleConfig.sort_key`.
    """
    if not folds or any(len(logs) == 0 for logs in folds):
        raise DomainError("grid search needs non-empty round logs for every fold")
    grid = Grid() if grid is None else grid
    rounds = min(len(logs) for logs in folds)
    table = [(cfg, mean_coefficient(folds, n_participants, cfg, truth)) for cfg in grid.configs(rounds)]
    if not table:
        raise DomainError("grid contains no configuration valid for these logs")
    best, best_score = min(table, key=lambda item: (-item[1], item[0].sort_key()))
    default = next((s for c, s in table if c == DEFAULT_RULES), None)
    return GridResult(best, best_score, default, table)
