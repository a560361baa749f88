"""Federated averaging rounds behind a secure-aggregation boundary.

Each round selects ``b`` of ``N`` participants uniformly, lets them train
locally from the current model, and hands the server only the average of
their models. Participants may misbehave (sign-flipped or zero update), and
the server may scale the aggregated step by multiplicative weights earned
through the scoring rules.

The only route out of a round for individual updates is an explicit
``tap`` callback, used by the leave-one-out baseline.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from qinfer import model as engine
from qinfer.data import Shard
from qinfer.errors import DomainError
from qinfer.model import ModelParams, TrainSettings
from qinfer.rounds import RoundLog
from qinfer.scoring import DEFAULT_RULES, RuleConfig, RuleEvents, rule_events

log = logging.getLogger(__name__)

# Stream tags keep the seeded RNGs of unrelated purposes independent.
STREAM_SELECT = 1
STREAM_TRAIN = 2
STREAM_MASK = 3


class Behaviour(str, enum.Enum):
    HONEST = "honest"
    ATTACKER = "attacker"
    FREERIDER = "freerider"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(int, key)]))


def select_participants(n_participants: int, b: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample of ``b`` distinct ids from ``1..N``, sorted."""
    if not 1 <= b <= n_participants:
        raise DomainError(f"cannot select {b} of {n_participants} participants")
    chosen = rng.choice(n_participants, size=b, replace=False) + 1
    return tuple(sorted(int(n) for n in chosen))


def apply_behaviour(update: ModelParams, previous: ModelParams, behaviour: Behaviour | str) -> ModelParams:
    behaviour = Behaviour(behaviour)
    previous._check(update)
    if behaviour is Behaviour.HONEST:
        return update
    if behaviour is Behaviour.FREERIDER:
        return previous
    return previous - (update - previous)


def boost_scale(weights: np.ndarray, selected: Sequence[int]) -> float:
    """Mean weight of the selected participants."""
    if len(selected) == 0:
        raise DomainError("no participants selected")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise DomainError("boosting weights must be positive")
    return float(np.mean(w[np.asarray(selected) - 1]))


def update_boost_weights(weights: np.ndarray, events: RuleEvents, kappa: float) -> np.ndarray:
    """Multiply rewarded weights by ``1 + kappa`` and punished ones by ``1 - kappa``."""
    if not 0 <= kappa < 1:
        raise DomainError(f"kappa must lie in [0, 1), got {kappa}")
    out = np.array(weights, dtype=np.float64)
    if kappa == 0:
        return out
    for n in events.rewarded:
        out[n - 1] *= 1.0 + kappa
    for n in events.punished:
        out[n - 1] *= 1.0 - kappa
    return out


def pairwise_mask_demo(
    updates: Sequence[ModelParams], seed: int, scale: float = 1.0
) -> list[ModelParams]:
    """Add cancelling pairwise noise: pair ``(m, n)``, ``m < n``, adds ``r`` to m and subtracts it from n.

    Every pair draws its own vector from ``(seed, m, n)``; the sum of the
    masked updates equals the sum of the originals up to rounding.
    """
    if len(updates) < 2:
        return list(updates)
    first = updates[0]
    for u in updates[1:]:
        first._check(u)
    masked = [u.flat.copy() for u in updates]
    for m in range(len(updates)):
        for n in range(m + 1, len(updates)):
            r = stream(seed, STREAM_MASK, m, n).normal(0.0, scale, size=first.flat.size)
            masked[m] += r
            masked[n] -= r
    return [ModelParams(first.arch, flat) for flat in masked]


def secure_aggregate(updates: Sequence[ModelParams], mask_seed: int | None = None) -> ModelParams:
    """The single aggregate the server observes."""
    if mask_seed is not None:
        updates = pairwise_mask_demo(updates, mask_seed)
    return engine.average_params(updates)


@dataclass(frozen=True)
class PrivilegedRound:
    """Individual updates of one round; only ever handed to an explicit tap."""

    index: int
    selected: tuple[int, ...]
    previous: ModelParams
    updates: Mapping[int, ModelParams]


@dataclass(frozen=True, eq=False)
class FederationState:
    model: ModelParams
    shards: tuple[Shard, ...]
    test_shard: Shard
    b: int
    seed: int
    settings: TrainSettings = TrainSettings()
    behaviours: Mapping[int, Behaviour] = field(default_factory=dict)
    kappa: float = 0.0
    rules: RuleConfig = DEFAULT_RULES
    weights: np.ndarray | None = None
    baseline_accuracy: float = 0.0
    history: tuple[RoundLog, ...] = ()
    mask_seed: int | None = None

    def __post_init__(self):
        n = len(self.shards)
        if not 1 <= self.b <= n:
            raise DomainError(f"cannot select {self.b} of {n} participants")
        behaviours = {k: Behaviour.HONEST for k in range(1, n + 1)}
        for k, v in dict(self.behaviours).items():
            if not 1 <= int(k) <= n:
                raise DomainError(f"behaviour given for unknown participant {k}")
            behaviours[int(k)] = Behaviour(v)
        object.__setattr__(self, "behaviours", behaviours)
        weights = np.ones(n) if self.weights is None else np.array(self.weights, dtype=np.float64)
        if weights.shape != (n,) or np.any(weights <= 0):
            raise DomainError("need one positive weight per participant")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        if not 0 <= self.kappa < 1:
            raise DomainError(f"kappa must lie in [0, 1), got {self.kappa}")

    @property
    def n_participants(self) -> int:
        return len(self.shards)

    @property
    def round_index(self) -> int:
        return len(self.history)

    @property
    def accuracy(self) -> float:
        return self.history[-1].accuracy if self.history else self.baseline_accuracy


def init_federation(
    model: ModelParams,
    shards: Sequence[Shard],
    test_shard: Shard,
    b: int,
    seed: int,
    **kwargs,
) -> FederationState:
    """Fresh state with the round-0 accuracy measured on the test shard."""
    baseline = engine.accuracy(model, test_shard)
    return FederationState(model, tuple(shards), test_shard, b, seed, baseline_accuracy=baseline, **kwargs)


def local_update(state: FederationState, i: int, n: int) -> ModelParams:
    behaviour = state.behaviours[n]
    if behaviour is Behaviour.FREERIDER:
        return state.model
    settings = replace(state.settings, seed=int(stream(state.seed, STREAM_TRAIN, i, n).integers(2**63)))
    trained = engine.local_train(state.model, state.shards[n - 1], settings)
    return apply_behaviour(trained, state.model, behaviour)


def run_round(
    state: FederationState, tap: Callable[[PrivilegedRound], None] | None = None
) -> tuple[FederationState, RoundLog]:
    i = state.round_index + 1
    selected = select_participants(state.n_participants, state.b, stream(state.seed, STREAM_SELECT, i))
    updates = {n: local_update(state, i, n) for n in selected}
    aggregate = secure_aggregate(
        list(updates.values()), None if state.mask_seed is None else state.mask_seed + i
    )
    scale = boost_scale(state.weights, selected)
    if scale == 1.0:
        new_model = aggregate
    else:
        new_model = state.model + scale * (aggregate - state.model)
    acc = engine.accuracy(new_model, state.test_shard)
    entry = RoundLog(i, selected, acc, acc - state.accuracy)
    if tap is not None:
        tap(PrivilegedRound(i, selected, state.model, updates))

    weights = state.weights
    if state.kappa > 0:
        prev = state.history[-1] if state.history else None
        events = rule_events(
            i,
            entry.omega,
            None if prev is None else prev.omega,
            selected,
            None if prev is None else prev.selected,
            state.rules,
        )
        weights = update_boost_weights(weights, events, state.kappa)
    log.debug("round %d selected=%s acc=%.4f omega=%+.4f scale=%.4f", i, selected, acc, entry.omega, scale)
    new_state = replace(state, model=new_model, weights=weights, history=state.history + (entry,))
    return new_state, entry


def run_rounds(
    state: FederationState, rounds: int, tap: Callable[[PrivilegedRound], None] | None = None,
    on_round: Callable[[FederationState, RoundLog], None] | None = None,
) -> FederationState:
    for _ in range(rounds):
        state, entry = run_round(state, tap)
        if on_round is not None:
            on_round(state, entry)
    return state
