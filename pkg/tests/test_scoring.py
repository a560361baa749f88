import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qinfer import scoring
from qinfer.errors import DomainError
from qinfer.rounds import RoundLog
from qinfer.scoring import DEFAULT_RULES, Grid, RuleConfig, ScoreVector, score_round

# Hand-traced golden log, N = 5 (see test_golden_trace for the per-round reasoning).
GOLDEN = [
    RoundLog(1, (1, 2), 0.50, 0.50),
    RoundLog(2, (3, 4), 0.60, 0.60),
    RoundLog(3, (2, 5), 0.30, 0.30),
    RoundLog(4, (1, 3), -0.05, -0.05),
    RoundLog(5, (4, 5), 0.02, 0.02),
]
GOLDEN_TRACE = [
    [0, 0, 0, 0, 0],
    [-1, -1, 1, 1, 0],  # 0.6 > 0.5: Good for {3,4}, Bad for {1,2}
    [-1, -1, 1, 1, 0],  # 0.3 < 0.6: nothing
    [-2, -1, 0, 1, 0],  # -0.05 < 0: Ugly for {1,3}
    [-3, -1, -1, 2, 1],  # 0.02 > -0.05: Good for {4,5}, Bad for {1,3}
]


def test_two_round_example():
    phi = ScoreVector.zeros(4)
    phi = score_round(phi, 1, 0.5, None, (1, 2), None)
    phi = score_round(phi, 2, 0.6, 0.5, (3, 4), (1, 2))
    assert phi.phi.tolist() == [-1, -1, 1, 1]
    assert phi.round == 2


def test_two_round_example_value_based():
    cfg = RuleConfig(value_based=True)
    phi = ScoreVector.zeros(4)
    phi = score_round(phi, 1, 0.5, None, (1, 2), None, cfg)
    phi = score_round(phi, 2, 0.6, 0.5, (3, 4), (1, 2), cfg)
    np.testing.assert_allclose(phi.phi, [-0.1, -0.1, 0.1, 0.1], atol=1e-15)


def test_ugly_fires_on_negative_improvement():
    phi = score_round(ScoreVector.zeros(3), 1, -0.01, None, (2,), None)
    assert phi.phi.tolist() == [0, -1, 0]


def test_golden_trace():
    traj = scoring.score_trajectory(GOLDEN, 5)
    assert [t.phi.tolist() for t in traj] == GOLDEN_TRACE


def test_golden_trace_value_based():
    traj = scoring.score_trajectory(GOLDEN, 5, RuleConfig(value_based=True))
    np.testing.assert_allclose(traj[-1].phi, [-0.22, -0.1, -0.02, 0.17, 0.07], atol=1e-12)


def test_first_round_only_ugly():
    phi = score_round(ScoreVector.zeros(3), 1, 0.9, None, (1, 2), None)
    assert phi.phi.tolist() == [0, 0, 0]


def test_later_round_needs_history():
    with pytest.raises(DomainError):
        score_round(ScoreVector.zeros(3), 2, 0.1, None, (1,), None)


@pytest.mark.parametrize(
    "prev, cur, good, ugly",
    [
        (-0.2, -0.1, True, True),  # prev < cur < 0: both fire
        (-0.1, -0.2, False, True),
        (0.1, -0.1, False, True),
        (-0.1, 0.1, True, False),
        (0.1, 0.2, True, False),
        (-0.1, -0.1, False, True),
        (0.0, 0.0, False, False),
    ],
)
def test_good_and_ugly_gate(prev, cur, good, ugly):
    ev = scoring.rule_events(2, cur, prev, (1,), (2,))
    assert bool(ev.good) is good
    assert bool(ev.ugly) is ugly
    assert (bool(ev.good) and bool(ev.ugly)) == (prev < cur < 0)


def test_per_round_changes_bounded_by_one_per_rule():
    g = np.random.default_rng(0)
    logs = random_logs(g, 6, 3, 200)
    traj = scoring.score_trajectory(logs, 6)
    prev = np.zeros(6)
    for t in traj:
        assert np.all(np.abs(t.phi - prev) <= 3)
        prev = t.phi
    assert np.all(np.abs(traj[-1].phi) <= 3 * len(logs))


def test_thresholds():
    cfg = RuleConfig(tau_good=0.05, tau_bad=0.2, tau_ugly=0.03)
    ev = scoring.rule_events(2, 0.1, 0.0, (1,), (2,), cfg)
    assert ev.good == (1,) and ev.bad == ()
    ev = scoring.rule_events(2, -0.02, 0.5, (1,), (2,), cfg)
    assert ev.ugly == ()
    ev = scoring.rule_events(2, -0.04, 0.5, (1,), (2,), cfg)
    assert ev.ugly == (1,)


def test_round_skipping():
    cfg = RuleConfig(skip=3)
    traj = scoring.score_trajectory(GOLDEN, 5, cfg)
    assert traj[2].phi.tolist() == [0] * 5
    # round 4 is scored with round 3 as context: Ugly for {1,3}
    assert traj[3].phi.tolist() == [-1, 0, -1, 0, 0]
    assert traj[4].phi.tolist() == [-2, 0, -2, 1, 1]


def test_rule_subset():
    good_only = RuleConfig(rules=frozenset({"good"}))
    assert scoring.score_trajectory(GOLDEN, 5, good_only)[-1].phi.tolist() == [0, 0, 1, 2, 1]


@pytest.mark.parametrize("bad", [dict(rules=frozenset()), dict(rules={"nice"}), dict(tau_good=-1.0), dict(skip=-1)])
def test_rule_config_validation(bad):
    with pytest.raises(DomainError):
        RuleConfig(**bad)


def random_logs(g, n, b, rounds):
    logs = []
    for i in range(1, rounds + 1):
        sel = tuple(sorted((g.choice(n, b, replace=False) + 1).tolist()))
        w = float(g.normal(0.01, 0.05))
        logs.append(RoundLog(i, sel, 0.5, w))
    return logs


ALL_CONFIGS = [
    RuleConfig(rules, t, t, t, vb, k)
    for rules in Grid().rule_sets
    for t in (0.0, 0.02)
    for vb in (False, True)
    for k in (0, 3)
]


@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_CONFIGS))
@settings(max_examples=80, deadline=None)
def test_vectorised_replay_matches_iteration(seed, cfg):
    g = np.random.default_rng(seed)
    logs = random_logs(g, 7, 3, 40)
    iterative = scoring.score_trajectory(logs, 7, cfg)[-1].phi
    np.testing.assert_allclose(scoring.final_scores(logs, 7, cfg), iterative, atol=1e-12)


def test_replay_independent_of_fold_order():
    g = np.random.default_rng(5)
    folds = [random_logs(g, 5, 2, 30) for _ in range(4)]
    a = scoring.mean_coefficient(folds, 5, DEFAULT_RULES)
    b = scoring.mean_coefficient(folds[::-1], 5, DEFAULT_RULES)
    assert a == pytest.approx(b, abs=1e-15)


def test_grid_singleton_returns_default():
    g = np.random.default_rng(1)
    folds = [random_logs(g, 5, 2, 20)]
    result = scoring.run_grid_search(folds, 5, Grid.singleton())
    assert result.best == DEFAULT_RULES
    assert len(result.table) == 1


def test_ugly_only_never_fires_on_increasing_positive_log():
    logs = [RoundLog(i, ((i % 5) + 1,), 0.1 * i, 0.01 * i) for i in range(1, 21)]
    ugly = RuleConfig(rules=frozenset({"ugly"}))
    assert scoring.final_scores(logs, 5, ugly).tolist() == [0.0] * 5
    assert scoring.mean_coefficient([logs], 5, ugly) == 0.0


def test_grid_best_dominates_default():
    g = np.random.default_rng(2)
    folds = [random_logs(g, 5, 2, 40) for _ in range(3)]
    grid = Grid(skips=(0, 1, 2), thresholds=(0.0, 0.01, 0.04))
    result = scoring.run_grid_search(folds, 5, grid)
    assert result.default_score is not None
    assert result.best_score >= result.default_score
    assert result.best_score == max(s for _, s in result.table)


def test_grid_ties_go_to_smaller_config():
    # a log with no signal at all: every config scores 0, so the smallest key wins
    logs = [RoundLog(i, (1,), 0.5, 0.0) for i in range(1, 6)]
    result = scoring.run_grid_search([logs], 3, Grid(skips=(0, 1), thresholds=(0.0, 0.5)))
    assert result.best == min((c for c, _ in result.table), key=RuleConfig.sort_key)


def test_default_grid_size():
    configs = list(Grid().configs(rounds=100))
    assert len(configs) == 7 * 10 * 2 * 11
    assert len(set(configs)) == len(configs)
    untied = Grid(tie_thresholds=False, rule_sets=(frozenset(scoring.RULES),), value_based=(False,), skips=(0,))
    assert len(list(untied.configs())) == 1000


def test_grid_drops_skips_beyond_log_length():
    assert all(c.skip < 5 for c in Grid().configs(rounds=5))


def test_grid_rejects_empty_logs():
    with pytest.raises(DomainError):
        scoring.run_grid_search([], 5)
    with pytest.raises(DomainError):
        scoring.run_grid_search([[]], 5)


def test_rule_config_dict_roundtrip():
    cfg = RuleConfig(frozenset({"bad", "ugly"}), 0.1, 0.2, 0.3, True, 4)
    assert RuleConfig.from_dict(cfg.as_dict()) == cfg


def test_sort_key_orders_rules_canonically():
    keys = sorted(RuleConfig(frozenset(c)).sort_key() for k in (1, 2) for c in itertools.combinations(scoring.RULES, k))
    assert keys[0][0] == ("bad",)
