import json

import numpy as np
import pytest

from congest.cade import PredictorModel
from congest.learn import (EmptyCandidateSet, LearnConfig, direct_baseline, learn_policy, monotone_candidates,
                           search_coordinate, search_full, search_monotone)
from congest.policy import DirectRule
from congest.sim import simulate
from congest.systems import SpecError


def table_score(table):
    return lambda b: (table[b], 0.0)


def test_full_search_returns_argmax():
    table = {(1,): 0.2, (2,): 0.9, (3,): 0.4}
    res = search_full(table_score(table), 1, 4)
    assert res.best == (2,) and res.value == 0.9 and len(res.table) == 3


def test_ties_prefer_lexicographically_smaller():
    res = search_full(lambda b: (1.0 if b in ((1, 3), (2, 1)) else 0.0, 0.0), 2, 4)
    assert res.best == (1, 3)


def test_flagged_points_are_excluded():
    res = search_full(lambda b: (float(b[0]), 0.5 if b[0] == 3 else 0.0), 1, 4)
    assert res.best == (2,)
    assert any(r["excluded"] for r in res.table)
    with pytest.raises(EmptyCandidateSet):
        search_full(lambda b: (1.0, 1.0), 1, 4)


def separable(target):
    target = np.asarray(target)
    return lambda b: (-float(np.sum((np.asarray(b) - target) ** 2)), 0.0)


def test_coordinate_matches_full_on_separable_objective():
    score = separable([2, 5, 7])
    assert search_coordinate(score, 3, 10).best == search_full(score, 3, 10).best == (2, 5, 7)


def test_coordinate_history_is_monotone(rng):
    weights = rng.normal(size=(4, 4))

    def score(b):
        v = np.asarray(b) / 10
        return float(-v @ weights @ weights.T @ v + v.sum()), 0.0

    res = search_coordinate(score, 4, 10)
    assert np.all(np.diff(res.history) >= 0)


def test_monotone_candidates():
    cands = monotone_candidates(20, 10)
    assert len(cands) == 165
    assert all(np.all(np.diff(c) <= 0) for c in cands)
    assert all(1 <= min(c) and max(c) <= 9 for c in cands)
    res = search_monotone(separable(np.linspace(8, 2, 20).round()), 20, 10)
    assert np.all(np.diff(res.best) <= 0)


def test_config_validation():
    with pytest.raises(SpecError):
        LearnConfig(mode="random")
    with pytest.raises(SpecError):
        LearnConfig(B=1)
    with pytest.raises(SpecError):
        LearnConfig.from_dict({"bogus": 1})
    assert LearnConfig(mode="MonotoneParam").mode == "monotone"
    assert LearnConfig.from_dict(LearnConfig(B=7).to_dict()) == LearnConfig(B=7)


def test_sign_rule_extremes():
    X = np.random.default_rng(0).normal(size=(50, 10))
    assert np.all(DirectRule(PredictorModel(lambda X, s: np.abs(X[:, 0]) + 0.1, 3)).prob_table(X) == 1)
    assert np.all(DirectRule(PredictorModel(lambda X, s: -np.abs(X[:, 0]) - 0.1, 3)).prob_table(X) == 0)


def test_monotone_rejected_for_routing(parallel):
    traj = simulate(parallel, None, n_arrivals=2000, seed=0)
    with pytest.raises(SpecError, match="single-queue"):
        learn_policy(traj, LearnConfig(mode="monotone"))


def test_learn_end_to_end(tmp_path, mnm1):
    traj = simulate(mnm1, None, time=4000.0, seed=3)
    learned = learn_policy(traj, LearnConfig(seed=3))
    direct = direct_baseline(traj, LearnConfig(seed=3))
    assert learned.value >= direct.value
    assert np.all(np.diff(learned.g[mnm1.state_space().decision_states]) <= 0)
    learned.write(tmp_path / "p.json", tmp_path / "p.model")
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["policy"]["kind"] == "threshold" and d["policy"]["model"] == "p.model"


@pytest.mark.slow
def test_learned_beats_direct_at_t10000(fig3_result):
    rows = fig3_result.rows
    alg = {r["rep"]: r["value"] for r in rows if r["method"] == "algorithm1" and r["size"] == 10000}
    dire = {r["rep"]: r["value"] for r in rows if r["method"] == "direct" and r["size"] == 10000}
    wins = sum(alg[k] > dire[k] for k in alg)
    print(f"algorithm 1 beats the direct rule in {wins}/50 reps at T=10000")
    assert wins >= 45


@pytest.mark.slow
def test_direct_rule_prefers_fast_track(fig5_result):
    shares = [r["fast_share"] for r in fig5_result.rows if r["method"] == "direct" and r["size"] == 10000]
    assert np.median(shares) > 0.95
