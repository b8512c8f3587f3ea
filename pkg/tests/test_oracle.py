import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from congest.dgp import OutcomeModel, register_outcome
from congest.oracle import (CouplingPool, OracleEvaluator, approx_optimal, caie_diagnostic, conditional_gradient,
                            exact_threshold_value, true_cade, true_value)
from congest.policy import ConstantPolicy, LoggingPolicy, ThresholdRule, TrueCade
from congest.sim import simulate
from congest.systems import SpecError, mnm1_example, parallel_example

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "oracle_fixtures.json").read_text())


class PositiveEffect(OutcomeModel):
    """Effect ``1 + |x1|`` everywhere, no control outcome."""

    def __init__(self):
        super().__init__("positive_effect", noise_sd=1.0, delay_sensitive=False)

    def outcome(self, x, queue_lengths, w, wait, service, noise):
        return np.asarray(w) * (1.0 + np.abs(np.atleast_2d(x)[:, 0])) + noise

    def conditional_mean(self, X, states, w, space):
        return np.asarray(w) * (1.0 + np.abs(np.atleast_2d(X)[:, 0]))


register_outcome(PositiveEffect())


def test_true_cade_values(mnm1, parallel):
    x = np.zeros(10)
    x[0] = 1.0
    assert true_cade(mnm1, x, 0) == pytest.approx(7.0)
    assert true_cade(mnm1, np.zeros(10), 9) == 0.0
    # non-sensitive patient, empty system: log(mu1 / mu0)
    tau = true_cade(parallel, np.zeros(10), parallel.state_space().index((0, 0)))
    assert tau == pytest.approx(np.log(2.0))
    mc = FIXTURES["parallel_tau_empty"]
    assert mc["se"] <= 0.01 and abs(tau - mc["value"]) <= 3 * mc["se"]


def test_never_treat_value(mnm1):
    ev = OracleEvaluator(mnm1, 50000, seed=1)
    val = ev.value(ConstantPolicy(0.0), "avg_outcome").value
    se = np.maximum(ev.X[:, 2], 0).std() / np.sqrt(ev.n)
    assert abs(val - 1 / np.sqrt(2 * np.pi)) <= 3 * se


def test_unused_covariates_do_not_matter(mnm1):
    X = np.random.default_rng(0).normal(size=(5000, 10))
    perm = X.copy()
    perm[:, 5:] = perm[::-1, 5:]
    pol = LoggingPolicy("mnm1_logging")
    a = OracleEvaluator(mnm1, X=X).value(pol, "reward_rate").value
    b = OracleEvaluator(mnm1, X=perm).value(pol, "reward_rate").value
    assert a == b


def test_exact_threshold_matches_monte_carlo(mnm1):
    c = np.linspace(3.0, -1.0, 21)
    pol = ThresholdRule(TrueCade(mnm1), c)
    mc = true_value(pol, mnm1, 200_000, "reward_rate", seed=3)
    assert exact_threshold_value(mnm1, c, "reward_rate") == pytest.approx(mc, rel=0.01)


def test_logging_reward_rate_matches_simulation(mnm1):
    # the logging policy's reward rate is near -1.7, where a single 1e6 run has ~1% relative noise
    theta = true_value(LoggingPolicy("mnm1_logging"), mnm1, 200_000, "reward_rate")
    sim = simulate(mnm1, None, time=1e6, seed=2).time_average_reward()
    assert sim == pytest.approx(theta, rel=0.03)


def test_optimum_without_congestion_is_all_treat():
    spec = mnm1_example(capacity=5, fixed_admission=0.6, outcome_model="positive_effect")
    opt = approx_optimal(spec, objective="avg_outcome", mc_samples=5000, budget=500, eps=1e-5)
    all_treat = true_value(ConstantPolicy(1.0), spec, 5000, "avg_outcome")
    assert np.all(opt.g_decision > 0.99)
    assert abs(opt.value - all_treat) <= 1e-3


def test_admission_optimum_beats_direct(mnm1):
    ev = OracleEvaluator(mnm1, 20000, seed=20240601)
    opt = approx_optimal(mnm1, evaluator=ev)
    direct = ev.evaluate_table((ev.tau > 0).astype(float), opt.objective).value
    rec = FIXTURES["mnm1_margin"]
    print(f"admission optimum {opt.value:.4f} vs direct {direct:.4f}")
    assert opt.value > direct
    assert opt.value == pytest.approx(rec["optimal"], abs=0.02)
    assert np.all(np.diff(opt.g_decision) <= 1e-12)


def test_optimizer_rejects_bad_arguments(mnm1):
    with pytest.raises(SpecError):
        approx_optimal(mnm1, constraint="sideways")
    with pytest.raises(SpecError):
        approx_optimal(mnm1, starts=0)


# CAIE


def test_caie_vanishes_without_transition_effect():
    spec = mnm1_example(fixed_admission=0.5)
    pol = ConstantPolicy(0.5)
    pool = CouplingPool(spec, pol, pool_size=10000)
    for s in (0, 7):
        res = caie_diagnostic(spec, pol, s, mc=500, pool=pool)
        assert res.value == 0.0 and res.recouple_rate == 1.0


def test_caie_is_covariate_free(mnm1):
    pol = ConstantPolicy(0.5)
    pool = CouplingPool(mnm1, pol)
    X = pool.evaluator.X
    for s, col in ((2, 0), (6, 1)):
        lo = caie_diagnostic(mnm1, pol, s, mc=2000, seed=1, pool=pool, first_covariates=X[X[:, col] < 0])
        hi = caie_diagnostic(mnm1, pol, s, mc=2000, seed=2, pool=pool, first_covariates=X[X[:, col] >= 0])
        assert abs(lo.value - hi.value) <= 3 * np.hypot(lo.se, hi.se)


def test_recoupling_grows_with_truncation(mnm1):
    pol = ConstantPolicy(0.5)
    pool = CouplingPool(mnm1, pol, pool_size=10000)
    rates = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for trunc in (5, 50, 5000):
            rates.append(caie_diagnostic(mnm1, pol, 10, truncation=trunc, mc=1000, seed=4, pool=pool).recouple_rate)
    assert rates[0] <= rates[1] <= rates[2] and rates[2] >= 0.99
    assert any("recoupled" in str(w.message) for w in caught)


def test_caie_rejects_blocked_state(mnm1):
    with pytest.raises(SpecError):
        caie_diagnostic(mnm1, ConstantPolicy(0.5), 20, mc=10)


def test_threshold_characterization_on_small_system():
    spec = mnm1_example(capacity=3)
    ev = OracleEvaluator(spec, 50000, seed=1)
    opt = approx_optimal(spec, constraint="none", objective="avg_outcome", evaluator=ev, budget=2000)
    pol = opt.policy
    pool = CouplingPool(spec, pol)
    X = np.random.default_rng(5).normal(size=(2000, 10))
    for s in spec.state_space().decision_states:
        c = caie_diagnostic(spec, pol, int(s), mc=20000, seed=int(s), pool=pool)
        H = conditional_gradient(spec, X, int(s), c.value)
        treat = pol.prob(X, np.full(len(X), s)) > 0.5
        sure = np.abs(H) > 3 * c.se
        assert sure.mean() > 0.5
        assert np.array_equal(H[sure] > 0, treat[sure])
