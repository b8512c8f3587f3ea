import dataclasses

import numpy as np
import pytest
from scipy import stats

from congest.cade import (ReferenceTable, SplitError, cade_quantile, fit_cade, full_proportions, load_model,
                          make_threshold_policy, modal_state, regeneration_split, save_model, tie_threshold,
                          type1_quantile)
from congest.policy import TrueCade
from congest.sim import ArrivalData, simulate
from congest.systems import Event, mnm1_example
from conftest import mm1


def synthetic(n, y_fn, seed=0, n_states=21):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 10))
    s = rng.integers(0, n_states, n)
    w = rng.integers(0, 2, n)
    return ArrivalData(np.arange(n), X, s, w, y_fn(X, w).astype(float))


# splitting


def test_split_chunks_on_anchor_visits():
    base = simulate(mm1(capacity=3), None, n_events=12, seed=0)
    a = np.full(12, Event.SERVICE_Q0)
    s = np.ones(12, dtype=int)
    a[[1, 5, 9]], s[[1, 5, 9]] = Event.ARRIVAL, 0
    traj = dataclasses.replace(base, a=a, s=s)
    split = regeneration_split(traj, anchor=(Event.ARRIVAL, 0), train_fraction=0.5, seed=3)
    assert split.chunks() == [(1, 4), (5, 8)]
    tr, ev = split.train_mask, split.eval_mask
    assert not np.any(tr & ev)
    for lo, hi in split.chunks():
        assert tr[lo:hi + 1].all() or ev[lo:hi + 1].all()
    assert not (tr[:1].any() or ev[:1].any() or tr[9:].any() or ev[9:].any())


def test_split_rejects_bad_fraction(mnm1_traj):
    for f in (0.0, 1.0):
        with pytest.raises(SplitError):
            regeneration_split(mnm1_traj, train_fraction=f)


def test_rare_anchor_suggests_modal_state(mnm1_traj):
    with pytest.raises(SplitError, match="modal state"):
        regeneration_split(mnm1_traj, anchor=(Event.ARRIVAL, 20))


def test_default_anchor_is_modal(mnm1_traj):
    assert regeneration_split(mnm1_traj).anchor == modal_state(mnm1_traj)


def test_chunk_lengths_are_exchangeable():
    spec = mnm1_example()
    rejections = 0
    for seed in range(50):
        traj = simulate(spec, None, time=3000.0, seed=seed)
        lengths = regeneration_split(traj, seed=seed).chunk_lengths()
        half = len(lengths) // 2
        rejections += stats.ks_2samp(lengths[:half], lengths[half:]).pvalue < 0.01
    assert rejections <= 2


# CADE fitting


def test_recovers_linear_effect(mnm1):
    data = synthetic(20000, lambda X, w: w * X[:, 0])
    model = fit_cade(data, mnm1.state_space())
    G = np.random.default_rng(1).normal(size=(2000, 10))
    G = G[np.abs(G[:, 0]) < 2]
    states = np.random.default_rng(2).integers(0, 21, len(G))
    assert np.max(np.abs(model.predict(G, states) - G[:, 0])) <= 0.1


def test_constant_outcomes_give_zero_effect(mnm1):
    data = synthetic(3000, lambda X, w: np.full(len(X), 3.0))
    model = fit_cade(data, mnm1.state_space())
    G = np.random.default_rng(1).normal(size=(500, 10))
    assert np.allclose(model.predict_table(G), 0.0, atol=1e-8)
    assert np.allclose(model.predict_arm(G, np.zeros(500, dtype=int), 1), 3.0)


def test_correlation_with_true_cade(mnm1):
    traj = simulate(mnm1, None, n_arrivals=20000, seed=3)
    model = fit_cade(traj.arrivals(), mnm1.state_space())
    G = np.random.default_rng(4).normal(size=(5000, 10))
    truth = TrueCade(mnm1)
    for k in range(6):
        ks = np.full(len(G), k)
        assert np.corrcoef(model.predict(G, ks), truth.predict(G, ks))[0, 1] > 0.8


def test_knn_pools_sparse_states(mnm1):
    data = synthetic(400, lambda X, w: w * X[:, 0], n_states=3)
    with pytest.warns(UserWarning, match="pooled"):
        model = fit_cade(data, mnm1.state_space(), "knn")
    assert model.predict_table(np.zeros((2, 10))).shape == (2, 21)


def test_auto_estimator(mnm1, parallel):
    data = synthetic(500, lambda X, w: w * X[:, 0], n_states=21)
    assert fit_cade(data, mnm1.state_space()).estimator_id == "hgb"
    pdata = synthetic(500, lambda X, w: w * X[:, 0], n_states=44)
    assert fit_cade(pdata, parallel.state_space(), n_estimators=10).estimator_id == "forest"


def test_model_roundtrip(tmp_path, mnm1):
    model = fit_cade(synthetic(1000, lambda X, w: w * X[:, 1]), mnm1.state_space())
    save_model(model, tmp_path / "m.model")
    back = load_model(tmp_path / "m.model")
    G = np.random.default_rng(0).normal(size=(50, 10))
    assert np.array_equal(back.predict_table(G), model.predict_table(G))


# quantiles and thresholds


def test_type1_quantile():
    assert type1_quantile([1, 2, 3, 4], 0.5) == 2
    assert type1_quantile([1, 2, 3, 4], 1 - 1e-9) == 4
    z = np.random.default_rng(0).normal(size=10000)
    assert type1_quantile(z, 0.975) == pytest.approx(1.96, abs=0.05)


def test_tie_threshold_jump_rule():
    assert tie_threshold(np.full(100, 1.7), 0.3) == pytest.approx((1.7, 0.3))
    c, p = tie_threshold(np.array([1.0, 2.0, 3.0, 4.0]), 0.5)
    assert (c, p) == (2.0, 0.0)


def test_threshold_treats_top_share(mnm1):
    model = TrueCade(mnm1)
    ref = np.random.default_rng(0).normal(size=(4000, 10))
    g = np.full(len(mnm1.state_space().decision_states), 0.25)
    pol = make_threshold_policy(model, g, ref, mnm1.state_space())
    table = pol.prob_table(ref)
    assert np.allclose(table[:, mnm1.state_space().decision_states].mean(axis=0), 0.25)


def test_cade_quantile_matches_reference(mnm1):
    model = TrueCade(mnm1)
    ref = np.random.default_rng(0).normal(size=(1001, 10))
    table = ReferenceTable(model, ref)
    c, _ = table.thresholds(np.full(21, 0.4))
    assert c[3] == cade_quantile(model, ref, 3, 0.6)


def test_full_proportions_expands(mnm1):
    space = mnm1.state_space()
    g = full_proportions(space, np.full(len(space.decision_states), 0.2))
    assert g.shape == (21,) and g[20] == 0.5
