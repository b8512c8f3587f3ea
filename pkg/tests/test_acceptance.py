"""Acceptance criteria 1-10, one test each; a summary line per criterion is printed at the end."""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import linalg

from conftest import record
from congest.chain import KernelFactory, arrival_conditioned, build_kernel, stationary_closed_form
from congest.dgp import outcome_model_for
from congest.oracle import (CouplingPool, OracleEvaluator, approx_optimal, caie_diagnostic, mnm1_threshold_exact,
                            exact_threshold_value, true_value)
from congest.ope import EvalData, ope_value, true_nuisances
from congest.policy import ConstantPolicy, DirectRule, ThresholdRule, TrueCade
from congest.sim import simulate
from congest.systems import Kind, SystemSpec, mnm1_example, parallel_example

HERE = Path(__file__).resolve().parent
FIXTURES = json.loads((HERE / "fixtures" / "oracle_fixtures.json").read_text())


def eigen_marginal(spec, pbar):
    K = build_kernel(spec, pbar)
    vals, vecs = linalg.eig(K.matrix.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = v / v.sum()
    out = np.zeros(spec.state_space().n_states)
    for (_, s), p in zip(K.states, v):
        out[s] += p
    return out


def test_c1_closed_form_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        cap = int(rng.integers(1, 21))
        if rng.random() < 0.5:
            spec = SystemSpec(kind=Kind.MNM1, arrival_rates=list(rng.uniform(0.1, 5, cap)) + [0.0],
                              service_rates=(rng.uniform(0.1, 5),), capacities=(cap,))
        else:
            spec = SystemSpec(kind=Kind.MM1_ADMISSION, arrival_rates=(rng.uniform(0.1, 5),),
                              service_rates=(rng.uniform(0.1, 5),), capacities=(cap,))
        pbar = rng.uniform(0.05, 0.95, cap + 1)
        worst = max(worst, np.max(np.abs(stationary_closed_form(spec, pbar) - eigen_marginal(spec, pbar))))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-10 and elapsed < 10, f"max |closed form - eigen solve| = {worst:.2e} over 100 specs, "
           f"{elapsed:.1f} s")


def test_c2_simulator_matches_analytics():
    spec = mnm1_example()
    d = arrival_conditioned(KernelFactory(spec).stationary(np.full(21, 0.65)))
    t0 = time.perf_counter()
    tvs = []
    for seed in range(5):
        arr = simulate(spec, None, n_events=200_000, seed=seed).arrivals(require_reward=False)
        emp = np.bincount(arr.s, minlength=21) / len(arr)
        tvs.append(0.5 * np.abs(emp - d).sum())
    elapsed = time.perf_counter() - t0
    record(2, max(tvs) <= 0.02 and elapsed < 60, f"TV distances {np.round(tvs, 4).tolist()}, {elapsed:.0f} s")


def _threshold_target(spec):
    c = np.full(spec.state_space().n_states, 2.0)
    pbar, _ = mnm1_threshold_exact(spec, c)
    return ThresholdRule(TrueCade(spec), c), pbar, exact_threshold_value(spec, c, "avg_outcome")


def test_c3_dr_error_scaling():
    spec = mnm1_example()
    target, pbar, mu = _threshold_target(spec)
    nuis = true_nuisances(spec)
    t0 = time.perf_counter()
    med = {}
    for n in (4000, 16000):
        errs = [ope_value(EvalData.from_trajectory(simulate(spec, None, n_events=n, seed=s)), target, nuis, spec,
                          None, profile=pbar).value - mu for s in range(50)]
        med[n] = float(np.median(np.abs(errs)))
    ratio = med[4000] / med[16000]
    elapsed = time.perf_counter() - t0
    record(3, 1.4 <= ratio <= 2.8 and elapsed < 300,
           f"median |error| {med[4000]:.4f} -> {med[16000]:.4f}, ratio {ratio:.2f}, {elapsed:.0f} s")


def test_c4_double_robustness():
    spec = mnm1_example()
    space = spec.state_space()
    target, pbar, mu = _threshold_target(spec)
    om = outcome_model_for(spec)
    halves = {
        "biased outcome": true_nuisances(spec, outcome=lambda X, s, w: om.conditional_mean(X, s, w, space) + 1.0),
        "constant propensity": true_nuisances(spec, propensity=lambda X, s: np.full(len(X), 0.5)),
    }
    z = {}
    for name, nuis in halves.items():
        vals = np.array([ope_value(EvalData.from_trajectory(simulate(spec, None, n_events=16000, seed=500 + s)),
                                   target, nuis, spec, None, profile=pbar).value for s in range(30)])
        z[name] = (vals.mean() - mu) / (vals.std(ddof=1) / np.sqrt(len(vals)))
    record(4, all(abs(v) <= 3 for v in z.values()),
           ", ".join(f"{k}: {v:+.2f} SE" for k, v in z.items()))


@pytest.mark.slow
def test_c5_admission_learning_curve(fig3_result):
    alg, dire = fig3_result.medians("algorithm1"), fig3_result.medians("direct")
    opt = fig3_result.optimum
    sizes = fig3_result.config.sizes
    above = all(alg[T] > dire[T] for T in sizes)
    closer = opt - alg[10000] < opt - alg[2000]
    detail = " ".join(f"T={T}: {alg[T]:.3f} vs {dire[T]:.3f};" for T in sizes)
    record(5, above and closer, f"median alg1 vs direct {detail} optimum {opt:.3f}")


@pytest.mark.slow
def test_c6_routing_learning_curve(fig5_result):
    rows = fig5_result.rows
    alg, dire = fig5_result.medians("algorithm1"), fig5_result.medians("direct")
    share = {n: float(np.median([r["fast_share"] for r in rows if r["method"] == "direct" and r["size"] == n]))
             for n in fig5_result.config.sizes}
    fallbacks = sum(r["fallback"] for r in rows if r["method"] == "algorithm1")
    ok = share[10000] > 0.95 and all(alg[n] > dire[n] for n in alg) and alg[10000] > alg[2000]
    detail = " ".join(f"n={n}: {alg[n]:.3f} vs {dire[n]:.3f} (fast share {share[n]:.3f});" for n in alg)
    record(6, ok, f"median alg1 vs direct {detail} fallbacks {fallbacks}")


def test_c7_routing_margin():
    spec = parallel_example()
    ev = OracleEvaluator(spec, 20000, seed=20240601)
    opt = approx_optimal(spec, evaluator=ev)
    direct = ev.evaluate_table((ev.tau > 0).astype(float), opt.objective).value
    margin = (opt.value - direct) / abs(direct)
    rec = FIXTURES["parallel_margin"]["margin"]
    record(7, margin >= 0.05 and abs(margin - rec) < 0.02,
           f"optimal {opt.value:.3f} vs direct {direct:.3f}: margin {margin:.1%} (recorded {rec:.1%})")


def test_c8_renewal_reward():
    spec = mnm1_example()
    model = TrueCade(spec)
    policies = {"constant 0.5": ConstantPolicy(0.5), "threshold c=2": ThresholdRule(model, np.full(21, 2.0)),
                "direct": DirectRule(model)}
    errs = {}
    for i, (name, pol) in enumerate(policies.items()):
        theta = true_value(pol, spec, 200_000, "reward_rate")
        sim = simulate(spec, pol, time=1e6, seed=40 + i).time_average_reward()
        errs[name] = abs(sim - theta) / abs(theta)
    record(8, max(errs.values()) <= 0.01, ", ".join(f"{k}: {v:.2%}" for k, v in errs.items()))


def test_c9_caie():
    spec = mnm1_example()
    pol = ConstantPolicy(0.5)
    pool = CouplingPool(spec, pol)
    X = pool.evaluator.X
    zs = []
    for s in (0, 4, 9):
        a = caie_diagnostic(spec, pol, s, mc=2000, seed=10 + s, pool=pool, first_covariates=X[X[:, 0] < 0])
        b = caie_diagnostic(spec, pol, s, mc=2000, seed=50 + s, pool=pool, first_covariates=X[X[:, 0] >= 0])
        zs.append((a.value - b.value) / np.hypot(a.se, b.se))
    fixed = mnm1_example(fixed_admission=0.5)
    fpool = CouplingPool(fixed, pol)
    zero = [caie_diagnostic(fixed, pol, s, mc=2000, seed=s, pool=fpool) for s in (0, 4, 9)]
    zero_ok = all(abs(r.value) <= 3 * r.se + 1e-12 for r in zero)
    record(9, all(abs(z) <= 3 for z in zs) and zero_ok,
           f"stratified z {np.round(zs, 2).tolist()}; no-transition-effect values "
           f"{[round(r.value, 6) for r in zero]}")


def test_c10_property_suites():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(HERE / "test_properties.py")], capture_output=True, text=True, cwd=HERE.parent)
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(10, proc.returncode == 0 and elapsed < 120, f"{tail} ({elapsed:.0f} s)")
