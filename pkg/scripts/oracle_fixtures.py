"""Regenerate the recorded oracle fixtures in tests/fixtures/oracle_fixtures.json."""

import json
from pathlib import Path

import numpy as np

from congest.oracle import OracleEvaluator, approx_optimal
from congest.systems import mnm1_example, parallel_example

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "oracle_fixtures.json"


def margin(spec):
    ev = OracleEvaluator(spec, 20000, seed=20240601)
    opt = approx_optimal(spec, evaluator=ev)
    direct = ev.evaluate_table((ev.tau > 0).astype(float), opt.objective).value
    return {"objective": opt.objective, "optimal": opt.value, "direct": direct,
            "margin": (opt.value - direct) / abs(direct), "mu_fast": spec.service_rates[-1]}


def routing_effect_mc(n=1_000_000, seed=0):
    # non-sensitive patient at an empty system: E[-log G1] - E[-log G0], G_j ~ Exp(mu_j)
    rng = np.random.default_rng(seed)
    mu0, mu1 = parallel_example().service_rates
    diff = -np.log(rng.exponential(1 / mu1, n)) + np.log(rng.exponential(1 / mu0, n))
    return {"value": float(diff.mean()), "se": float(diff.std(ddof=1) / np.sqrt(n)), "draws": n}


def main():
    fixtures = {"mnm1_margin": margin(mnm1_example()), "parallel_margin": margin(parallel_example()),
                "parallel_tau_empty": routing_effect_mc()}
    OUT.write_text(json.dumps(fixtures, indent=2) + "\n")
    print(json.dumps(fixtures, indent=2))


if __name__ == "__main__":
    main()
