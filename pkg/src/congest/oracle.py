"""Ground-truth evaluation under known dynamics.

Policy values combine Monte Carlo over fresh covariates (for the mean policy
profile and the per-state mean outcomes) with the analytic stationary law.
Threshold policies built on the true CADE have a fast path through sorted CADE
samples, which is what the constrained optimizer uses.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, stats
from sklearn.isotonic import IsotonicRegression

from .cade import tie_threshold
from .chain import KernelFactory, StationaryDist, arrival_conditioned
from .dgp import outcome_model_for, sample_covariates
from .policy import Policy, ThresholdRule, TrueCade
from .systems import Event, Kind, SpecError, SystemSpec

log = logging.getLogger(__name__)

ORDERINGS = ("nonincreasing", "nondecreasing", "none")
OBJECTIVES = ("avg_outcome", "reward_rate")


def default_objective(spec: SystemSpec) -> str:
    return "reward_rate" if spec.kind is Kind.MNM1 else "avg_outcome"


def default_ordering(spec: SystemSpec) -> str:
    return "nonincreasing" if spec.single_queue else "none"


def true_cade(spec: SystemSpec, x, s: int) -> float:
    """CADE of the built-in outcome model at one covariate vector and flat state."""
    space = spec.state_space()
    if not 0 <= s < space.n_states:
        raise SpecError(f"state {s} outside 0..{space.n_states - 1}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return float(outcome_model_for(spec).cade(x, np.array([s]), space)[0])


@dataclass
class OracleValue:
    value: float
    mu: float
    theta: float
    pbar: np.ndarray
    r: np.ndarray
    d: StationaryDist = field(repr=False)

    @property
    def arrival_dist(self) -> np.ndarray:
        return arrival_conditioned(self.d)


class OracleEvaluator:
    """Monte Carlo tables of the true outcome regression over a fixed covariate sample."""

    def __init__(self, spec: SystemSpec, mc_samples: int = 20000, seed: int = 20240601, X: np.ndarray | None = None):
        self.spec = spec
        self.space = spec.state_space()
        self.factory = KernelFactory(spec)
        rng = np.random.default_rng(seed)
        self.X = sample_covariates(rng, mc_samples, spec.covariate_dim) if X is None else np.atleast_2d(X)
        model = outcome_model_for(spec)
        n, ns = len(self.X), self.space.n_states
        self.base = np.empty((n, ns))
        self.tau = np.empty((n, ns))
        for s in range(ns):
            st = np.full(n, s)
            m0 = model.conditional_mean(self.X, st, 0, self.space)
            self.base[:, s] = m0
            self.tau[:, s] = model.conditional_mean(self.X, st, 1, self.space) - m0
        self.base_mean = self.base.mean(axis=0)
        self.sorted_tau = np.sort(self.tau, axis=0)
        # suffix sums: tail[j, s] = sum of sorted_tau[j:, s]
        self.tail = np.vstack([np.cumsum(self.sorted_tau[::-1], axis=0)[::-1], np.zeros((1, ns))])
        self.model = TrueCade(spec)

    @property
    def n(self) -> int:
        return len(self.X)

    def combine(self, pbar, r, objective: str) -> OracleValue:
        if objective not in OBJECTIVES:
            raise SpecError(f"unknown objective {objective!r}")
        d = self.factory.stationary(pbar, check=False)
        arr_mass = d.arrival_mass()
        mu = float(arr_mass @ r / arr_mass.sum())
        theta = float(arr_mass @ r / d.expected_gap())
        return OracleValue(mu if objective == "avg_outcome" else theta, mu, theta, np.asarray(pbar), r, d)

    def evaluate_table(self, P: np.ndarray, objective: str) -> OracleValue:
        """Value of a policy given its probability table on the evaluator's covariates."""
        if P.shape != self.tau.shape:
            raise SpecError(f"probability table has shape {P.shape}, expected {self.tau.shape}")
        pbar = P.mean(axis=0)
        r = self.base_mean + (P * self.tau).mean(axis=0)
        return self.combine(pbar, r, objective)

    def value(self, policy: Policy, objective: str = "avg_outcome") -> OracleValue:
        policy.check_space(self.space)
        return self.evaluate_table(policy.prob_table(self.X, self.space.n_states), objective)

    def threshold_parts(self, g) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(c, p, pbar, r)`` of the true-CADE threshold policy treating a ``g_s`` share."""
        g = np.asarray(g, dtype=float)
        ns = self.space.n_states
        c, p, pbar, r = (np.empty(ns) for _ in range(4))
        n = self.n
        for s in range(ns):
            col = self.sorted_tau[:, s]
            c[s], p[s] = tie_threshold(col, float(g[s]))
            lo = np.searchsorted(col, c[s], side="left")
            hi = np.searchsorted(col, c[s], side="right")
            n_eq = hi - lo
            pbar[s] = ((n - hi) + p[s] * n_eq) / n
            r[s] = self.base_mean[s] + (self.tail[hi, s] + p[s] * c[s] * n_eq) / n
        return c, p, pbar, r

    def threshold_value(self, g, objective: str = "avg_outcome") -> OracleValue:
        _, _, pbar, r = self.threshold_parts(g)
        return self.combine(pbar, r, objective)

    def threshold_policy(self, g) -> ThresholdRule:
        c, p, _, _ = self.threshold_parts(g)
        return ThresholdRule(self.model, c, p, proportions=np.asarray(g, dtype=float))

    def direct_proportions(self) -> np.ndarray:
        return (self.tau > 0).mean(axis=0)


def true_value(policy: Policy, spec: SystemSpec, mc_samples: int = 20000, objective: str = "avg_outcome",
               seed: int = 20240601) -> float:
    return OracleEvaluator(spec, mc_samples, seed).value(policy, objective).value


# exact values for the M_n/M/1 example-------------------------------------------------

def _halfnormal_expect(f) -> float:
    val, _ = integrate.quad(lambda u: 2.0 * f(u) * stats.norm.pdf(u), 0.0, np.inf, limit=200, epsabs=1e-13)
    return val


def mnm1_threshold_exact(spec: SystemSpec, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``(pbar, r)`` of the rule ``1{tau > c_k}`` on the M_n/M/1 example.

    With ``tau = a|x1| + 3 x2`` and ``a = 7 - k``, conditioning on ``x1`` leaves a
    normal tail: ``P(tau > c | x1) = 1 - Phi(t)`` and ``E[tau 1{tau > c} | x1] =
    a|x1| (1 - Phi(t)) + 3 phi(t)`` with ``t = (c - a|x1|) / 3``.
    """
    if spec.outcome_model != "mnm1_example":
        raise SpecError("exact threshold values are available for the mnm1_example outcome only")
    space = spec.state_space()
    c = np.broadcast_to(np.asarray(thresholds, dtype=float), (space.n_states,))
    base = 1.0 / np.sqrt(2.0 * np.pi)
    pbar, r = np.empty(space.n_states), np.empty(space.n_states)
    for k in range(space.n_states):
        a = 7.0 - k

        def t(u):
            return (c[k] - a * u) / 3.0

        pbar[k] = _halfnormal_expect(lambda u: stats.norm.sf(t(u)))
        r[k] = base + _halfnormal_expect(lambda u: a * u * stats.norm.sf(t(u)) + 3.0 * stats.norm.pdf(t(u)))
    return pbar, r


def exact_threshold_value(spec: SystemSpec, thresholds, objective: str = "avg_outcome") -> float:
    pbar, r = mnm1_threshold_exact(spec, thresholds)
    d = KernelFactory(spec).stationary(pbar)
    mass = d.arrival_mass()
    return float(mass @ r / (mass.sum() if objective == "avg_outcome" else d.expected_gap()))


# approximate optimum--------------------------------------------------------------------

def project_ordering(x: np.ndarray, ordering: str, lo: float, hi: float) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), lo, hi)
    if ordering == "none" or len(x) < 2:
        return x
    iso = IsotonicRegression(increasing=(ordering == "nondecreasing"), y_min=lo, y_max=hi)
    return iso.fit_transform(np.arange(len(x)), x)


@dataclass
class OptimalResult:
    g: np.ndarray
    g_decision: np.ndarray
    value: float
    objective: str
    ordering: str
    start_values: list[float]
    n_evals: int
    evaluator: OracleEvaluator = field(repr=False)

    @property
    def policy(self) -> ThresholdRule:
        return self.evaluator.threshold_policy(self.g)

    def details(self) -> OracleValue:
        return self.evaluator.threshold_value(self.g, self.objective)


def approx_optimal(spec: SystemSpec, constraint: str | None = None, budget: int = 3000, seed: int = 0, *,
                   objective: str | None = None, starts: int = 5, mc_samples: int = 20000,
                   evaluator: OracleEvaluator | None = None, eps: float = 1e-3, polish: bool = True
                   ) -> OptimalResult:
    """Maximize the oracle value over true-CADE threshold policies.

    The decision variables are the treated shares ``g_s`` at the decision
    states. COBYLA runs from ``starts`` initial points (constant shares, the
    direct rule's shares, then random feasible points) under the ordering
    constraint; the best result is polished by a projected compass search.
    """
    ordering = constraint or default_ordering(spec)
    if ordering not in ORDERINGS:
        raise SpecError(f"unknown ordering constraint {ordering!r}")
    objective = objective or default_objective(spec)
    if starts < 1 or budget < 1:
        raise SpecError("need at least one start and a positive budget")
    ev = evaluator or OracleEvaluator(spec, mc_samples)
    space = ev.space
    dec = space.decision_states
    lo, hi = eps, 1.0 - eps
    full = np.full(space.n_states, 0.5)
    cache: dict[bytes, float] = {}

    def value(x):
        x = np.clip(x, lo, hi)
        key = np.round(x, 12).tobytes()
        if key not in cache:
            g = full.copy()
            g[dec] = x
            cache[key] = ev.threshold_value(g, objective).value
        return cache[key]

    cons = []
    if ordering != "none" and len(dec) > 1:
        sign = 1.0 if ordering == "nonincreasing" else -1.0
        cons.append({"type": "ineq", "fun": lambda x: sign * (x[:-1] - x[1:])})
    rng = np.random.default_rng(seed)
    init = [np.full(len(dec), 0.5), project_ordering(np.clip(ev.direct_proportions()[dec], 0.02, 0.98), ordering, lo, hi),
            np.full(len(dec), 0.25)]
    while len(init) < starts:
        init.append(project_ordering(rng.uniform(0.05, 0.95, len(dec)), ordering, lo, hi))
    best_x, best_v, start_values = None, -np.inf, []
    for x0 in init[:max(starts, 1)]:
        res = optimize.minimize(lambda x: -value(x), x0, method="COBYLA", constraints=cons,
                                bounds=[(lo, hi)] * len(dec), options={"maxiter": budget, "rhobeg": 0.1})
        for cand in (res.x, x0):
            cand = project_ordering(cand, ordering, lo, hi)
            v = value(cand)
            if v > best_v:
                best_x, best_v = cand, v
        start_values.append(float(value(project_ordering(res.x, ordering, lo, hi))))
    if best_x is None or not np.isfinite(best_v):
        raise SpecError("optimizer budget exhausted before any feasible evaluation")
    if polish:
        best_x, best_v = compass_search(value, best_x, ordering, lo, hi)
    g = full.copy()
    g[dec] = best_x
    return OptimalResult(g, best_x, float(best_v), objective, ordering, start_values, len(cache), ev)


def compass_search(value, x, ordering: str, lo: float, hi: float, step: float = 0.05, min_step: float = 1e-4,
                   max_evals: int = 20000) -> tuple[np.ndarray, float]:
    """Projected coordinate pattern search (maximization)."""
    x = project_ordering(x, ordering, lo, hi)
    v = value(x)
    evals = 0
    while step >= min_step and evals < max_evals:
        improved = False
        for i in range(len(x)):
            for sgn in (1.0, -1.0):
                cand = x.copy()
                cand[i] += sgn * step
                cand = project_ordering(cand, ordering, lo, hi)
                cv = value(cand)
                evals += 1
                if cv > v + 1e-13:
                    x, v, improved = cand, cv, True
                    break
        if not improved:
            step /= 2.0
    return x, v


# CAIE diagnostics-------------------------------------------------------------------------

@dataclass
class CaieResult:
    state: int
    value: float
    se: float
    recouple_rate: float
    mean_steps: float
    mu: float
    n_rep: int

    def as_row(self, space) -> dict:
        lab = space.labels[self.state]
        return {"state": lab if not isinstance(lab, tuple) else f"{lab[0]}-{lab[1]}", "caie": self.value,
                "se": self.se, "recouple_rate": self.recouple_rate, "mean_steps": self.mean_steps}


class CouplingPool:
    """Covariate pool with policy and outcome-regression tables for coupled simulation."""

    def __init__(self, spec: SystemSpec, policy: Policy, pool_size: int = 50000, seed: int = 7):
        self.evaluator = OracleEvaluator(spec, pool_size, seed)
        self.P = policy.prob_table(self.evaluator.X, self.evaluator.space.n_states)
        self.mu = self.evaluator.evaluate_table(self.P, "avg_outcome").mu


def caie_diagnostic(spec: SystemSpec, policy: Policy, s: int, truncation: int = 10_000, mc: int = 2000,
                    seed: int = 0, *, pool: CouplingPool | None = None, first_covariates: np.ndarray | None = None
                    ) -> CaieResult:
    """Conditional average indirect effect ``C_pi(s)`` by coupled simulation.

    Two copies of the embedded chain start from an arrival at ``s`` with the
    first treatment forced to 1 and 0. They share every later uniform (event
    type, covariate draw, treatment draw, admission draw), so they move together
    once their configurations meet. The estimate averages the difference of
    ``sum_{i >= 2} (eta(X_i, S_i, W_i) - mu(pi))`` over ``mc`` pairs; outcome
    noise is integrated out. With ``first_covariates`` the first unit is drawn
    from that sample and its outcome enters both sums before its direct effect
    ``tau(x_1, s)`` is subtracted, so stratified runs check covariate invariance.
    """
    space = spec.state_space()
    if s not in set(space.arrival_states.tolist()):
        raise SpecError(f"state {space.labels[s]} admits no arrivals")
    pool = pool or CouplingPool(spec, policy)
    ev = pool.evaluator
    P, base, tau, mu = pool.P, ev.base, ev.tau, pool.mu
    rng = np.random.default_rng(seed)
    fixed = spec.fixed_admission
    cum = np.cumsum(space.rates / np.where(space.total_rate > 0, space.total_rate, 1.0)[:, None], axis=1)
    nt, nc, ns = space.next_treated, space.next_control, space.next_service
    if fixed is None:
        sa = np.full(mc, nt[s])
        sb = np.full(mc, nc[s])
    else:
        join = rng.random(mc) < fixed
        sa = np.where(join, nt[s], nc[s])
        sb = sa.copy()
    acc = np.zeros(mc)
    if first_covariates is not None:
        # the forced first unit enters both sums; its direct effect is then removed
        X1 = np.atleast_2d(first_covariates)[rng.integers(0, len(np.atleast_2d(first_covariates)), mc)]
        model = outcome_model_for(spec)
        st = np.full(mc, s)
        y1, y0 = model.conditional_mean(X1, st, 1, space), model.conditional_mean(X1, st, 0, space)
        acc += (y1 - mu) - (y0 - mu) - model.cade(X1, st, space)
    active = sa != sb
    steps = np.zeros(mc)
    for _ in range(truncation):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        m = idx.size
        u_ev, u_w, u_j = rng.random(m), rng.random(m), rng.random(m)
        xi = rng.integers(0, ev.n, m)
        contrib = np.zeros(m)
        new = []
        for sign, st in ((1.0, sa), (-1.0, sb)):
            cur = st[idx]
            ev_type = (u_ev[:, None] >= cum[cur]).sum(axis=1)
            ev_type = np.minimum(ev_type, 2)
            arr = ev_type == Event.ARRIVAL
            w = (u_w < P[xi, cur]).astype(float)
            eta = base[xi, cur] + w * tau[xi, cur]
            contrib += sign * np.where(arr, eta - mu, 0.0)
            if fixed is None:
                nxt_arr = np.where(w == 1, nt[cur], nc[cur])
            else:
                nxt_arr = np.where(u_j < fixed, nt[cur], nc[cur])
            nxt = np.where(arr, nxt_arr, ns[cur, np.maximum(ev_type, 1)])
            new.append(nxt)
        acc[idx] += contrib
        steps[idx] += 1
        sa[idx], sb[idx] = new
        active[idx] = sa[idx] != sb[idx]
    rate = float(1.0 - active.mean())
    if rate < 0.99:
        warnings.warn(f"only {rate:.3f} of coupled pairs recoupled within {truncation} events; "
                      "increase the truncation", stacklevel=2)
    return CaieResult(s, float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(mc)), rate, float(steps.mean()),
                      mu, mc)


def caie_table(spec: SystemSpec, policy: Policy, states=None, truncation: int = 10_000, mc: int = 2000,
               seed: int = 0) -> list[CaieResult]:
    space = spec.state_space()
    pool = CouplingPool(spec, policy)
    states = space.arrival_states if states is None else states
    return [caie_diagnostic(spec, policy, int(s), truncation, mc, seed + i, pool=pool) for i, s in enumerate(states)]


def conditional_gradient(spec: SystemSpec, X: np.ndarray, s: int, caie: float) -> np.ndarray:
    """``H(x, s; pi) = tau(x, s) + C_pi(s)``."""
    X = np.atleast_2d(X)
    space = spec.state_space()
    return outcome_model_for(spec).cade(X, np.full(len(X), s), space) + caie
