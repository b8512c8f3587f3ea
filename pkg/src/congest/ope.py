"""Doubly robust off-policy evaluation for queueing systems.

The value of a target policy is estimated as ``sum_s r(s) d(s)``: ``r(s)`` is
the doubly robust mean outcome of arrivals that see configuration ``s`` and
``d`` is the policy's stationary law, computed from estimated arrival and
service rates through the analytic kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.linear_model import LogisticRegression

from .chain import KernelFactory, StationaryDist, arrival_conditioned
from .dgp import outcome_model_for
from .policy import LoggingPolicy, Policy
from .sim import ArrivalData, Trajectory
from .systems import Event, Kind, SpecError, StateSpace, SystemSpec

log = logging.getLogger(__name__)

CLIP = 0.05


class LeakError(ValueError):
    pass


# rates---------------------------------------------------------------------------------

@dataclass
class Rates:
    """Continuous-time MLEs: event counts over exposure time.

    ``arrival[s]`` is the arrival-rate estimate at configuration ``s`` (``NaN``
    where nothing was observed), ``service`` one rate per queue.
    """

    arrival: np.ndarray
    service: np.ndarray
    exposure: np.ndarray
    arrival_missing: np.ndarray
    service_missing: np.ndarray

    def to_spec(self, spec: SystemSpec) -> tuple[SystemSpec, np.ndarray]:
        """System with estimated rates, plus a mask of states whose rate was imputed."""
        if np.any(self.service_missing):
            raise SpecError("service rate could not be estimated (no busy time observed)")
        space = spec.state_space()
        flagged = np.zeros(space.n_states, dtype=bool)
        if spec.kind is Kind.MNM1:
            cap = spec.capacities[0]
            lam = self.arrival[:cap].copy()
            miss = ~np.isfinite(lam)
            if miss.all():
                raise SpecError("no arrival rate could be estimated")
            if miss.any():
                seen = np.flatnonzero(~miss)
                for k in np.flatnonzero(miss):
                    lam[k] = lam[seen[np.argmin(np.abs(seen - k))]]
                flagged[:cap] = miss
            new = spec.with_rates(list(lam) + [0.0], list(self.service))
        else:
            lam = self.arrival[np.isfinite(self.arrival)]
            if lam.size == 0:
                raise SpecError("no arrival rate could be estimated")
            new = spec.with_rates([float(lam[0])], list(self.service))
        return new, flagged


def estimate_rates(traj: Trajectory, mask: np.ndarray | None = None) -> Rates:
    """Arrival and service rate MLEs from event counts and exposure times.

    The gap before event ``i`` is spent in configuration ``S_i``, so exposure
    and counts can be accumulated over any subset of records.
    """
    spec = traj.spec
    space = traj.space
    keep = np.ones(len(traj), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    s, a, dt = traj.s[keep], traj.a[keep], traj.dt[keep]
    n = space.n_states
    exposure = np.bincount(s, weights=dt, minlength=n)
    counts = np.zeros((n, 3))
    np.add.at(counts, (s, a.astype(int)), 1.0)
    can_arrive = space.rates[:, Event.ARRIVAL] > 0
    qlen = space.queue_lengths(np.arange(n))
    arrival = np.full(n, np.nan)
    if spec.kind is Kind.MNM1:
        ok = can_arrive & (exposure > 0)
        arrival[ok] = counts[ok, Event.ARRIVAL] / exposure[ok]
    else:
        t_open = exposure[can_arrive].sum()
        if t_open > 0:
            arrival[can_arrive] = counts[:, Event.ARRIVAL].sum() / t_open
    service, service_missing = [], []
    for q, ev in enumerate((Event.SERVICE_Q0, Event.SERVICE_Q1)[: qlen.shape[1]]):
        busy = exposure[qlen[:, q] > 0].sum()
        service.append(counts[:, ev].sum() / busy if busy > 0 else np.nan)
        service_missing.append(not busy > 0)
    return Rates(arrival, np.array(service), exposure, can_arrive & ~np.isfinite(arrival),
                 np.array(service_missing))


def true_rates(spec: SystemSpec) -> Rates:
    space = spec.state_space()
    lam = np.where(space.rates[:, Event.ARRIVAL] > 0, space.rates[:, Event.ARRIVAL], np.nan)
    return Rates(lam, np.array(spec.service_rates), np.full(space.n_states, np.inf),
                 np.zeros(space.n_states, dtype=bool), np.zeros(len(spec.service_rates), dtype=bool))


# nuisances-----------------------------------------------------------------------------

@dataclass
class NuisanceSet:
    """Propensity ``P(W=1 | x, s)``, outcome regression ``eta(w, x, s)``, rates and clipping."""

    space: StateSpace
    propensity: Callable[[np.ndarray, np.ndarray], np.ndarray]
    outcome: Callable[[np.ndarray, np.ndarray, int], np.ndarray]
    rates: Rates
    clip: float = CLIP
    eta_bound: float | None = None
    train_index: np.ndarray | None = field(default=None, repr=False)

    def prop1(self, X, states) -> np.ndarray:
        p = np.asarray(self.propensity(np.atleast_2d(X), np.asarray(states, dtype=int)), dtype=float)
        return np.clip(p, self.clip, 1.0 - self.clip)

    def eta(self, X, states, w) -> np.ndarray:
        y = np.asarray(self.outcome(np.atleast_2d(X), np.asarray(states, dtype=int), w), dtype=float)
        if self.eta_bound is not None:
            y = np.clip(y, -self.eta_bound, self.eta_bound)
        return y


class StatePropensity:
    """Per-state L2-regularized logistic regression with a pooled fallback."""

    def __init__(self, n_states: int, min_obs: int = 50, C: float = 1.0):
        self.n_states = n_states
        self.min_obs = min_obs
        self.C = C
        self.models: dict[int, object] = {}

    def _fit_one(self, X, w):
        if w.min() == w.max():
            return float(w[0])
        return LogisticRegression(C=self.C, max_iter=1000).fit(X, w)

    def fit(self, data: ArrivalData) -> "StatePropensity":
        self.pooled = self._fit_one(data.X, data.w)
        for s in np.unique(data.s):
            m = data.s == s
            if m.sum() >= self.min_obs and 0 < data.w[m].mean() < 1:
                self.models[int(s)] = self._fit_one(data.X[m], data.w[m])
        return self

    @staticmethod
    def _predict(model, X):
        if isinstance(model, float):
            return np.full(len(X), model)
        return model.predict_proba(X)[:, 1]

    def __call__(self, X, states):
        out = np.empty(len(X))
        states = np.broadcast_to(states, (len(X),))
        for s in np.unique(states):
            m = states == s
            out[m] = self._predict(self.models.get(int(s), self.pooled), X[m])
        return out


def fit_nuisances(train: ArrivalData, space: StateSpace, rates: Rates, *, logging_policy: Policy | None = None,
                  outcome_model=None, estimator: str = "auto", clip: float = CLIP, eta_bound: float | None = None,
                  eval_index: np.ndarray | None = None, seed: int = 0) -> NuisanceSet:
    """Fit propensity and outcome nuisances on the training split.

    ``logging_policy`` replaces the propensity fit when the behaviour policy
    is known. ``outcome_model`` reuses an already fitted per-arm regression
    (anything with ``predict_arm``). ``eval_index`` guards against evaluation
    records leaking into training.
    """
    if eval_index is not None and np.intersect1d(train.index, eval_index).size:
        raise LeakError("evaluation records found in the nuisance training data")
    if logging_policy is not None:
        propensity = logging_policy.prob
    else:
        propensity = StatePropensity(space.n_states).fit(train)
    if outcome_model is None:
        from .cade import fit_cade

        outcome_model = fit_cade(train, space, estimator, seed=seed)
    return NuisanceSet(space, propensity, outcome_model.predict_arm, rates, clip, eta_bound, train.index)


def true_nuisances(spec: SystemSpec, rates: Rates | None = None, *, propensity=None, outcome=None,
                   clip: float = CLIP) -> NuisanceSet:
    """Nuisances from the known data-generating process (overridable piecewise)."""
    space = spec.state_space()
    model = outcome_model_for(spec)
    if propensity is None:
        propensity = LoggingPolicy(spec.logging_policy).prob
    if outcome is None:
        def outcome(X, states, w):
            return model.conditional_mean(X, states, w, space)
    return NuisanceSet(space, propensity, outcome, rates or true_rates(spec), clip)


# estimators----------------------------------------------------------------------------

@dataclass
class EvalData:
    """Evaluation split: arrivals plus per-augmented-state gap sums."""

    arrivals: ArrivalData
    gap_sum: np.ndarray
    gap_count: np.ndarray
    index: np.ndarray

    @classmethod
    def from_trajectory(cls, traj: Trajectory, mask: np.ndarray | None = None) -> "EvalData":
        keep = np.ones(len(traj), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        n = traj.space.n_states
        s, a, dt = traj.s[keep], traj.a[keep].astype(int), traj.dt[keep]
        gap_sum = np.zeros((n, 3))
        gap_count = np.zeros((n, 3))
        np.add.at(gap_sum, (s, a), dt)
        np.add.at(gap_count, (s, a), 1.0)
        return cls(traj.arrivals(keep), gap_sum, gap_count, np.flatnonzero(keep))


@dataclass
class ValueEstimate:
    value: float
    r: np.ndarray
    d: np.ndarray
    counts: np.ndarray
    flagged: np.ndarray
    flagged_mass: float
    numerator: float | None = None
    denominator: float | None = None

    def diagnostics(self) -> dict:
        return {"flagged_states": int(self.flagged.sum()), "flagged_mass": self.flagged_mass,
                "min_count": int(self.counts[self.counts > 0].min()) if np.any(self.counts > 0) else 0}


def dr_terms(data: ArrivalData, target: Policy, nuis: NuisanceSet) -> np.ndarray:
    """Per-arrival doubly robust pseudo-outcomes ``eta_pi + (pi_W / pi0_W)(Y - eta_W)``."""
    X, s, w, y = data.X, data.s, data.w.astype(int), data.y
    pi1 = target.prob(X, s)
    e1, e0 = nuis.eta(X, s, 1), nuis.eta(X, s, 0)
    p1 = nuis.prop1(X, s)
    eta_pi = pi1 * e1 + (1.0 - pi1) * e0
    ratio = np.where(w == 1, pi1 / p1, (1.0 - pi1) / (1.0 - p1))
    return eta_pi + ratio * (y - np.where(w == 1, e1, e0))


def dr_state_values(data: ArrivalData, target: Policy, nuis: NuisanceSet,
                    fallback_X: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """DR state values ``r(s)``, arrival counts and no-overlap flags for every state.

    States without evaluation arrivals fall back to the outcome-regression plug-in
    averaged over ``fallback_X`` (default: the evaluation covariates).
    """
    n = nuis.space.n_states
    counts = np.bincount(data.s, minlength=n).astype(float)
    sums = np.bincount(data.s, weights=dr_terms(data, target, nuis), minlength=n) if len(data) else np.zeros(n)
    r = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    flagged = np.zeros(n, dtype=bool)
    empty = [s for s in nuis.space.arrival_states if counts[s] == 0]
    if empty:
        Xf = data.X if fallback_X is None else fallback_X
        if len(Xf) == 0:
            raise SpecError("no covariates available for the no-overlap fallback")
        for s in empty:
            st = np.full(len(Xf), s)
            pi1 = target.prob(Xf, st)
            r[s] = np.mean(pi1 * nuis.eta(Xf, st, 1) + (1 - pi1) * nuis.eta(Xf, st, 0))
            flagged[s] = True
    return r, counts, flagged


def dr_state_value(data: ArrivalData, k: int, target: Policy, nuis: NuisanceSet) -> float:
    return float(dr_state_values(data, target, nuis)[0][k])


def mean_profile(target: Policy, reference_X: np.ndarray, n_states: int) -> np.ndarray:
    """``pbar(s)``: the policy's treatment probability averaged over a covariate sample."""
    return target.prob_table(reference_X, n_states).mean(axis=0)


def plugin_stationary(spec: SystemSpec, rates: Rates, profile, factory: KernelFactory | None = None
                      ) -> tuple[StationaryDist, np.ndarray]:
    """Stationary law under estimated rates, and the mask of rate-imputed states."""
    est, flagged = rates.to_spec(spec)
    factory = factory or KernelFactory(est)
    return factory.stationary(profile), flagged


def _assemble(spec, data_r, counts, flagged, d: StationaryDist, rate_flags, objective, gaps=None, rates=None):
    space = d.space
    flagged = flagged | rate_flags
    arr = arrival_conditioned(d)
    flagged_mass = float(arr[flagged].sum())
    if objective == "avg_outcome":
        return ValueEstimate(float(arr @ data_r), data_r, arr, counts, flagged, flagged_mass)
    num = float(d.arrival_mass() @ data_r)
    gap_sum, gap_count = gaps
    den = 0.0
    for (a, s), p in zip(d.states, d.probs):
        if gap_count[s, a] > 0:
            den += p * gap_sum[s, a] / gap_count[s, a]
        else:
            den += p / space.total_rate[s]
    return ValueEstimate(num / den, data_r, arr, counts, flagged, flagged_mass, num, den)


def ope_value(data: EvalData, target: Policy, nuis: NuisanceSet, spec: SystemSpec,
              reference_X: np.ndarray, profile=None) -> ValueEstimate:
    """``mu_hat = sum_s r_hat(s) d_hat(s)`` over arrival-conditioned configurations."""
    r, counts, flagged = dr_state_values(data.arrivals, target, nuis, reference_X)
    pbar = mean_profile(target, reference_X, nuis.space.n_states) if profile is None else np.asarray(profile)
    d, rate_flags = plugin_stationary(spec, nuis.rates, pbar)
    return _assemble(spec, r, counts, flagged, d, rate_flags, "avg_outcome")


def ope_reward_rate(data: EvalData, target: Policy, nuis: NuisanceSet, spec: SystemSpec,
                    reference_X: np.ndarray, profile=None) -> ValueEstimate:
    """Long-run reward rate ``R_hat / Delta_hat`` by the renewal-reward ratio.

    The numerator mixes DR arrival values by the plug-in augmented law; the
    denominator mixes per-augmented-state mean gaps from the evaluation data
    (``1 / total rate`` where a state was never observed). ``profile``
    overrides the reference-sample treatment shares ``pbar``.
    """
    if len(data.arrivals) == 0:
        raise SpecError("empty evaluation split")
    est, _ = nuis.rates.to_spec(spec)
    r, counts, flagged = dr_state_values(data.arrivals, target, nuis, reference_X)
    pbar = mean_profile(target, reference_X, nuis.space.n_states) if profile is None else np.asarray(profile)
    d, rate_flags = plugin_stationary(spec, nuis.rates, pbar)
    d.space = est.state_space()
    return _assemble(spec, r, counts, flagged, d, rate_flags, "reward_rate", (data.gap_sum, data.gap_count))


def estimate(objective: str, *args, **kwargs) -> ValueEstimate:
    if objective == "avg_outcome":
        return ope_value(*args, **kwargs)
    if objective == "reward_rate":
        return ope_reward_rate(*args, **kwargs)
    raise SpecError(f"unknown objective {objective!r}")


def write_estimates_csv(path, rows: list[dict], comment: str | None = None) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
