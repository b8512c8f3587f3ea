"""Built-in outcome models and logging policies.

Every outcome model exposes the realized-outcome function used by the
simulator and its conditional mean ``E[Y | x, s, w]``, which the oracle and
CAIE diagnostics consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import digamma
from scipy.stats import norm

from .systems import SpecError, StateSpace, SystemSpec

Z75 = float(norm.ppf(0.75))


# outcome models----------------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeModel:
    name: str
    noise_sd: float
    delay_sensitive: bool

    def outcome(self, x, queue_lengths, w, wait, service, noise):
        raise NotImplementedError

    def conditional_mean(self, X: np.ndarray, states: np.ndarray, w, space: StateSpace) -> np.ndarray:
        raise NotImplementedError

    def cade(self, X: np.ndarray, states: np.ndarray, space: StateSpace) -> np.ndarray:
        return self.conditional_mean(X, states, 1, space) - self.conditional_mean(X, states, 0, space)


class MnM1Outcome(OutcomeModel):
    """``W * ((7 - K)|x1| + 3 x2) + max(x3, 0) + eps``, ``eps ~ N(0, 4)``."""

    def __init__(self):
        super().__init__("mnm1_example", noise_sd=2.0, delay_sensitive=False)

    def outcome(self, x, queue_lengths, w, wait, service, noise):
        x = np.atleast_2d(x)
        k = np.asarray(queue_lengths).reshape(len(x), -1)[:, 0]
        effect = (7.0 - k) * np.abs(x[:, 0]) + 3.0 * x[:, 1]
        return np.asarray(w) * effect + np.maximum(x[:, 2], 0.0) + noise

    def conditional_mean(self, X, states, w, space):
        X = np.atleast_2d(X)
        k = space.queue_lengths(np.broadcast_to(states, (len(X),)))[:, 0]
        effect = (7.0 - k) * np.abs(X[:, 0]) + 3.0 * X[:, 1]
        return np.asarray(w) * effect + np.maximum(X[:, 2], 0.0)


def erlang_neg_log_mean(n, rate):
    """``E[-log S]`` for ``S ~ Erlang(n, rate)``."""
    return np.log(rate) - digamma(n)


def erlang_second_moment(n, rate):
    return n * (n + 1.0) / rate**2


class ParallelOutcome(OutcomeModel):
    """Delay-sensitive outcome of the two-queue routing example.

    Patients with ``x1 <= Z_0.75`` get ``-log(sojourn)``; the top quarter get
    ``-3 sojourn^2``; plus ``N(0, 1)`` noise.
    """

    def __init__(self):
        super().__init__("parallel_example", noise_sd=1.0, delay_sensitive=True)

    def outcome(self, x, queue_lengths, w, wait, service, noise):
        x = np.atleast_2d(x)
        sojourn = np.asarray(wait, dtype=float) + np.asarray(service, dtype=float)
        sensitive = x[:, 0] > Z75
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(sensitive, -3.0 * sojourn**2, -np.log(sojourn))
        return y + noise

    def conditional_mean(self, X, states, w, space):
        X = np.atleast_2d(X)
        states = np.broadcast_to(np.asarray(states, dtype=int), (len(X),))
        w = np.broadcast_to(np.asarray(w), (len(X),))
        nxt = np.where(w == 1, space.next_treated[states], space.next_control[states])
        before = space.queue_lengths(states)
        after = space.queue_lengths(nxt)
        joined_fast = after[:, 1] > before[:, 1]
        mu0, mu1 = space.spec.service_rates
        n_ahead = np.where(joined_fast, before[:, 1], before[:, 0]) + 1
        rate = np.where(joined_fast, mu1, mu0)
        sensitive = X[:, 0] > Z75
        return np.where(sensitive, -3.0 * erlang_second_moment(n_ahead, rate), erlang_neg_log_mean(n_ahead, rate))


OUTCOME_MODELS: dict[str, OutcomeModel] = {}


def register_outcome(model: OutcomeModel) -> OutcomeModel:
    OUTCOME_MODELS[model.name] = model
    return model


register_outcome(MnM1Outcome())
register_outcome(ParallelOutcome())


def get_outcome_model(model_id: str) -> OutcomeModel:
    try:
        return OUTCOME_MODELS[model_id]
    except KeyError:
        raise SpecError(f"unknown outcome model {model_id!r}; known: {sorted(OUTCOME_MODELS)}") from None


def builtin_outcome(model_id, covariates, state, action, realized_wait=0.0, realized_service=0.0, noise=0.0):
    """Scalar or vectorized outcome for a registered model; ``state`` is the queue-length tuple."""
    model = get_outcome_model(model_id)
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    q = np.atleast_2d(np.asarray(state)).reshape(len(x), -1)
    y = model.outcome(x, q, np.broadcast_to(action, (len(x),)), realized_wait, realized_service, noise)
    y = np.asarray(y, dtype=float)
    return float(y[0]) if y.size == 1 and np.ndim(covariates) == 1 else y


# logging policies----------------------------------------------------------------------

LoggingFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _mnm1_logging(X: np.ndarray, queue_lengths: np.ndarray) -> np.ndarray:
    return 0.6 + 0.2 * (X[:, 1] > 0) - 0.1 * (X[:, 3] + X[:, 4] > 0)


def _parallel_logging(X: np.ndarray, queue_lengths: np.ndarray) -> np.ndarray:
    return np.full(len(X), 0.5)


LOGGING_POLICIES: dict[str, LoggingFn] = {
    "mnm1_logging": _mnm1_logging,
    "parallel_logging": _parallel_logging,
}


def get_logging_policy(policy_id: str) -> LoggingFn:
    try:
        return LOGGING_POLICIES[policy_id]
    except KeyError:
        raise SpecError(f"unknown logging policy {policy_id!r}; known: {sorted(LOGGING_POLICIES)}") from None


def builtin_logging_policy(policy_id, covariates, state=0):
    """Treatment probability of a registered logging policy."""
    fn = get_logging_policy(policy_id)
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    p = fn(x, np.atleast_2d(np.asarray(state)).reshape(-1, 1))
    return float(p[0]) if np.ndim(covariates) == 1 else p


def sample_covariates(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def outcome_model_for(spec: SystemSpec) -> OutcomeModel:
    return get_outcome_model(spec.outcome_model)
