"""Treatment-assignment policies.

A policy maps covariates and a flat state index to a treatment probability.
All policies are vectorized: ``prob(X, states)`` takes one state per row and
``prob_table(X)`` evaluates every state at once, which is what the simulator
and the oracle consume.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .dgp import get_logging_policy, outcome_model_for
from .systems import SpecError, StateSpace, SystemSpec


class CadeModel(Protocol):
    """Anything that predicts the conditional average direct effect."""

    n_states: int

    def predict(self, X: np.ndarray, states: np.ndarray) -> np.ndarray: ...

    def predict_table(self, X: np.ndarray) -> np.ndarray: ...


class TrueCade:
    """The known CADE of a built-in outcome model, behind the model interface."""

    estimator_id = "oracle"

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.space = spec.state_space()
        self.n_states = self.space.n_states
        self._model = outcome_model_for(spec)

    def predict(self, X, states):
        return self._model.cade(np.atleast_2d(X), np.asarray(states, dtype=int), self.space)

    def predict_table(self, X):
        X = np.atleast_2d(X)
        return np.stack([self.predict(X, np.full(len(X), s)) for s in range(self.n_states)], axis=1)


class Policy:
    kind = "base"
    n_states: int | None = None

    def prob(self, X: np.ndarray, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def prob_table(self, X: np.ndarray, n_states: int | None = None) -> np.ndarray:
        n = n_states or self.n_states
        X = np.atleast_2d(X)
        return np.stack([self.prob(X, np.full(len(X), s)) for s in range(n)], axis=1)

    def check_space(self, space: StateSpace) -> None:
        if self.n_states is not None and self.n_states != space.n_states:
            raise SpecError(f"policy covers {self.n_states} states, system has {space.n_states}")

    def _check_states(self, states):
        states = np.asarray(states, dtype=int)
        if self.n_states is not None and states.size and (states.min() < 0 or states.max() >= self.n_states):
            raise SpecError(f"state outside the policy domain 0..{self.n_states - 1}")
        return states

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


class ConstantPolicy(Policy):
    """Fixed probability, either global or one value per state."""

    kind = "constant"

    def __init__(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p < 0) or np.any(p > 1):
            raise SpecError("constant policy probability must lie in [0, 1]")
        self.p = p
        self.n_states = None if p.ndim == 0 else len(p)

    def prob(self, X, states):
        states = self._check_states(states)
        if self.p.ndim == 0:
            return np.full(len(np.atleast_2d(X)), float(self.p))
        return self.p[states]

    def prob_table(self, X, n_states=None):
        n = self.n_states or n_states
        if self.p.ndim == 0:
            return np.full((len(np.atleast_2d(X)), n), float(self.p))
        return np.broadcast_to(self.p, (len(np.atleast_2d(X)), n)).copy()

    def to_dict(self):
        return {"kind": self.kind, "p": self.p.tolist()}


class LoggingPolicy(Policy):
    kind = "logging"

    def __init__(self, policy_id: str):
        self.policy_id = policy_id
        self._fn = get_logging_policy(policy_id)

    def prob(self, X, states):
        X = np.atleast_2d(X)
        return np.asarray(self._fn(X, np.asarray(states).reshape(-1, 1)), dtype=float)

    def prob_table(self, X, n_states=None):
        X = np.atleast_2d(X)
        # built-in logging policies ignore the state
        p = self.prob(X, np.zeros(len(X), dtype=int))
        return np.repeat(p[:, None], n_states or 1, axis=1)

    def to_dict(self):
        return {"kind": self.kind, "id": self.policy_id}


class DirectRule(Policy):
    """Treat whenever the predicted CADE is positive."""

    kind = "direct"

    def __init__(self, model: CadeModel):
        self.model = model
        self.n_states = model.n_states

    def prob(self, X, states):
        states = self._check_states(states)
        return (self.model.predict(np.atleast_2d(X), states) > 0).astype(float)

    def prob_table(self, X, n_states=None):
        return (self.model.predict_table(np.atleast_2d(X)) > 0).astype(float)

    def to_dict(self):
        return {"kind": self.kind}


class ThresholdRule(Policy):
    """``1{tau > c_s} + 1{tau == c_s} p_s`` with per-state thresholds."""

    kind = "threshold"

    def __init__(self, model: CadeModel, thresholds, ties=None, proportions=None):
        self.model = model
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.ties = np.zeros_like(self.thresholds) if ties is None else np.asarray(ties, dtype=float)
        self.proportions = None if proportions is None else np.asarray(proportions, dtype=float)
        self.n_states = len(self.thresholds)
        if np.any(self.ties < 0) or np.any(self.ties > 1):
            raise SpecError("tie probabilities must lie in [0, 1]")
        if not np.all(np.isfinite(self.thresholds)):
            raise SpecError("thresholds must be finite")

    @staticmethod
    def apply(tau, c, p):
        return (tau > c).astype(float) + (tau == c) * p

    def prob(self, X, states):
        states = self._check_states(states)
        tau = self.model.predict(np.atleast_2d(X), states)
        return self.apply(tau, self.thresholds[states], self.ties[states])

    def prob_table(self, X, n_states=None):
        tau = self.model.predict_table(np.atleast_2d(X))
        return self.apply(tau, self.thresholds[None, :], self.ties[None, :])

    def to_dict(self):
        d = {"kind": self.kind, "thresholds": self.thresholds.tolist(), "ties": self.ties.tolist()}
        if self.proportions is not None:
            d["proportions"] = self.proportions.tolist()
        return d


def evaluate_policy_prob(policy: Policy, x, s: int) -> float:
    """Treatment probability for a single covariate vector at flat state ``s``."""
    return float(policy.prob(np.atleast_2d(np.asarray(x, dtype=float)), np.array([s]))[0])


def policy_from_dict(d: dict[str, Any], model: CadeModel | None = None) -> Policy:
    kind = d.get("kind")
    if kind == "constant":
        return ConstantPolicy(d["p"])
    if kind == "logging":
        return LoggingPolicy(d["id"])
    if kind in ("direct", "threshold"):
        if model is None:
            raise SpecError(f"{kind} policy needs a CADE model")
        if kind == "direct":
            return DirectRule(model)
        return ThresholdRule(model, d["thresholds"], d.get("ties"), d.get("proportions"))
    raise SpecError(f"unknown policy kind {kind!r}")


def load_policy(path: str | Path, spec: SystemSpec | None = None) -> Policy:
    """Load a policy JSON; ``{"model": "oracle"}`` or a model path resolves the CADE model."""
    d = json.loads(Path(path).read_text())
    if "policy" in d:
        d = d["policy"]
    model = None
    ref = d.get("model")
    if ref == "oracle":
        if spec is None:
            raise SpecError("oracle CADE model needs the system spec")
        model = TrueCade(spec)
    elif ref:
        from .cade import load_model

        ref_path = Path(ref)
        if not ref_path.is_absolute():
            ref_path = Path(path).parent / ref_path
        model = load_model(ref_path)
    return policy_from_dict(d, model)
