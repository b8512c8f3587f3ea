"""System definitions: queue topology, rates, and the finite state space they induce."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class Kind(str, Enum):
    MM1_ADMISSION = "mm1_admission"
    MNM1 = "mnm1"
    PARALLEL = "parallel_routing"


class Event(IntEnum):
    ARRIVAL = 0
    SERVICE_Q0 = 1
    SERVICE_Q1 = 2


NO_ACTION = 2


class SpecError(ValueError):
    """Raised when a system or policy configuration is invalid."""


@dataclass(frozen=True)
class SystemSpec:
    """Queue topology plus the generative models attached to it.

    ``arrival_rates`` holds one rate per queue length ``k = 0..capacity`` for
    single-queue kinds (the entry at capacity is ignored), and a single rate
    for ``PARALLEL``. ``service_rates`` is ``(mu,)`` or ``(mu0, mu1)``.
    ``fixed_admission``, when set, makes every arrival join with that
    probability regardless of the assigned treatment; this decouples the
    dynamics from the policy.
    """

    kind: Kind
    arrival_rates: tuple[float, ...]
    service_rates: tuple[float, ...]
    capacities: tuple[int, ...]
    covariate_dim: int = 10
    outcome_model: str = "mnm1_example"
    logging_policy: str = "mnm1_logging"
    fixed_admission: float | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "arrival_rates", tuple(float(v) for v in np.atleast_1d(self.arrival_rates)))
        object.__setattr__(self, "service_rates", tuple(float(v) for v in np.atleast_1d(self.service_rates)))
        object.__setattr__(self, "capacities", tuple(int(v) for v in np.atleast_1d(self.capacities)))
        self.validate()

    def validate(self) -> None:
        caps, lam, mu = self.capacities, np.asarray(self.arrival_rates), np.asarray(self.service_rates)
        n_queues = 2 if self.kind is Kind.PARALLEL else 1
        if len(caps) != n_queues:
            raise SpecError(f"{self.kind.value} needs {n_queues} capacities, got {len(caps)}")
        if min(caps) < 1:
            raise SpecError(f"capacities must be >= 1, got {caps}")
        if len(mu) != n_queues:
            raise SpecError(f"{self.kind.value} needs {n_queues} service rates, got {len(mu)}")
        if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(mu)):
            raise SpecError("rates must be finite")
        if np.any(lam < 0) or np.any(mu <= 0):
            raise SpecError("arrival rates must be >= 0 and service rates > 0")
        if self.kind is Kind.MNM1 and len(lam) != caps[0] + 1:
            raise SpecError(f"mnm1 needs capacity+1 = {caps[0] + 1} arrival rates, got {len(lam)}")
        if self.kind is not Kind.MNM1 and len(lam) != 1:
            raise SpecError(f"{self.kind.value} takes a single arrival rate, got {len(lam)}")
        if self.kind is Kind.MNM1 and np.all(lam[:-1] == 0):
            raise SpecError("every arrival rate below capacity is zero")
        if self.kind is not Kind.MNM1 and lam[0] == 0:
            raise SpecError("arrival rate is zero")
        if self.covariate_dim < 1:
            raise SpecError("covariate_dim must be positive")
        if self.fixed_admission is not None:
            if self.kind is Kind.PARALLEL:
                raise SpecError("fixed_admission applies to single-queue kinds only")
            if not 0.0 <= self.fixed_admission <= 1.0:
                raise SpecError("fixed_admission must lie in [0, 1]")

    @property
    def single_queue(self) -> bool:
        return self.kind is not Kind.PARALLEL

    def lam(self, k: int) -> float:
        """Arrival rate at queue length ``k`` (before the capacity cut-off)."""
        if self.kind is Kind.MNM1:
            return self.arrival_rates[k]
        return self.arrival_rates[0]

    def with_rates(self, arrival_rates: Sequence[float], service_rates: Sequence[float]) -> "SystemSpec":
        return dataclasses.replace(self, arrival_rates=tuple(arrival_rates), service_rates=tuple(service_rates))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        for key in ("arrival_rates", "service_rates", "capacities"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown system fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def state_space(self) -> "StateSpace":
        return StateSpace(self)


def load_spec(path: str | Path) -> SystemSpec:
    """Load a ``SystemSpec`` from a JSON config; a top-level ``system`` key is honoured."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    if "system" in raw:
        raw = raw["system"]
    return SystemSpec.from_dict(raw)


def mnm1_example(capacity: int = 20, **overrides) -> SystemSpec:
    """State-dependent arrivals ``2/(k+1)^0.1``, unit service, 10-d covariates."""
    lam = [2.0 / (k + 1) ** 0.1 for k in range(capacity)] + [0.0]
    kw = dict(kind=Kind.MNM1, arrival_rates=lam, service_rates=(1.0,), capacities=(capacity,),
              covariate_dim=10, outcome_model="mnm1_example", logging_policy="mnm1_logging",
              name="mnm1_example")
    kw.update(overrides)
    return SystemSpec(**kw)


def parallel_example(mu_fast: float = 1.0, **overrides) -> SystemSpec:
    """Regular queue (cap 10, rate 0.5) beside a fast track (cap 3, rate ``mu_fast``)."""
    kw = dict(kind=Kind.PARALLEL, arrival_rates=(1.0,), service_rates=(0.5, mu_fast), capacities=(10, 3),
              covariate_dim=10, outcome_model="parallel_example", logging_policy="parallel_logging",
              name="parallel_example")
    kw.update(overrides)
    return SystemSpec(**kw)


@dataclass
class StateSpace:
    """Flat enumeration of queue configurations with per-state event rates.

    Single queue: state ``s`` is the queue length ``k``. Parallel: ``s = k0 *
    (cap1 + 1) + k1``. ``rates[s, a]`` is the rate of event ``a`` while the
    system sits in ``s``; ``next_treated``/``next_control`` give the state after
    an arrival under ``W = 1``/``W = 0`` (capacity and forced routing applied).
    """

    spec: SystemSpec
    labels: list = field(init=False)
    rates: np.ndarray = field(init=False)
    next_treated: np.ndarray = field(init=False)
    next_control: np.ndarray = field(init=False)
    next_service: np.ndarray = field(init=False)

    def __post_init__(self):
        spec = self.spec
        if spec.single_queue:
            cap = spec.capacities[0]
            mu = spec.service_rates[0]
            self.labels = list(range(cap + 1))
            n = cap + 1
            self.rates = np.zeros((n, 3))
            self.next_treated = np.arange(n)
            self.next_control = np.arange(n)
            self.next_service = np.full((n, 3), -1)
            for k in range(n):
                self.rates[k, Event.ARRIVAL] = spec.lam(k) if k < cap else 0.0
                self.rates[k, Event.SERVICE_Q0] = mu if k > 0 else 0.0
                if k < cap:
                    self.next_treated[k] = k + 1
                if k > 0:
                    self.next_service[k, Event.SERVICE_Q0] = k - 1
        else:
            c0, c1 = spec.capacities
            mu0, mu1 = spec.service_rates
            lam = spec.arrival_rates[0]
            self.labels = [(k0, k1) for k0 in range(c0 + 1) for k1 in range(c1 + 1)]
            n = len(self.labels)
            self.rates = np.zeros((n, 3))
            self.next_treated = np.arange(n)
            self.next_control = np.arange(n)
            self.next_service = np.full((n, 3), -1)
            for s, (k0, k1) in enumerate(self.labels):
                both_full = k0 == c0 and k1 == c1
                self.rates[s] = (0.0 if both_full else lam, mu0 if k0 > 0 else 0.0, mu1 if k1 > 0 else 0.0)
                if not both_full:
                    fast = self.index((k0, k1 + 1)) if k1 < c1 else self.index((k0 + 1, k1))
                    slow = self.index((k0 + 1, k1)) if k0 < c0 else self.index((k0, k1 + 1))
                    self.next_treated[s], self.next_control[s] = fast, slow
                if k0 > 0:
                    self.next_service[s, Event.SERVICE_Q0] = self.index((k0 - 1, k1))
                if k1 > 0:
                    self.next_service[s, Event.SERVICE_Q1] = self.index((k0, k1 - 1))
        self.total_rate = self.rates.sum(axis=1)
        self.arrival_states = np.flatnonzero(self.rates[:, Event.ARRIVAL] > 0)
        # states where the treatment changes the transition (and hence matters for the policy)
        self.decision_states = self.arrival_states[
            self.next_treated[self.arrival_states] != self.next_control[self.arrival_states]
        ]
        if spec.fixed_admission is not None:
            self.decision_states = self.arrival_states.copy()

    @property
    def n_states(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        if self.spec.single_queue:
            k = int(label[0]) if isinstance(label, (tuple, list)) else int(label)
            if not 0 <= k <= self.spec.capacities[0]:
                raise SpecError(f"queue length {k} outside 0..{self.spec.capacities[0]}")
            return k
        k0, k1 = (int(v) for v in label)
        c0, c1 = self.spec.capacities
        if not (0 <= k0 <= c0 and 0 <= k1 <= c1):
            raise SpecError(f"state {(k0, k1)} outside capacity {(c0, c1)}")
        return k0 * (c1 + 1) + k1

    def queue_lengths(self, states: np.ndarray) -> np.ndarray:
        """``(n, n_queues)`` integer array of queue lengths for flat state indices."""
        states = np.asarray(states, dtype=int)
        if self.spec.single_queue:
            return states[:, None]
        c1 = self.spec.capacities[1]
        return np.stack([states // (c1 + 1), states % (c1 + 1)], axis=1)

    def event_probs(self, s: int) -> np.ndarray:
        if self.total_rate[s] <= 0:
            raise SpecError(f"state {self.labels[s]} has no active event")
        return self.rates[s] / self.total_rate[s]

    def augmented(self) -> list[tuple[int, int]]:
        """Reachable augmented states ``(event, s)``: pairs with a positive event rate."""
        return [(a, s) for s in range(self.n_states) for a in range(3) if self.rates[s, a] > 0]
