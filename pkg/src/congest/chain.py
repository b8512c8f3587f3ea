"""Embedded-chain transition kernels and stationary distributions.

The augmented state is ``(event, s)``: the type of the event just observed and
the queue configuration seen at that epoch, before the event takes effect.
Given ``(event, s)`` and the mean treatment probability ``pbar[s]`` the next
configuration is determined, and the next event type is drawn from the
competing rates at that configuration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .systems import Event, Kind, SpecError, StateSpace, SystemSpec

ROW_TOL = 1e-12
INVARIANCE_TOL = 1e-10


class ReducibleChainError(ValueError):
    pass


def event_type_dist(k: int, lam, mu: float, capacity: int) -> tuple[float, float]:
    """``(P(arrival), P(service))`` at queue length ``k`` of a single queue."""
    lam_k = float(np.atleast_1d(lam)[k] if np.ndim(lam) else lam)
    if not 0 <= k <= capacity:
        raise SpecError(f"queue length {k} outside 0..{capacity}")
    a = lam_k if k < capacity else 0.0
    s = mu if k > 0 else 0.0
    if a + s <= 0:
        raise SpecError(f"queue length {k} has no active event")
    return a / (a + s), s / (a + s)


@dataclass
class TransitionKernel:
    states: list[tuple[int, int]]
    matrix: np.ndarray
    space: StateSpace

    def __post_init__(self):
        self.index = {st: i for i, st in enumerate(self.states)}

    @property
    def n(self) -> int:
        return len(self.states)

    def labels(self) -> list[str]:
        return [f"{Event(a).name}@{self.space.labels[s]}" for a, s in self.states]


@dataclass
class StationaryDist:
    """Probability over augmented states, with helpers for the usual marginals."""

    states: list[tuple[int, int]]
    probs: np.ndarray
    space: StateSpace

    def queue_marginal(self) -> np.ndarray:
        out = np.zeros(self.space.n_states)
        for (_, s), p in zip(self.states, self.probs):
            out[s] += p
        return out

    def arrival_mass(self) -> np.ndarray:
        """Joint mass ``d(arrival, s)`` per queue configuration."""
        out = np.zeros(self.space.n_states)
        for (a, s), p in zip(self.states, self.probs):
            if a == Event.ARRIVAL:
                out[s] += p
        return out

    def expected_gap(self) -> float:
        """Mean inter-event gap under this law: ``sum_s d(s) / total_rate(s)``."""
        marg = self.queue_marginal()
        live = self.space.total_rate > 0
        return float(np.sum(marg[live] / self.space.total_rate[live]))


class KernelFactory:
    """Precomputes the all-treat and all-control kernels of a system.

    Every kernel is affine in the mean-policy profile, so a kernel for any
    profile is ``P0 + diag(pbar on arrival rows) (P1 - P0)``.
    """

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.space = spec.state_space()
        self.states = self.space.augmented()
        self.index = {st: i for i, st in enumerate(self.states)}
        n = len(self.states)
        self.p_treated = np.zeros((n, n))
        self.p_control = np.zeros((n, n))
        next_event = {}
        for s in range(self.space.n_states):
            if self.space.total_rate[s] > 0:
                next_event[s] = self.space.event_probs(s)
        self.arrival_rows = np.zeros(n, dtype=bool)
        self.row_state = np.zeros(n, dtype=int)
        for i, (a, s) in enumerate(self.states):
            self.row_state[i] = s
            if a == Event.ARRIVAL:
                self.arrival_rows[i] = True
                targets = ((self.p_treated, self.space.next_treated[s]), (self.p_control, self.space.next_control[s]))
            else:
                nxt = self.space.next_service[s, a]
                targets = ((self.p_treated, nxt), (self.p_control, nxt))
            for mat, nxt in targets:
                probs = next_event[nxt]
                for a2 in range(3):
                    if probs[a2] > 0:
                        mat[i, self.index[(a2, nxt)]] += probs[a2]
        self.delta = self.p_treated - self.p_control

    def kernel(self, profile) -> TransitionKernel:
        pbar = _check_profile(self.space, profile)
        if self.spec.fixed_admission is not None:
            pbar = np.full(self.space.n_states, self.spec.fixed_admission)
        weights = np.where(self.arrival_rows, pbar[self.row_state], 0.0)
        mat = self.p_control + weights[:, None] * self.delta
        return TransitionKernel(list(self.states), mat, self.space)

    def stationary(self, profile, check: bool = True) -> StationaryDist:
        if self.spec.single_queue:
            return augmented_from_marginal(self.space, stationary_closed_form(self.spec, profile))
        return stationary_solve(self.kernel(profile), check=check)


def _check_profile(space: StateSpace, profile) -> np.ndarray:
    pbar = np.asarray(profile, dtype=float)
    if pbar.shape != (space.n_states,):
        raise SpecError(f"profile has shape {pbar.shape}, system has {space.n_states} states")
    if np.any(pbar < 0) or np.any(pbar > 1) or not np.all(np.isfinite(pbar)):
        raise SpecError("profile entries must lie in [0, 1]")
    return pbar


def build_kernel(spec: SystemSpec, profile) -> TransitionKernel:
    """Row-stochastic embedded-chain kernel under mean policy ``profile[s]``."""
    return KernelFactory(spec).kernel(profile)


def stationary_closed_form(spec: SystemSpec, profile) -> np.ndarray:
    """Queue-length marginal ``d(k)`` of a single queue from the product formula.

    ``r_0 = 1``, ``r_k = ((lam_k + mu) pbar_0 / mu) prod_{m=1}^{k-1} lam_m pbar_m / mu``
    for ``1 <= k < cap``, and ``r_cap = pbar_0 prod_{m=1}^{cap-1} lam_m pbar_m / mu``.
    """
    if not spec.single_queue:
        raise SpecError("closed-form stationary distribution is for single-queue systems")
    space = spec.state_space()
    pbar = _check_profile(space, profile)
    if spec.fixed_admission is not None:
        pbar = np.full(space.n_states, spec.fixed_admission)
    cap = spec.capacities[0]
    mu = spec.service_rates[0]
    lam = np.array([spec.lam(k) for k in range(cap + 1)])
    if lam[0] <= 0:
        raise SpecError("closed form needs a positive arrival rate at the empty queue")
    r = np.zeros(cap + 1)
    r[0] = 1.0
    prod = 1.0
    for k in range(1, cap + 1):
        if k >= 2:
            prod *= lam[k - 1] * pbar[k - 1] / mu
        if k < cap:
            r[k] = (lam[k] + mu) * pbar[0] / mu * prod
        else:
            r[k] = pbar[0] * prod
    return r / r.sum()


def augmented_from_marginal(space: StateSpace, marginal: np.ndarray) -> StationaryDist:
    """``d(a, s) = d(s) f(a | s)``."""
    states = space.augmented()
    probs = np.array([marginal[s] * space.rates[s, a] / space.total_rate[s] for a, s in states])
    return StationaryDist(states, probs, space)


def closed_classes(matrix: np.ndarray) -> list[np.ndarray]:
    """Recurrent (closed communicating) classes of a stochastic matrix."""
    adj = matrix > 0
    n_comp, comp = connected_components(adj, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        outside = np.ones(len(matrix), dtype=bool)
        outside[members] = False
        if not adj[np.ix_(members, outside)].any():
            closed.append(members)
    return closed


def stationary_solve(kernel: TransitionKernel, check: bool = True) -> StationaryDist:
    """Solve ``d P = d``, ``sum d = 1`` directly, falling back to power iteration."""
    P = kernel.matrix
    n = len(P)
    if check:
        classes = closed_classes(P)
        if len(classes) > 1:
            names = [[kernel.labels()[i] for i in c] for c in classes]
            raise ReducibleChainError(f"kernel has {len(classes)} recurrent classes: {names}")
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        d = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        d = None
    if d is None or np.max(np.abs(d @ P - d)) > INVARIANCE_TOL or np.any(d < -1e-12):
        d = _power_iteration(P)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return StationaryDist(list(kernel.states), d, kernel.space)


def _power_iteration(P: np.ndarray, tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    # lazy chain avoids periodicity
    Q = 0.5 * (P + np.eye(len(P)))
    d = np.full(len(P), 1.0 / len(P))
    for _ in range(max_iter):
        nxt = d @ Q
        if np.max(np.abs(nxt - d)) < tol:
            return nxt
        d = nxt
    return d


def arrival_conditioned(d: StationaryDist) -> np.ndarray:
    """``P(S = s | event is an arrival)`` per queue configuration."""
    mass = d.arrival_mass()
    total = mass.sum()
    if total <= 0:
        raise SpecError("stationary law puts no mass on arrivals")
    return mass / total


def stationary(spec: SystemSpec, profile) -> StationaryDist:
    """Closed form for single queues, linear solve for parallel routing."""
    return KernelFactory(spec).stationary(profile)


def write_csv(path: str | Path, labels, columns: dict[str, np.ndarray], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["state", *columns])
        for i, lab in enumerate(labels):
            w.writerow([lab, *(repr(float(col[i])) for col in columns.values())])


def export_distribution(path: str | Path, d: StationaryDist, spec: SystemSpec | None = None) -> None:
    """One row per queue configuration: queue marginal, arrival-conditioned mass."""
    labels = [str(lab) if not isinstance(lab, tuple) else f"{lab[0]}-{lab[1]}" for lab in d.space.labels]
    cols = {"marginal": d.queue_marginal(), "arrival_conditioned": arrival_conditioned(d),
            "arrival_joint": d.arrival_mass()}
    write_csv(path, labels, cols, comment=f"spec={spec.fingerprint()}" if spec else None)


def export_kernel(path: str | Path, kernel: TransitionKernel) -> None:
    labels = kernel.labels()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", *labels])
        for lab, row in zip(labels, kernel.matrix):
            w.writerow([lab, *(repr(float(v)) for v in row)])


def mean_queue_length(spec: SystemSpec, d: StationaryDist) -> float:
    marg = d.queue_marginal()
    q = spec.state_space().queue_lengths(np.arange(len(marg))).sum(axis=1)
    return float(marg @ q)


__all__ = [
    "Kind", "event_type_dist", "build_kernel", "stationary_closed_form", "stationary_solve",
    "arrival_conditioned", "stationary", "KernelFactory", "TransitionKernel", "StationaryDist",
]
