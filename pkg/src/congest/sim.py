"""Discrete-event simulation of the admission and routing systems.

Trajectories are stored column-wise; ``EventRecord`` is a row view. Each
simulation owns two independent random streams (event clock and per-arrival
draws) spawned from the seed, so results are bit-identical for a fixed seed.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dgp import outcome_model_for
from .policy import LoggingPolicy, Policy
from .systems import NO_ACTION, Event, SpecError, StateSpace, SystemSpec

BLOCK = 8192


@dataclass(frozen=True)
class Horizon:
    """Stop after ``n_events`` events, ``n_arrivals`` arrivals, or time ``time``."""

    n_events: int | None = None
    time: float | None = None
    n_arrivals: int | None = None

    def __post_init__(self):
        given = [v for v in (self.n_events, self.time, self.n_arrivals) if v is not None]
        if len(given) != 1:
            raise SpecError("horizon needs exactly one of n_events, time, n_arrivals")
        if given[0] <= 0:
            raise SpecError(f"horizon must be positive, got {given[0]}")

    def to_dict(self):
        return {k: v for k, v in (("n_events", self.n_events), ("time", self.time),
                                  ("n_arrivals", self.n_arrivals)) if v is not None}


@dataclass
class EventRecord:
    i: int
    t: float
    dt: float
    a: int
    x: np.ndarray | None
    state: object
    w: int
    r: float
    wait: float
    svc: float


@dataclass
class ArrivalData:
    """Arrival-level view used by the estimators (one row per arrival)."""

    index: np.ndarray
    X: np.ndarray
    s: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.index)

    def subset(self, mask) -> "ArrivalData":
        return ArrivalData(self.index[mask], self.X[mask], self.s[mask], self.w[mask], self.y[mask])


@dataclass
class Trajectory:
    spec: SystemSpec
    seed: int
    horizon: Horizon
    t: np.ndarray
    dt: np.ndarray
    a: np.ndarray
    x: np.ndarray
    s: np.ndarray
    w: np.ndarray
    r: np.ndarray
    wait: np.ndarray
    svc: np.ndarray
    end_time: float = 0.0
    fingerprint: str = field(default="")

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.spec.fingerprint()

    def __len__(self):
        return len(self.t)

    @property
    def space(self) -> StateSpace:
        return self.spec.state_space()

    def record(self, j: int) -> EventRecord:
        lab = self.space.labels[self.s[j]]
        arrival = self.a[j] == Event.ARRIVAL
        return EventRecord(j + 1, float(self.t[j]), float(self.dt[j]), int(self.a[j]),
                           self.x[j].copy() if arrival else None, lab, int(self.w[j]),
                           float(self.r[j]), float(self.wait[j]), float(self.svc[j]))

    def records(self) -> Iterator[EventRecord]:
        for j in range(len(self)):
            yield self.record(j)

    def arrivals(self, mask: np.ndarray | None = None, require_reward: bool = True) -> ArrivalData:
        keep = self.a == Event.ARRIVAL
        if mask is not None:
            keep &= mask
        if require_reward:
            keep &= np.isfinite(self.r)
        idx = np.flatnonzero(keep)
        return ArrivalData(idx, self.x[idx], self.s[idx], self.w[idx], self.r[idx])

    def total_time(self) -> float:
        return float(self.horizon.time) if self.horizon.time is not None else float(self.end_time)

    def time_average_reward(self) -> float:
        """Total recorded reward per unit time."""
        r = self.r[self.a == Event.ARRIVAL]
        return float(np.nansum(r) / self.total_time())

    def time_average_queue(self) -> float:
        q = self.space.queue_lengths(self.s).sum(axis=1)
        return float(np.sum(self.dt * q) / np.sum(self.dt))


def _join_queue(space: StateSpace, s: int, nxt: int) -> int:
    """Index of the queue an arrival joins when moving ``s -> nxt`` (-1 if rejected)."""
    if nxt == s:
        return -1
    if space.spec.single_queue:
        return 0
    before, after = space.queue_lengths(np.array([s, nxt]))
    return 1 if after[1] > before[1] else 0


def simulate(spec: SystemSpec, policy: Policy | None = None, horizon: Horizon | None = None,
             seed: int = 0, *, n_events: int | None = None, time: float | None = None,
             n_arrivals: int | None = None) -> Trajectory:
    """Simulate the embedded event chain of ``spec`` under ``policy``.

    Gaps are exponential with the total rate at the current configuration; the
    event type is then drawn from the competing rates. Arrivals see covariates
    ``N(0, I_d)``, a treatment drawn from the policy, and join the queue the
    treatment (or forced routing) sends them to. Service is FIFO; each served
    customer's wait and service time are recorded and delay-sensitive rewards
    are back-filled onto the arrival record. Customers still in the system at
    the horizon keep ``NaN`` reward, wait and service.
    """
    if horizon is None:
        horizon = Horizon(n_events=n_events, time=time, n_arrivals=n_arrivals)
    if policy is None:
        policy = LoggingPolicy(spec.logging_policy)
    space = spec.state_space()
    policy.check_space(space)
    outcome = outcome_model_for(spec)
    n_st = space.n_states
    d = spec.covariate_dim

    clock_rng, unit_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    rate_arr = space.rates[:, Event.ARRIVAL].tolist()
    rate_s0 = space.rates[:, Event.SERVICE_Q0].tolist()
    total = space.total_rate.tolist()
    nt = space.next_treated.tolist()
    nc = space.next_control.tolist()
    ns0 = space.next_service[:, Event.SERVICE_Q0].tolist()
    ns1 = space.next_service[:, Event.SERVICE_Q1].tolist()
    jq_t = [_join_queue(space, s, nt[s]) for s in range(n_st)]
    jq_c = [_join_queue(space, s, nc[s]) for s in range(n_st)]
    fixed = spec.fixed_admission

    max_events = horizon.n_events if horizon.n_events is not None else float("inf")
    max_arrivals = horizon.n_arrivals if horizon.n_arrivals is not None else float("inf")
    t_end = horizon.time if horizon.time is not None else float("inf")

    ts, dts, evs, sts, ws = [], [], [], [], []
    arr_rows = []  # event index of each arrival
    Xs, noises = [], []
    arrival_time = {}
    wait = {}
    svc = {}
    queues = (deque(), deque())
    last_dep = [0.0, 0.0]

    pool_X = pool_p = pool_u = pool_j = None
    pool_pos = BLOCK

    s = 0
    t = 0.0
    n = 0
    n_arr = 0
    done = False
    while not done:
        gaps = clock_rng.standard_exponential(BLOCK).tolist()
        picks = clock_rng.random(BLOCK).tolist()
        for g, u in zip(gaps, picks):
            nu = total[s]
            if nu <= 0:
                raise SpecError(f"state {space.labels[s]} has no active event")
            dt = g / nu
            t += dt
            if t > t_end:
                done = True
                break
            x = u * nu
            if x < rate_arr[s]:
                a = 0
            elif x < rate_arr[s] + rate_s0[s]:
                a = 1
            else:
                a = 2
            ts.append(t)
            dts.append(dt)
            evs.append(a)
            sts.append(s)
            if a == 0:
                if pool_pos == BLOCK:
                    pool_X = unit_rng.standard_normal((BLOCK, d))
                    table = policy.prob_table(pool_X, n_st)
                    pool_u = unit_rng.random(BLOCK).tolist()
                    pool_j = unit_rng.random(BLOCK).tolist()
                    noises.append(unit_rng.standard_normal(BLOCK) * outcome.noise_sd)
                    Xs.append(pool_X)
                    pool_p = table.tolist()
                    pool_pos = 0
                w = 1 if pool_u[pool_pos] < pool_p[pool_pos][s] else 0
                joined = w if fixed is None else (1 if pool_j[pool_pos] < fixed else 0)
                pool_pos += 1
                ws.append(w)
                nxt = nt[s] if joined else nc[s]
                q = jq_t[s] if joined else jq_c[s]
                if q >= 0:
                    queues[q].append(n)
                    arrival_time[n] = t
                else:
                    wait[n] = 0.0
                    svc[n] = 0.0
                arr_rows.append(n)
                n_arr += 1
            else:
                ws.append(NO_ACTION)
                q = a - 1
                cust = queues[q].popleft()
                start = max(arrival_time.pop(cust), last_dep[q])
                wait[cust] = start - ts[cust]
                svc[cust] = t - start
                last_dep[q] = t
                nxt = ns0[s] if a == 1 else ns1[s]
            s = nxt
            n += 1
            if n >= max_events or n_arr >= max_arrivals:
                done = True
                break

    n_total = len(ts)
    a_arr = np.array(evs, dtype=np.int8)
    s_arr = np.array(sts, dtype=np.int64)
    w_arr = np.array(ws, dtype=np.int8)
    X_all = np.full((n_total, d), np.nan)
    r_all = np.full(n_total, np.nan)
    wait_all = np.full(n_total, np.nan)
    svc_all = np.full(n_total, np.nan)
    rows = np.array(arr_rows, dtype=np.int64)
    if len(rows):
        X_all[rows] = np.concatenate(Xs)[: len(rows)]
        noise = np.concatenate(noises)[: len(rows)]
        for idx, v in wait.items():
            wait_all[idx] = v
        for idx, v in svc.items():
            svc_all[idx] = v
        served = np.isfinite(wait_all[rows])
        y = outcome.outcome(X_all[rows], space.queue_lengths(s_arr[rows]), w_arr[rows],
                            np.nan_to_num(wait_all[rows]), np.nan_to_num(svc_all[rows]), noise)
        if outcome.delay_sensitive:
            y = np.where(served, y, np.nan)
        r_all[rows] = y
    non_arrival = a_arr != Event.ARRIVAL
    r_all[non_arrival] = 0.0
    return Trajectory(spec, int(seed), horizon, np.array(ts), np.array(dts), a_arr, X_all, s_arr, w_arr,
                      r_all, wait_all, svc_all, end_time=float(ts[-1]) if ts else 0.0)


def validate_trajectory(traj: Trajectory) -> int:
    """Number of consecutive-record transitions that are impossible under the kernel."""
    space = traj.space
    a, s, w = traj.a, traj.s, traj.w
    bad = 0
    if np.any(traj.dt <= 0) or np.any(np.diff(traj.t) <= 0):
        bad += int(np.sum(traj.dt <= 0) + np.sum(np.diff(traj.t) <= 0))
    bad += int(np.sum(space.rates[s, a] <= 0))
    bad += int(np.sum((a == Event.ARRIVAL) != (w != NO_ACTION)))
    fixed = traj.spec.fixed_admission is not None
    for j in range(len(traj) - 1):
        nxt = s[j + 1]
        if a[j] == Event.ARRIVAL:
            if fixed:
                ok = nxt in (space.next_treated[s[j]], space.next_control[s[j]])
            else:
                ok = nxt == (space.next_treated[s[j]] if w[j] == 1 else space.next_control[s[j]])
        else:
            ok = nxt == space.next_service[s[j], a[j]]
        bad += not ok
    return bad


# serialization-------------------------------------------------------------------------

def _num(v):
    v = float(v)
    return None if not np.isfinite(v) else v


def write_jsonl(traj: Trajectory, path: str | Path) -> None:
    """One header line, then one event per line (``k`` or ``k0``/``k1`` for the state)."""
    space = traj.space
    qlen = space.queue_lengths(traj.s)
    header = {"header": True, "fingerprint": traj.fingerprint, "seed": traj.seed,
              "horizon": traj.horizon.to_dict(), "end_time": traj.end_time, "spec": traj.spec.to_dict()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for j in range(len(traj)):
            arrival = traj.a[j] == Event.ARRIVAL
            rec = {"i": j + 1, "t": float(traj.t[j]), "dt": float(traj.dt[j]), "a": int(traj.a[j]),
                   "x": traj.x[j].tolist() if arrival else None}
            if traj.spec.single_queue:
                rec["k"] = int(qlen[j, 0])
            else:
                rec["k0"], rec["k1"] = int(qlen[j, 0]), int(qlen[j, 1])
            rec.update(w=int(traj.w[j]), r=_num(traj.r[j]), wait=_num(traj.wait[j]), svc=_num(traj.svc[j]))
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> Trajectory:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if not header.get("header"):
            raise SpecError(f"{path}: missing trajectory header line")
        spec = SystemSpec.from_dict(header["spec"])
        if spec.fingerprint() != header["fingerprint"]:
            raise SpecError(f"{path}: spec fingerprint mismatch")
        recs = [json.loads(line) for line in fh if line.strip()]
    space = spec.state_space()
    d = spec.covariate_dim
    n = len(recs)

    def col(key, dtype=float):
        return np.array([np.nan if r[key] is None else r[key] for r in recs], dtype=dtype)

    X = np.full((n, d), np.nan)
    for j, r in enumerate(recs):
        if r["x"] is not None:
            X[j] = r["x"]
    if spec.single_queue:
        s = np.array([space.index(r["k"]) for r in recs], dtype=np.int64)
    else:
        s = np.array([space.index((r["k0"], r["k1"])) for r in recs], dtype=np.int64)
    return Trajectory(spec, header["seed"], Horizon(**header["horizon"]), col("t"), col("dt"),
                      col("a", np.int8), X, s, col("w", np.int8), col("r"), col("wait"), col("svc"),
                      end_time=header.get("end_time", 0.0), fingerprint=header["fingerprint"])


def event_summary(traj: Trajectory) -> dict:
    counts = {Event(e).name: int(np.sum(traj.a == e)) for e in Event}
    occupancy = np.bincount(traj.s, minlength=traj.space.n_states)
    return {"events": len(traj), "by_type": counts,
            "occupancy": {str(lab): int(c) for lab, c in zip(traj.space.labels, occupancy) if c}}
