"""Grid search over per-state treated shares, scored by off-policy evaluation.

For each candidate ``g`` the threshold policy treating the top ``g_s`` share of
predicted CADEs at every state is scored on the evaluation split. Candidates
are integer vectors ``b`` with ``g = b / B``; searches are expressed against a
generic scoring callable so they can be tested on synthetic tables.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .cade import ReferenceTable, RegenerationSplit, TLearner, fit_cade, regeneration_split, tie_threshold
from .chain import KernelFactory
from .oracle import ORDERINGS, default_objective, default_ordering
from .ope import EvalData, NuisanceSet, Rates, estimate_rates, fit_nuisances
from .policy import DirectRule, LoggingPolicy, Policy, ThresholdRule
from .sim import Trajectory
from .systems import SpecError, SystemSpec

log = logging.getLogger(__name__)

MODES = ("auto", "full", "coordinate", "monotone")
MODE_ALIASES = {"fullproduct": "full", "coordinateascent": "coordinate", "monotoneparam": "monotone"}


class EmptyCandidateSet(ValueError):
    pass


@dataclass
class LearnConfig:
    B: int = 10
    mode: str = "auto"
    objective: str | None = None
    estimator: str = "auto"
    anchor: tuple[int, int] | None = None
    seed: int = 0
    train_fraction: float = 0.5
    ordering: str | None = None
    knots: tuple[float, ...] = (0.0, 0.15, 1.0)
    reference_size: int | None = 2000
    state_reference: bool = False
    known_propensity: bool = False
    clip: float = 0.05
    max_flagged_mass: float = 0.01
    max_sweeps: int = 20
    max_candidates: int = 1_000_000
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(str(self.mode).lower(), str(self.mode).lower())
        if self.mode not in MODES:
            raise SpecError(f"unknown search mode {self.mode!r}; choose from {MODES}")
        if self.B < 2:
            raise SpecError("grid resolution B must be at least 2")
        if self.ordering is not None and self.ordering not in ORDERINGS:
            raise SpecError(f"unknown ordering {self.ordering!r}")
        if self.anchor is not None:
            self.anchor = tuple(int(v) for v in self.anchor)
        self.knots = tuple(float(k) for k in self.knots)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown learner config keys {sorted(unknown)}")
        return cls(**d)


# searches over integer grids------------------------------------------------------------

ScoreFn = Callable[[tuple[int, ...]], tuple[float, float]]


@dataclass
class SearchResult:
    best: tuple[int, ...] | None
    value: float
    table: list[dict]
    history: list[float] = field(default_factory=list)


class _Tracker:
    """Keeps the value table and the running argmax with lexicographic tie-break."""

    def __init__(self, score: ScoreFn, max_flagged_mass: float):
        self.score = score
        self.max_flagged = max_flagged_mass
        self.cache: dict[tuple[int, ...], tuple[float, float]] = {}
        self.best: tuple[int, ...] | None = None
        self.best_value = -np.inf

    def __call__(self, b: tuple[int, ...]) -> float:
        b = tuple(int(v) for v in b)
        if b not in self.cache:
            self.cache[b] = tuple(float(v) for v in self.score(b))
            value, flagged = self.cache[b]
            if flagged <= self.max_flagged and np.isfinite(value):
                if value > self.best_value or (value == self.best_value and b < self.best):
                    self.best, self.best_value = b, value
        value, flagged = self.cache[b]
        return value if flagged <= self.max_flagged else -np.inf

    def result(self, B: int, history=None) -> SearchResult:
        if self.best is None:
            raise EmptyCandidateSet("no grid point survived the flagged-mass filter")
        table = [{"g": tuple(v / B for v in b), "b": b, "value": v, "flagged_mass": f,
                  "excluded": f > self.max_flagged} for b, (v, f) in self.cache.items()]
        return SearchResult(self.best, self.best_value, table, history or [])


def search_full(score: ScoreFn, n_dims: int, B: int, max_flagged_mass: float = 0.01,
                max_candidates: int = 1_000_000) -> SearchResult:
    size = (B - 1) ** n_dims
    if size > max_candidates:
        raise SpecError(f"full product grid has {size} points (limit {max_candidates}); use coordinate or monotone")
    tr = _Tracker(score, max_flagged_mass)
    for b in itertools.product(range(1, B), repeat=n_dims):
        tr(b)
    return tr.result(B)


def search_coordinate(score: ScoreFn, n_dims: int, B: int, max_flagged_mass: float = 0.01, max_sweeps: int = 20,
                      start: Iterable[int] | None = None) -> SearchResult:
    """Coordinate ascent from the best constant vector (or ``start``) until a sweep changes nothing."""
    tr = _Tracker(score, max_flagged_mass)
    if start is None:
        for v in range(1, B):
            tr((v,) * n_dims)
        if tr.best is None:
            raise EmptyCandidateSet("no constant grid point survived the flagged-mass filter")
        cur = list(tr.best)
    else:
        cur = [int(v) for v in start]
        tr(tuple(cur))
    history = [tr.best_value]
    for _ in range(max_sweeps):
        changed = False
        for i in range(n_dims):
            best_v, best_b = tr(tuple(cur)), cur[i]
            for v in range(1, B):
                cand = cur.copy()
                cand[i] = v
                val = tr(tuple(cand))
                if val > best_v or (val == best_v and v < best_b):
                    best_v, best_b = val, v
            if best_b != cur[i]:
                cur[i] = best_b
                changed = True
        history.append(tr.best_value)
        if not changed:
            break
    return tr.result(B, history)


def monotone_candidates(n_dims: int, B: int, knots=(0.0, 0.15, 1.0), ordering: str = "nonincreasing"
                        ) -> list[tuple[int, ...]]:
    """Grid vectors from piecewise-linear interpolation of knot values, rounded to the grid.

    Knot positions are fractions of the decision-state range; knot values run
    over ``1..B-1`` subject to the ordering constraint, which rounding preserves.
    """
    pos = np.asarray(knots, dtype=float) * max(n_dims - 1, 0)
    if np.any(np.diff(pos) < 0) or pos[0] != 0 or len(pos) < 2:
        raise SpecError("knots must be increasing fractions starting at 0")
    out = set()
    for vals in itertools.product(range(1, B), repeat=len(pos)):
        diffs = np.diff(vals)
        if ordering == "nonincreasing" and np.any(diffs > 0):
            continue
        if ordering == "nondecreasing" and np.any(diffs < 0):
            continue
        g = np.floor(np.interp(np.arange(n_dims), pos, vals) + 0.5).astype(int)
        out.add(tuple(int(v) for v in g))
    return sorted(out)


def search_monotone(score: ScoreFn, n_dims: int, B: int, knots=(0.0, 0.15, 1.0), ordering: str = "nonincreasing",
                    max_flagged_mass: float = 0.01) -> SearchResult:
    tr = _Tracker(score, max_flagged_mass)
    for b in monotone_candidates(n_dims, B, knots, ordering):
        tr(b)
    return tr.result(B)


# scoring on the evaluation split---------------------------------------------------------

class Scorer:
    """Precomputed DR ingredients for scoring threshold policies on an evaluation split.

    Per arrival state and share ``g`` it caches the reference thresholds, the
    mean treatment probability and the DR state value, so a candidate costs one
    stationary-law computation.
    """

    def __init__(self, spec: SystemSpec, model, nuis: NuisanceSet, data: EvalData, reference_X: np.ndarray,
                 objective: str, reference_states: np.ndarray | None = None):
        self.spec = spec
        self.space = spec.state_space()
        self.objective = objective
        self.model = model
        est, rate_flags = nuis.rates.to_spec(spec)
        self.factory = KernelFactory(est)
        est_space = self.factory.space
        self.reference_X = reference_X
        if hasattr(model, "predict_arms_table"):
            self.m0_ref, self.m1_ref = model.predict_arms_table(reference_X)
        else:
            ns = self.space.n_states
            self.m0_ref = np.stack([nuis.eta(reference_X, np.full(len(reference_X), s), 0) for s in range(ns)], 1)
            self.m1_ref = np.stack([nuis.eta(reference_X, np.full(len(reference_X), s), 1) for s in range(ns)], 1)
        self.tau_ref = self.m1_ref - self.m0_ref
        self.reference = ReferenceTable(model, reference_X, reference_states, tau_table=self.tau_ref)
        arr = data.arrivals
        self.eval_s = arr.s
        self.eta0 = nuis.eta(arr.X, arr.s, 0)
        self.eta1 = nuis.eta(arr.X, arr.s, 1)
        self.tau_eval = model.predict(arr.X, arr.s) if not hasattr(model, "predict_arms_table") else self.eta1 - self.eta0
        p1 = nuis.prop1(arr.X, arr.s)
        w, y = arr.w.astype(float), arr.y
        # pseudo-outcome pieces: term = pi1 * A1 + (1 - pi1) * A0
        self.A1 = self.eta1 + w * (y - self.eta1) / p1
        self.A0 = self.eta0 + (1 - w) * (y - self.eta0) / (1 - p1)
        self.rows = {s: np.flatnonzero(arr.s == s) for s in self.space.arrival_states}
        self.counts = np.bincount(arr.s, minlength=self.space.n_states)
        self.flagged = rate_flags.copy()
        for s in self.space.arrival_states:
            if self.counts[s] == 0:
                self.flagged[s] = True
        # mean gap per augmented state, aligned with the factory's state order
        gap = []
        for a, s in self.factory.states:
            n = data.gap_count[s, a]
            gap.append(data.gap_sum[s, a] / n if n > 0 else 1.0 / est_space.total_rate[s])
        self.gap = np.array(gap)
        self._cells: dict[tuple[int, float], tuple[float, float, float, float]] = {}

    def cell(self, s: int, g: float) -> tuple[float, float, float, float]:
        """``(c, p, pbar, r_hat)`` at state ``s`` for share ``g``."""
        key = (int(s), round(float(g), 12))
        if key not in self._cells:
            c, p = tie_threshold(self.reference.sorted[s], float(g))
            pbar = float(np.mean(ThresholdRule.apply(self.tau_ref[:, s], c, p)))
            idx = self.rows.get(s)
            if idx is not None and idx.size:
                pi1 = ThresholdRule.apply(self.tau_eval[idx], c, p)
                r = float(np.mean(pi1 * self.A1[idx] + (1 - pi1) * self.A0[idx]))
            else:
                pi1 = ThresholdRule.apply(self.tau_ref[:, s], c, p)
                r = float(np.mean(pi1 * self.m1_ref[:, s] + (1 - pi1) * self.m0_ref[:, s]))
            self._cells[key] = (c, p, pbar, r)
        return self._cells[key]

    def profile(self, g_full: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        ns = self.space.n_states
        c, p, pbar, r = np.zeros(ns), np.zeros(ns), np.full(ns, 0.5), np.zeros(ns)
        for s in range(ns):
            if s in self.rows:
                c[s], p[s], pbar[s], r[s] = self.cell(s, g_full[s])
            else:
                c[s], p[s] = tie_threshold(self.reference.sorted[s], float(g_full[s]))
        return c, p, pbar, r

    def value(self, pbar: np.ndarray, r: np.ndarray) -> tuple[float, float]:
        """``(value, flagged arrival mass)`` under the plug-in stationary law."""
        d = self.factory.stationary(pbar, check=False)
        mass = d.arrival_mass()
        arr = mass / mass.sum()
        flagged = float(arr[self.flagged].sum())
        if self.objective == "avg_outcome":
            return float(arr @ r), flagged
        return float(mass @ r / (d.probs @ self.gap)), flagged

    def score_g(self, g_full: np.ndarray) -> tuple[float, float]:
        _, _, pbar, r = self.profile(g_full)
        return self.value(pbar, r)

    def score_direct(self) -> tuple[float, float]:
        ns = self.space.n_states
        pbar, r = np.full(ns, 0.5), np.zeros(ns)
        for s in self.space.arrival_states:
            pbar[s] = float(np.mean(self.tau_ref[:, s] > 0))
            idx = self.rows[s]
            if idx.size:
                pi1 = (self.tau_eval[idx] > 0).astype(float)
                r[s] = float(np.mean(pi1 * self.A1[idx] + (1 - pi1) * self.A0[idx]))
            else:
                pi1 = (self.tau_ref[:, s] > 0).astype(float)
                r[s] = float(np.mean(pi1 * self.m1_ref[:, s] + (1 - pi1) * self.m0_ref[:, s]))
        return self.value(pbar, r)


# Algorithm-level entry points--------------------------------------------------------------

@dataclass
class Prepared:
    """Everything fitted from one trajectory before the search."""

    spec: SystemSpec
    config: LearnConfig
    split: RegenerationSplit
    model: object
    nuisances: NuisanceSet
    eval_data: EvalData
    reference_X: np.ndarray
    scorer: Scorer
    objective: str


def prepare(traj: Trajectory, config: LearnConfig | None = None) -> Prepared:
    """Split, fit the CADE and nuisances on the training cycles, and build the scorer."""
    config = config or LearnConfig()
    spec = traj.spec
    space = traj.space
    objective = config.objective or default_objective(spec)
    split = regeneration_split(traj, config.anchor, config.train_fraction, config.seed)
    train = traj.arrivals(split.train_mask)
    eval_data = EvalData.from_trajectory(traj, split.eval_mask)
    model = fit_cade(train, space, config.estimator, seed=config.seed, **config.hyper)
    keep = split.train_mask | split.eval_mask
    rates = estimate_rates(traj, keep)
    logging_policy = LoggingPolicy(spec.logging_policy) if config.known_propensity else None
    nuis = fit_nuisances(train, space, rates, logging_policy=logging_policy, outcome_model=model,
                         clip=config.clip, eval_index=eval_data.arrivals.index, seed=config.seed)
    ref_X, ref_s = train.X, train.s
    if config.reference_size is not None and len(ref_X) > config.reference_size:
        pick = np.random.default_rng(config.seed).choice(len(ref_X), config.reference_size, replace=False)
        pick.sort()
        ref_X, ref_s = ref_X[pick], ref_s[pick]
    scorer = Scorer(spec, model, nuis, eval_data, ref_X, objective, ref_s if config.state_reference else None)
    return Prepared(spec, config, split, model, nuis, eval_data, ref_X, scorer, objective)


@dataclass
class LearnedPolicy:
    policy: Policy
    g: np.ndarray | None
    value: float
    objective: str
    model: object
    table: list[dict]
    config: LearnConfig
    flagged_mass: float = 0.0
    history: list[float] = field(default_factory=list)

    @property
    def thresholds(self) -> np.ndarray | None:
        return getattr(self.policy, "thresholds", None)

    @property
    def ties(self) -> np.ndarray | None:
        return getattr(self.policy, "ties", None)

    def to_dict(self, model_ref: str | None = None) -> dict:
        d = {"policy": self.policy.to_dict(), "value": self.value, "objective": self.objective,
             "flagged_mass": self.flagged_mass, "config": self.config.to_dict(),
             "g": None if self.g is None else self.g.tolist()}
        if model_ref is not None:
            d["policy"]["model"] = model_ref
        return d

    def write(self, path: str | Path, model_path: str | Path | None = None) -> None:
        path = Path(path)
        ref = None
        if model_path is not None:
            from .cade import save_model

            save_model(self.model, model_path)
            ref = str(Path(model_path).name if Path(model_path).parent == path.parent else model_path)
        path.write_text(json.dumps(self.to_dict(ref), indent=2))

    def write_table(self, path: str | Path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            n = len(self.table[0]["g"]) if self.table else 0
            w.writerow([*(f"g{i}" for i in range(n)), "value", "flagged_mass", "excluded"])
            for row in self.table:
                w.writerow([*(f"{v:.6g}" for v in row["g"]), repr(row["value"]), repr(row["flagged_mass"]),
                            int(row["excluded"])])


def run_search(prep: Prepared) -> SearchResult:
    config = prep.config
    space = prep.scorer.space
    dec = space.decision_states
    B = config.B
    base = np.full(space.n_states, 0.5)

    def score(b):
        g = base.copy()
        g[dec] = np.asarray(b, dtype=float) / B
        return prep.scorer.score_g(g)

    n = len(dec)
    if n == 0:
        raise EmptyCandidateSet("system has no decision states")
    mode = config.mode
    if mode == "auto":
        mode = "monotone" if prep.spec.single_queue else "coordinate"
    if mode == "full":
        return search_full(score, n, B, config.max_flagged_mass, config.max_candidates)
    if mode == "coordinate":
        return search_coordinate(score, n, B, config.max_flagged_mass, config.max_sweeps)
    if not prep.spec.single_queue:
        raise SpecError("monotone parametrization needs a single-queue system; use mode 'coordinate'")
    ordering = config.ordering or default_ordering(prep.spec)
    return search_monotone(score, n, B, config.knots, ordering, config.max_flagged_mass)


def learn_from_prepared(prep: Prepared) -> LearnedPolicy:
    res = run_search(prep)
    space = prep.scorer.space
    g = np.full(space.n_states, 0.5)
    g[space.decision_states] = np.asarray(res.best, dtype=float) / prep.config.B
    c, p, _, _ = prep.scorer.profile(g)
    policy = ThresholdRule(prep.model, c, p, proportions=g)
    flagged = next(r["flagged_mass"] for r in res.table if r["b"] == res.best)
    return LearnedPolicy(policy, g, res.value, prep.objective, prep.model, res.table, prep.config, flagged,
                         res.history)


def learn_policy(traj: Trajectory, config: LearnConfig | None = None) -> LearnedPolicy:
    """Split, fit, search the grid and return the best threshold policy by OPE value."""
    return learn_from_prepared(prepare(traj, config))


def direct_from_prepared(prep: Prepared) -> LearnedPolicy:
    value, flagged = prep.scorer.score_direct()
    return LearnedPolicy(DirectRule(prep.model), None, value, prep.objective, prep.model,
                         [], prep.config, flagged)


def direct_baseline(traj: Trajectory, config: LearnConfig | None = None) -> LearnedPolicy:
    """The sign rule on the same fitted CADE, with its OPE score."""
    return direct_from_prepared(prepare(traj, config))
