"""Regeneration-based sample splitting, CADE fitting and threshold policies."""

from __future__ import annotations

import io
import json
import math
import pickle
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.ensemble import HistGradientBoostingRegressor, RandomForestRegressor
from sklearn.neighbors import KNeighborsRegressor

from .policy import DirectRule, ThresholdRule
from .sim import ArrivalData, Trajectory
from .systems import Event, SpecError, StateSpace

MIN_VISITS = 3
POOL_MIN = 50
DEFAULT_G = 0.5


class SplitError(ValueError):
    pass


# splitting------------------------------------------------------------------------------

@dataclass
class RegenerationSplit:
    """Chunks between consecutive visits to ``anchor`` and their train/eval assignment.

    Chunk ``j`` covers record positions ``[starts[j], starts[j + 1])``. Records
    before the first visit and from the last visit on are dropped.
    """

    anchor: tuple[int, int]
    starts: np.ndarray
    train: np.ndarray
    n_records: int
    seed: int = 0
    _masks: tuple = field(default=None, repr=False)

    @property
    def n_chunks(self) -> int:
        return len(self.starts) - 1

    def chunks(self) -> list[tuple[int, int]]:
        """Inclusive ``(first, last)`` record positions per chunk."""
        return [(int(a), int(b) - 1) for a, b in zip(self.starts[:-1], self.starts[1:])]

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        if self._masks is None:
            train = np.zeros(self.n_records, dtype=bool)
            evl = np.zeros(self.n_records, dtype=bool)
            for (a, b), tr in zip(zip(self.starts[:-1], self.starts[1:]), self.train):
                (train if tr else evl)[a:b] = True
            self._masks = (train, evl)
        return self._masks

    @property
    def train_mask(self) -> np.ndarray:
        return self.masks()[0]

    @property
    def eval_mask(self) -> np.ndarray:
        return self.masks()[1]

    def chunk_lengths(self) -> np.ndarray:
        return np.diff(self.starts)


def modal_state(traj: Trajectory) -> tuple[int, int]:
    codes = traj.a.astype(np.int64) * traj.space.n_states + traj.s
    c = np.bincount(codes).argmax()
    return int(c // traj.space.n_states), int(c % traj.space.n_states)


def regeneration_split(traj: Trajectory, anchor: tuple[int, int] | None = None, train_fraction: float = 0.5,
                       seed: int = 0, max_tries: int = 1000) -> RegenerationSplit:
    """Split a trajectory into i.i.d. regeneration cycles and assign each at random.

    ``anchor`` is an augmented state ``(event, flat state)``; the default is the
    most frequently observed one.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    modal = modal_state(traj)
    if anchor is None:
        anchor = modal
    a, s = int(anchor[0]), int(anchor[1])
    visits = np.flatnonzero((traj.a == a) & (traj.s == s))
    if len(visits) < MIN_VISITS:
        lab = (Event(modal[0]).name, traj.space.labels[modal[1]])
        raise SplitError(f"anchor {(Event(a).name, traj.space.labels[s])} visited {len(visits)} times "
                         f"(need {MIN_VISITS}); try the modal state {lab}")
    rng = np.random.default_rng(seed)
    n_chunks = len(visits) - 1
    for _ in range(max_tries):
        assign = rng.random(n_chunks) < train_fraction
        if assign.any() and not assign.all():
            break
    else:
        raise SplitError("could not draw a split with both sides non-empty")
    return RegenerationSplit((a, s), visits, assign, len(traj), seed)


# CADE models------------------------------------------------------------------------------

def _features(space: StateSpace, X: np.ndarray, states: np.ndarray) -> np.ndarray:
    return np.column_stack([X, space.queue_lengths(states)])


class TLearner:
    """Difference of per-arm outcome regressions, ``tau(x, s) = m1(x, s) - m0(x, s)``.

    ``estimator="hgb"`` (default) and ``"forest"`` fit one gradient-boosted or
    random-forest regressor per arm on ``(x, queue lengths)``, sharing strength
    across states. ``"knn"`` fits k-nearest-neighbour regressors per state and
    arm with ``k = ceil(n^(2/3))``, pooling neighbouring queue lengths when a
    state has fewer than ``pool_min`` observations in an arm.
    """

    def __init__(self, space: StateSpace, estimator: str = "hgb", seed: int = 0, pool_min: int = POOL_MIN,
                 **hyper):
        if estimator not in ("hgb", "forest", "knn"):
            raise SpecError(f"unknown CADE estimator {estimator!r}")
        self.space = space
        self.n_states = space.n_states
        self.estimator_id = estimator
        self.seed = seed
        self.pool_min = pool_min
        self.hyper = hyper
        self.models: dict = {}
        self.meta: dict = {}

    def _regressor(self):
        if self.estimator_id == "hgb":
            kw = dict(max_iter=100, learning_rate=0.1, min_samples_leaf=20, random_state=self.seed)
            kw.update(self.hyper)
            return HistGradientBoostingRegressor(**kw)
        kw = dict(n_estimators=100, min_samples_leaf=5, max_features=0.5, random_state=self.seed)
        kw.update(self.hyper)
        return RandomForestRegressor(**kw)

    def fit(self, data: ArrivalData) -> "TLearner":
        if len(data) == 0:
            raise SpecError("no training arrivals")
        for w in (0, 1):
            if not np.any(data.w == w):
                raise SpecError(f"treatment arm {w} never observed in training data")
        self.meta["n_train"] = len(data)
        if self.estimator_id == "knn":
            self._fit_knn(data)
            return self
        F = _features(self.space, data.X, data.s)
        for w in (0, 1):
            m = data.w == w
            self.models[w] = self._regressor().fit(F[m], data.y[m])
        return self

    def _fit_knn(self, data: ArrivalData):
        qlen = self.space.queue_lengths(np.arange(self.n_states)).astype(float)
        obs_q = self.space.queue_lengths(data.s).astype(float)
        self.pooled = []
        for s in range(self.n_states):
            dist = np.abs(obs_q - qlen[s]).sum(axis=1)
            per_state = {}
            for w in (0, 1):
                arm = data.w == w
                radius = 0.0
                m = arm & (dist <= radius)
                while m.sum() < self.pool_min and radius <= dist.max():
                    radius += 1.0
                    m = arm & (dist <= radius)
                if radius > 0:
                    self.pooled.append((self.space.labels[s], w))
                k = max(1, math.ceil(m.sum() ** (2.0 / 3.0)))
                per_state[w] = KNeighborsRegressor(n_neighbors=min(k, int(m.sum()))).fit(data.X[m], data.y[m])
            self.models[s] = per_state
        if self.pooled:
            warnings.warn(f"{len(self.pooled)} (state, arm) cells pooled with neighbouring queue lengths",
                          stacklevel=3)

    def predict_arm(self, X: np.ndarray, states: np.ndarray, w: int) -> np.ndarray:
        X = np.atleast_2d(X)
        states = np.broadcast_to(np.asarray(states, dtype=int), (len(X),))
        if self.estimator_id != "knn":
            return self.models[w].predict(_features(self.space, X, states))
        out = np.empty(len(X))
        for s in np.unique(states):
            m = states == s
            out[m] = self.models[int(s)][w].predict(X[m])
        return out

    def predict(self, X, states):
        return self.predict_arm(X, states, 1) - self.predict_arm(X, states, 0)

    def predict_arms_table(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        n = len(X)
        states = np.repeat(np.arange(self.n_states), n)
        Xr = np.tile(X, (self.n_states, 1))
        m0 = self.predict_arm(Xr, states, 0).reshape(self.n_states, n).T
        m1 = self.predict_arm(Xr, states, 1).reshape(self.n_states, n).T
        return m0, m1

    def predict_table(self, X):
        m0, m1 = self.predict_arms_table(X)
        return m1 - m0


class PredictorModel:
    """Wraps an externally fitted predictor ``f(X, states) -> tau``."""

    def __init__(self, fn, n_states: int, estimator_id: str = "external"):
        self.fn = fn
        self.n_states = n_states
        self.estimator_id = estimator_id

    def predict(self, X, states):
        return np.asarray(self.fn(np.atleast_2d(X), np.asarray(states, dtype=int)), dtype=float)

    def predict_table(self, X):
        X = np.atleast_2d(X)
        return np.stack([self.predict(X, np.full(len(X), s)) for s in range(self.n_states)], axis=1)


def resolve_estimator(estimator_id: str, space: StateSpace) -> str:
    """``"auto"``: boosting for single queues, random forest for parallel routing.

    Routing outcomes are heavy tailed (squared sojourns), which squared-loss
    boosting chases; bagged forests are far more stable there.
    """
    if estimator_id == "auto":
        return "hgb" if space.spec.single_queue else "forest"
    return estimator_id


def fit_cade(train: ArrivalData, space: StateSpace, estimator_id: str = "auto", seed: int = 0, **hyper) -> TLearner:
    return TLearner(space, resolve_estimator(estimator_id, space), seed=seed, **hyper).fit(train)


_MAGIC = b"CONGEST-CADE\n"


def save_model(model, path: str | Path) -> None:
    """Header line of JSON metadata followed by the pickled model."""
    meta = {"estimator_id": getattr(model, "estimator_id", "unknown"), "n_states": model.n_states,
            "params": getattr(model, "hyper", {}), "meta": getattr(model, "meta", {})}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        pickle.dump(model, fh)


def load_model(path: str | Path):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise SpecError(f"{path} is not a CADE model file")
        fh.readline()
        return pickle.load(io.BytesIO(fh.read()))


# quantiles and threshold policies------------------------------------------------------

def type1_quantile(values, m: float) -> float:
    """Smallest ``v`` in ``values`` with empirical CDF at least ``m``."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise SpecError("quantile of an empty sample")
    if not 0.0 < m < 1.0:
        raise SpecError(f"quantile level must lie in (0, 1), got {m}")
    j = max(1, math.ceil(m * v.size - 1e-9))
    return float(v[j - 1])


def cade_quantile(model, sample: np.ndarray, s: int, m: float) -> float:
    sample = np.atleast_2d(sample)
    if sample.shape[0] == 0:
        raise SpecError("empty covariate sample")
    return type1_quantile(model.predict(sample, np.full(len(sample), s)), m)


def tie_threshold(sorted_values: np.ndarray, g: float) -> tuple[float, float]:
    """Threshold and tie mass that treat the top ``g`` fraction of a sorted sample.

    ``c`` is the type-1 ``(1 - g)`` quantile. When ``c`` is an atom (repeated
    value) of the sample, ``p = (g - P(v > c)) / (P(v >= c) - P(v > c))`` so that
    exactly a ``g`` share is treated in expectation; otherwise ``p = 0``.
    """
    n = sorted_values.size
    j = max(1, math.ceil((1.0 - g) * n - 1e-9))
    c = float(sorted_values[j - 1])
    lo = np.searchsorted(sorted_values, c, side="left")
    hi = np.searchsorted(sorted_values, c, side="right")
    if hi - lo <= 1:
        return c, 0.0
    above, at_least = (n - hi) / n, (n - lo) / n
    return c, float(np.clip((g - above) / (at_least - above), 0.0, 1.0))


class ReferenceTable:
    """Sorted CADE predictions of a reference covariate sample at every state."""

    def __init__(self, model, sample: np.ndarray, states_sample: np.ndarray | None = None,
                 tau_table: np.ndarray | None = None):
        tau = model.predict_table(np.atleast_2d(sample)) if tau_table is None else tau_table
        self.n_states = tau.shape[1]
        self.sorted = []
        for s in range(self.n_states):
            col = tau[:, s]
            if states_sample is not None and np.any(states_sample == s):
                col = col[states_sample == s]
            self.sorted.append(np.sort(col))

    def thresholds(self, g) -> tuple[np.ndarray, np.ndarray]:
        g = np.asarray(g, dtype=float)
        c = np.empty(self.n_states)
        p = np.empty(self.n_states)
        for s in range(self.n_states):
            c[s], p[s] = tie_threshold(self.sorted[s], float(g[s]))
        return c, p


def full_proportions(space: StateSpace, g, default: float = DEFAULT_G) -> np.ndarray:
    """Expand proportions given on decision states to every state."""
    g = np.asarray(g, dtype=float)
    if g.shape == (space.n_states,):
        return g
    if g.shape != (len(space.decision_states),):
        raise SpecError(f"need {len(space.decision_states)} proportions (one per decision state), got {g.shape}")
    out = np.full(space.n_states, default)
    out[space.decision_states] = g
    return out


def make_threshold_policy(model, g, reference: np.ndarray | ReferenceTable, space: StateSpace | None = None,
                          reference_states: np.ndarray | None = None) -> ThresholdRule:
    """Threshold policy treating the top ``g_s`` share of the reference sample at each state."""
    table = reference if isinstance(reference, ReferenceTable) else ReferenceTable(model, reference, reference_states)
    g = np.asarray(g, dtype=float) if space is None else full_proportions(space, g)
    if g.shape != (table.n_states,):
        raise SpecError(f"need {table.n_states} proportions, got {g.shape}")
    if np.any(g <= 0) or np.any(g >= 1):
        raise SpecError("treatment proportions must lie strictly in (0, 1)")
    c, p = table.thresholds(g)
    return ThresholdRule(model, c, p, proportions=g)


def make_direct_policy(model) -> DirectRule:
    return DirectRule(model)
