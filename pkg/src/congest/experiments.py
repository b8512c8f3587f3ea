"""Reproduction pipelines for the numerical figures.

``fig2``/``fig4`` compare the approximately optimal and the direct rule under
the true CADE; ``fig3``/``fig5`` learn policies from simulated logs across
sample sizes and score them with the oracle.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .learn import EmptyCandidateSet, LearnConfig, direct_from_prepared, learn_from_prepared, prepare
from .oracle import OracleEvaluator, approx_optimal
from .policy import Policy, ThresholdRule
from .sim import Horizon, simulate
from .systems import SpecError, StateSpace, SystemSpec, mnm1_example, parallel_example

log = logging.getLogger(__name__)

NAMES = ("fig2", "fig3", "fig4", "fig5")


@dataclass
class ExperimentConfig:
    name: str
    reps: int = 50
    sizes: tuple[float, ...] | None = None
    seed: int = 0
    B: int = 10
    mode: str | None = None
    mu_fast: float = 1.0
    oracle_mc: int = 20000
    eval_mc: int = 3000
    optimizer_budget: int = 3000
    jobs: int = 1
    learner: dict = field(default_factory=dict)
    system: dict | None = None

    def __post_init__(self):
        if self.name not in NAMES:
            raise SpecError(f"unknown experiment {self.name!r}; choose from {NAMES}")
        if self.reps < 1:
            raise SpecError("reps must be positive")
        if self.sizes is None:
            self.sizes = (2000, 6000, 10000) if self.name == "fig3" else (2000, 10000)
        self.sizes = tuple(self.sizes)
        if self.mode is None:
            self.mode = "monotone" if self.name in ("fig2", "fig3") else "coordinate"

    @property
    def spec(self) -> SystemSpec:
        if self.system is not None:
            return SystemSpec.from_dict(self.system)
        return mnm1_example() if self.name in ("fig2", "fig3") else parallel_example(self.mu_fast)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)

    def horizon(self, size) -> Horizon:
        # T is a time horizon for the admission example, n a number of arrivals for routing
        return Horizon(time=float(size)) if self.name == "fig3" else Horizon(n_arrivals=int(size))

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    summary: list[dict]
    optimum: float | None = None
    fingerprint: str = ""

    def medians(self, method: str) -> dict:
        return {r["size"]: r["median"] for r in self.summary if r["method"] == method}


def rep_seed(base: int, size_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([base, size_index, rep]).generate_state(1)[0])


def fast_track_share(policy: Policy, X: np.ndarray, states: np.ndarray, space: StateSpace) -> float:
    """Share of arrivals routed to the fast queue among those seeing it not full (forced joins included)."""
    states = np.asarray(states, dtype=int)
    q = space.queue_lengths(states)
    keep = (q[:, 1] < space.spec.capacities[1]) & (space.rates[states, 0] > 0)
    if not keep.any():
        raise SpecError("no arrivals with the fast queue open")
    X, states, q = X[keep], states[keep], q[keep]
    p = policy.prob(X, states)
    to_fast_t = space.queue_lengths(space.next_treated[states])[:, 1] > q[:, 1]
    to_fast_c = space.queue_lengths(space.next_control[states])[:, 1] > q[:, 1]
    return float(np.mean(p * to_fast_t + (1 - p) * to_fast_c))


# oracle figures-------------------------------------------------------------------------

def _labels(space):
    return [lab if not isinstance(lab, tuple) else f"{lab[0]}-{lab[1]}" for lab in space.labels]


def oracle_comparison(cfg: ExperimentConfig) -> ExperimentResult:
    """Optimal vs direct rule under the true CADE: shares, thresholds and stationary laws per state."""
    spec = cfg.spec
    ev = OracleEvaluator(spec, cfg.oracle_mc, seed=rep_seed(cfg.seed, 99, 0))
    opt = approx_optimal(spec, budget=cfg.optimizer_budget, seed=cfg.seed, evaluator=ev)
    o_opt = opt.details()
    o_dir = ev.evaluate_table((ev.tau > 0).astype(float), opt.objective)
    c_opt = ev.threshold_parts(opt.g)[0]
    d_opt, d_dir = o_opt.arrival_dist, o_dir.arrival_dist
    m_opt, m_dir = o_opt.d.queue_marginal(), o_dir.d.queue_marginal()
    rows = []
    for s, lab in enumerate(_labels(ev.space)):
        rows.append({"state": lab, "g_optimal": o_opt.pbar[s], "g_direct": o_dir.pbar[s], "c_optimal": c_opt[s],
                     "arrival_dist_optimal": d_opt[s], "arrival_dist_direct": d_dir[s],
                     "marginal_optimal": m_opt[s], "marginal_direct": m_dir[s]})
    summary = [{"method": "optimal", "size": "", "median": opt.value, "n": 1},
               {"method": "direct_true", "size": "", "median": o_dir.value, "n": 1},
               {"method": "margin", "size": "", "median": (opt.value - o_dir.value) / abs(o_dir.value), "n": 1}]
    return ExperimentResult(cfg, rows, summary, opt.value, spec.fingerprint())


# learning curves------------------------------------------------------------------------

_EVAL_CACHE: dict = {}


def _evaluator(cfg: ExperimentConfig) -> OracleEvaluator:
    key = (cfg.spec.fingerprint(), cfg.eval_mc, cfg.seed)
    if key not in _EVAL_CACHE:
        _EVAL_CACHE[key] = OracleEvaluator(cfg.spec, cfg.eval_mc, seed=rep_seed(cfg.seed, 98, 0))
    return _EVAL_CACHE[key]


def run_rep(cfg: ExperimentConfig, size_index: int, rep: int) -> list[dict]:
    """One replication: simulate the logging policy, learn, and score both rules with the oracle."""
    spec = cfg.spec
    size = cfg.sizes[size_index]
    seed = rep_seed(cfg.seed, size_index, rep)
    traj = simulate(spec, None, cfg.horizon(size), seed=seed)
    lcfg = LearnConfig.from_dict({"B": cfg.B, "mode": cfg.mode, "seed": seed, **cfg.learner})
    prep = prepare(traj, lcfg)
    direct = direct_from_prepared(prep)
    try:
        learned = learn_from_prepared(prep)
        fallback = False
    except EmptyCandidateSet:
        # nothing certifiable on this split: fall back to the baseline rule
        log.warning("rep %d at size %s: empty candidate set, using the direct rule", rep, size)
        learned, fallback = direct, True
    ev = _evaluator(cfg)
    tau = prep.model.predict_table(ev.X)
    pol = learned.policy
    v_dir = ev.evaluate_table((tau > 0).astype(float), prep.objective).value
    if fallback:
        v_alg = v_dir
    else:
        p_alg = ThresholdRule.apply(tau, pol.thresholds[None, :], pol.ties[None, :])
        v_alg = ev.evaluate_table(p_alg, prep.objective).value
    base = {"size": size, "rep": rep, "seed": seed, "n_events": len(traj), "objective": prep.objective}
    g = "" if fallback else " ".join(f"{v:.3g}" for v in learned.g[traj.space.decision_states])
    rows = [dict(base, method="algorithm1", value=v_alg, ope_value=learned.value, g=g, fallback=int(fallback)),
            dict(base, method="direct", value=v_dir, ope_value=direct.value, g="", fallback=0)]
    if not spec.single_queue:
        arr = traj.arrivals(require_reward=False)
        rows[1]["fast_share"] = fast_track_share(direct.policy, arr.X, arr.s, traj.space)
        rows[0]["fast_share"] = fast_track_share(pol, arr.X, arr.s, traj.space)
    return rows


def _run_task(args):
    cfg, i, rep, out = args
    rows = run_rep(cfg, i, rep)
    if out is not None:
        path = Path(out) / "reps" / f"{cfg.name}_{i}_{rep}.json"
        path.write_text(json.dumps(rows))
    return i, rep, rows


def learning_curve(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentResult:
    spec = cfg.spec
    tasks = [(cfg, i, rep, None if out is None else str(out)) for i in range(len(cfg.sizes)) for rep in range(cfg.reps)]
    if out is not None:
        (Path(out) / "reps").mkdir(parents=True, exist_ok=True)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1]))
    rows = [row for _, _, rr in results for row in rr]
    # optimum reference line, scored on the same evaluation covariates as the learned policies
    ev = _evaluator(cfg)
    objective = rows[0]["objective"]
    opt = approx_optimal(spec, budget=cfg.optimizer_budget, seed=cfg.seed, objective=objective,
                         evaluator=OracleEvaluator(spec, cfg.oracle_mc, seed=rep_seed(cfg.seed, 99, 0)))
    opt_value = ev.value(opt.policy, objective).value
    summary = []
    for method in ("algorithm1", "direct"):
        for size in cfg.sizes:
            sel = [r for r in rows if r["method"] == method and r["size"] == size]
            vals = np.array([r["value"] for r in sel])
            summary.append({"method": method, "size": size, "median": float(np.median(vals)),
                            "q25": float(np.quantile(vals, 0.25)), "q75": float(np.quantile(vals, 0.75)),
                            "n": len(vals), "fallbacks": sum(r["fallback"] for r in sel)})
    summary.append({"method": "optimal", "size": "", "median": opt_value, "q25": opt_value, "q75": opt_value, "n": 1, "fallbacks": 0})
    return ExperimentResult(cfg, rows, summary, opt_value, spec.fingerprint())


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> ExperimentResult:
    if cfg.name in ("fig2", "fig4"):
        res = oracle_comparison(cfg)
    else:
        res = learning_curve(cfg, out)
    if out is not None:
        write_result(res, out)
    return res


def _write_rows(path: Path, rows: list[dict], comment: str) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _cell(v):
    if isinstance(v, np.generic):
        v = v.item()
    return repr(v) if isinstance(v, float) else v


def write_result(res: ExperimentResult, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    comment = f"spec={res.fingerprint} experiment={res.config.name} reps={res.config.reps} seed={res.config.seed}"
    _write_rows(out / f"{res.config.name}.csv", res.rows, comment)
    _write_rows(out / f"{res.config.name}_summary.csv", res.summary, comment)
    (out / f"{res.config.name}_config.json").write_text(json.dumps(res.config.to_dict(), indent=2))
