"""Command-line interface: ``congest <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
``CONGEST_SEED`` overrides ``--seed`` on every command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .systems import SpecError

log = logging.getLogger("congest")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get("CONGEST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CONGEST_SEED must be an integer, got {env!r}") from None
    return args.seed


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {p}")
    return p


def _read_json(path) -> dict:
    try:
        return json.loads(_need(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _label(lab) -> str:
    return f"{lab[0]}-{lab[1]}" if isinstance(lab, tuple) else str(lab)


def _write_table(path, header: list[str], rows: list[list], comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _spec_and_policy(args):
    from .policy import LoggingPolicy, load_policy
    from .systems import load_spec

    spec = load_spec(_need(args.spec))
    policy = load_policy(_need(args.policy), spec) if getattr(args, "policy", None) else LoggingPolicy(spec.logging_policy)
    return spec, policy


# commands-------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .sim import Horizon, event_summary, simulate, write_jsonl

    spec, policy = _spec_and_policy(args)
    horizon = Horizon(n_events=args.events, time=args.time, n_arrivals=args.arrivals)
    traj = simulate(spec, policy, horizon, seed=_seed(args))
    write_jsonl(traj, args.out)
    summary = event_summary(traj)
    print(f"wrote {summary['events']} records to {args.out} (spec {spec.fingerprint()})")
    print("events by type: " + ", ".join(f"{k}={v}" for k, v in summary["by_type"].items()))
    print("state occupancy: " + ", ".join(f"{k}:{v}" for k, v in summary["occupancy"].items()))
    return EXIT_OK


def _learn_config(args):
    from .learn import LearnConfig

    d = {}
    if args.config:
        raw = _read_json(args.config)
        d.update(raw.get("learner", raw if "system" not in raw else {}))
    for key in ("B", "mode", "objective", "estimator"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "anchor", None):
        d["anchor"] = [int(v) for v in args.anchor.split(",")]
    d["seed"] = _seed(args)
    return LearnConfig.from_dict(d)


def cmd_learn(args) -> int:
    from .experiments import fast_track_share
    from .learn import direct_from_prepared, learn_from_prepared, prepare
    from .sim import read_jsonl

    traj = read_jsonl(_need(args.traj))
    cfg = _learn_config(args)
    prep = prepare(traj, cfg)
    learned = learn_from_prepared(prep)
    out = Path(args.out)
    model_path = out.with_suffix(".model")
    learned.write(out, model_path)
    table_path = out.with_name(out.stem + "_table.csv")
    learned.write_table(table_path, comment=f"spec={traj.fingerprint}")
    direct = direct_from_prepared(prep)
    print(f"learned policy value {learned.value:.6g} ({learned.objective}); direct rule {direct.value:.6g}")
    print(f"wrote {out}, {table_path}, {model_path}")
    if not traj.spec.single_queue:
        arr = traj.arrivals(require_reward=False)
        print(f"direct rule fast-track share {fast_track_share(direct.policy, arr.X, arr.s, traj.space):.3f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import ExperimentConfig, run_experiment

    d = {}
    if args.config:
        raw = _read_json(args.config)
        d.update(raw.get("experiment", {}))
        if "learner" in raw:
            d["learner"] = raw["learner"]
        if "system" in raw:
            d["system"] = raw["system"]
    d["name"] = args.name
    if args.reps is not None:
        d["reps"] = args.reps
    if args.sizes:
        d["sizes"] = [float(v) if "." in v else int(v) for v in args.sizes.split(",")]
    d["seed"] = _seed(args)
    d["jobs"] = args.jobs
    cfg = ExperimentConfig.from_dict(d)
    res = run_experiment(cfg, args.out)
    for row in res.summary:
        print(f"{row['method']:>12} {str(row['size']):>7} median={row['median']:.6g} n={row['n']}")
    print(f"wrote {args.out}/{cfg.name}.csv")
    return EXIT_OK


def _read_profile(path, n: int) -> np.ndarray:
    p = _need(path)
    if p.suffix == ".json":
        raw = json.loads(p.read_text())
        vals = raw.get("profile", raw) if isinstance(raw, dict) else raw
    else:
        vals = [float(line.split(",")[-1]) for line in p.read_text().splitlines()
                if line.strip() and not line.startswith("#") and not line.lower().startswith("state")]
    arr = np.asarray(vals, dtype=float)
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    return arr


def cmd_analyze_stationary(args) -> int:
    from .chain import KernelFactory, arrival_conditioned, export_kernel
    from .oracle import OracleEvaluator
    from .systems import load_spec

    spec = load_spec(_need(args.spec))
    space = spec.state_space()
    factory = KernelFactory(spec)
    if args.profile:
        pbar = _read_profile(args.profile, space.n_states)
    elif args.policy:
        _, policy = _spec_and_policy(args)
        pbar = OracleEvaluator(spec, args.mc, seed=_seed(args)).value(policy).pbar
    else:
        raise ConfigError("give --profile or --policy")
    d = factory.stationary(pbar)
    arr = arrival_conditioned(d)
    marg = d.queue_marginal()
    rows = [[_label(lab), pbar[s], marg[s], arr[s], d.arrival_mass()[s]] for s, lab in enumerate(space.labels)]
    _write_table(args.out, ["state", "pbar", "marginal", "arrival_conditioned", "arrival_joint"], rows,
                 f"spec={spec.fingerprint()}")
    if args.kernel:
        export_kernel(args.kernel, factory.kernel(pbar))
    print(f"wrote {args.out} ({space.n_states} states, {len(d.states)} augmented)")
    return EXIT_OK


def _split_for(traj, args):
    from .cade import RegenerationSplit, regeneration_split

    if getattr(args, "eval_split", None):
        raw = _read_json(args.eval_split)
        try:
            split = RegenerationSplit(tuple(raw["anchor"]), np.asarray(raw["starts"]), np.asarray(raw["train"], bool),
                                      int(raw["n_records"]), int(raw.get("seed", 0)))
        except KeyError as exc:
            raise ConfigError(f"{args.eval_split}: missing field {exc}") from None
        if split.n_records != len(traj):
            raise ConfigError(f"{args.eval_split}: split covers {split.n_records} records, trajectory has {len(traj)}")
        return split
    anchor = tuple(int(v) for v in args.anchor.split(",")) if getattr(args, "anchor", None) else None
    return regeneration_split(traj, anchor, seed=_seed(args))


def _write_split(split, path) -> None:
    Path(path).write_text(json.dumps({"anchor": list(split.anchor), "starts": split.starts.tolist(),
                                      "train": split.train.astype(int).tolist(), "n_records": split.n_records,
                                      "seed": split.seed}))


def cmd_fit_cade(args) -> int:
    from .cade import fit_cade, save_model
    from .sim import read_jsonl

    traj = read_jsonl(_need(args.traj))
    split = _split_for(traj, args)
    model = fit_cade(traj.arrivals(split.train_mask), traj.space, args.estimator, seed=_seed(args))
    save_model(model, args.out)
    if args.split_out:
        _write_split(split, args.split_out)
    print(f"fitted {model.estimator_id} CADE on {model.meta['n_train']} arrivals; wrote {args.out}")
    return EXIT_OK


def cmd_ope(args) -> int:
    from .cade import fit_cade, load_model
    from .ope import EvalData, estimate, estimate_rates, fit_nuisances
    from .oracle import default_objective
    from .policy import LoggingPolicy, load_policy
    from .sim import read_jsonl

    traj = read_jsonl(_need(args.traj))
    split = _split_for(traj, args)
    spec = traj.spec
    policy = load_policy(_need(args.policy), spec)
    train = traj.arrivals(split.train_mask)
    data = EvalData.from_trajectory(traj, split.eval_mask)
    model = load_model(_need(args.model)) if args.model else fit_cade(train, traj.space, seed=_seed(args))
    rates = estimate_rates(traj, split.train_mask | split.eval_mask)
    logging_policy = LoggingPolicy(spec.logging_policy) if args.known_propensity else None
    nuis = fit_nuisances(train, traj.space, rates, logging_policy=logging_policy, outcome_model=model,
                         eval_index=data.arrivals.index)
    objective = args.objective or default_objective(spec)
    est = estimate(objective, data, policy, nuis, spec, train.X)
    rows = [[_label(lab), est.r[s], est.d[s], int(est.counts[s]), int(est.flagged[s])]
            for s, lab in enumerate(traj.space.labels)]
    _write_table(args.out, ["state", "r_hat", "d_hat", "n_eval", "flagged"], rows,
                 f"spec={traj.fingerprint} objective={objective} value={float(est.value)!r}")
    print(f"{objective} estimate {est.value:.6g} (flagged arrival mass {est.flagged_mass:.3g}); wrote {args.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import OracleEvaluator, approx_optimal, caie_table, default_objective

    spec, policy = _spec_and_policy(args)
    space = spec.state_space()
    objective = args.objective or default_objective(spec)
    fp = f"spec={spec.fingerprint()}"
    ev = OracleEvaluator(spec, args.mc, seed=_seed(args))
    if args.caie:
        res = caie_table(spec, policy, truncation=args.truncation, mc=args.caie_mc, seed=_seed(args))
        rows = [[_label(space.labels[r.state]), r.value, r.se, r.recouple_rate, r.mean_steps] for r in res]
        _write_table(args.out, ["state", "caie", "se", "recouple_rate", "mean_steps"], rows,
                     f"{fp} mu={res[0].mu!r}")
        print(f"wrote CAIE for {len(rows)} states to {args.out}")
        return EXIT_OK
    if args.optimal:
        opt = approx_optimal(spec, args.constraint, budget=args.budget, seed=_seed(args), objective=objective,
                             evaluator=ev, starts=args.starts)
        det = opt.details()
        c = ev.threshold_parts(opt.g)[0]
        rows = [[_label(lab), opt.g[s], c[s], det.arrival_dist[s]] for s, lab in enumerate(space.labels)]
        _write_table(args.out, ["state", "g", "threshold", "arrival_conditioned"], rows,
                     f"{fp} objective={objective} value={float(opt.value)!r} ordering={opt.ordering}")
        print(f"approximate optimum {opt.value:.6g} ({objective}, ordering {opt.ordering}); wrote {args.out}")
        return EXIT_OK
    val = ev.value(policy, objective)
    rows = [[_label(lab), val.pbar[s], val.r[s], val.arrival_dist[s]] for s, lab in enumerate(space.labels)]
    _write_table(args.out, ["state", "pbar", "r", "arrival_conditioned"], rows,
                 f"{fp} objective={objective} value={val.value!r} mu={val.mu!r} theta={val.theta!r}")
    print(f"{objective} = {val.value:.6g} (mu {val.mu:.6g}, theta {val.theta:.6g}); wrote {args.out}")
    return EXIT_OK


# parser---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="congest", description="Queue-aware targeting: simulate, learn, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("simulate", cmd_simulate, "Simulate a trajectory and write it as JSON Lines.")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--policy")
    hz = sp.add_mutually_exclusive_group(required=True)
    hz.add_argument("--events", type=int)
    hz.add_argument("--time", type=float)
    hz.add_argument("--arrivals", type=int)
    sp.add_argument("--out", required=True)

    sp = add("learn", cmd_learn, "Learn a threshold policy from a trajectory by grid search.")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--B", type=int)
    sp.add_argument("--mode", choices=["auto", "full", "coordinate", "monotone", "FullProduct", "CoordinateAscent",
                                       "MonotoneParam"])
    sp.add_argument("--objective", choices=["avg_outcome", "reward_rate"])
    sp.add_argument("--estimator", choices=["auto", "hgb", "forest", "knn"])
    sp.add_argument("--anchor", help="augmented anchor state as 'event,state'")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("experiment", cmd_experiment, "Reproduce a figure's data as CSV.")
    sp.add_argument("--name", required=True, choices=["fig2", "fig3", "fig4", "fig5"])
    sp.add_argument("--reps", type=int)
    sp.add_argument("--sizes", help="comma-separated horizons / sample sizes")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("analyze-stationary", cmd_analyze_stationary, "Stationary law for a policy profile.")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--profile", help="JSON list (or one value) or CSV whose last column is pbar")
    sp.add_argument("--policy")
    sp.add_argument("--mc", type=int, default=20000)
    sp.add_argument("--kernel", help="also write the transition kernel CSV here")
    sp.add_argument("--out", required=True)

    sp = add("fit-cade", cmd_fit_cade, "Split a trajectory and fit the CADE model on the training cycles.")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--estimator", default="auto", choices=["auto", "hgb", "forest", "knn"])
    sp.add_argument("--anchor")
    sp.add_argument("--eval-split")
    sp.add_argument("--split-out")
    sp.add_argument("--out", required=True)

    sp = add("ope", cmd_ope, "Doubly robust off-policy value of a policy.")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--eval-split")
    sp.add_argument("--anchor")
    sp.add_argument("--model")
    sp.add_argument("--objective", choices=["avg_outcome", "reward_rate"])
    sp.add_argument("--known-propensity", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("oracle", cmd_oracle, "Ground-truth value, approximate optimum or CAIE table.")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--policy")
    sp.add_argument("--objective", choices=["avg_outcome", "reward_rate"])
    sp.add_argument("--mc", type=int, default=20000)
    sp.add_argument("--optimal", action="store_true")
    sp.add_argument("--constraint", choices=["nonincreasing", "nondecreasing", "none"])
    sp.add_argument("--budget", type=int, default=3000)
    sp.add_argument("--starts", type=int, default=5)
    sp.add_argument("--caie", action="store_true")
    sp.add_argument("--truncation", type=int, default=10_000)
    sp.add_argument("--caie-mc", type=int, default=2000)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, SpecError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
