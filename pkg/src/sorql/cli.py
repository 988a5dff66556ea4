"""Run SOR Q-learning experiments, estimator-bias grids and MDP fixed-point oracles.

    sorql run --config exp.json [--out runs.csv] [--plot fig.svg] [--parallel 4]
    sorql run --preset bandit39 --out bandit.csv
    sorql bias --grid grid.json --out bias.csv
    sorql oracle --mdp model.json --w star --tol 1e-8
    sorql presets list | sorql presets show roulette

Exit codes: 0 success, 1 configuration error, 2 a run diverged.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .bias import ESTIMATORS, EstimatorProblem
from .harness.config import PRESETS, ConfigError, get_preset, load_spec, spec_to_dict
from .harness.plot import emit_plot
from .harness.records import aggregate, emit_csv, fmt
from .harness.runner import ENGINES, run_experiment
from .mdp import ConvergenceError, RelaxationError, load_mdp, solve_fixed_point, sor_star

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _cmd_run(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("run", "give exactly one of --config or --preset")
    spec = load_spec(args.config) if args.config else get_preset(args.preset)
    records = run_experiment(spec, parallel=args.parallel, engine=args.engine)
    if args.out:
        emit_csv(records, args.out)
    if args.plot:
        first = spec.metrics[0].tag
        rows = [r for r in records if r.metric == first]
        if rows:
            emit_plot(aggregate(rows), args.plot, title=spec.name)
    diverged = sorted({(r.algorithm, r.seed) for r in records if r.metric == "diverged"})
    final = {}
    for r in records:
        if r.metric == spec.metrics[0].tag:
            final[(r.algorithm, r.seed)] = r.value
    by_algo: dict = {}
    for (algo, _), v in final.items():
        by_algo.setdefault(algo, []).append(v)
    for algo, vals in by_algo.items():
        print(f"{algo}: final mean {spec.metrics[0].tag} = {np.mean(vals):.6g} over {len(vals)} runs")
    if diverged:
        for algo, seed in diverged:
            print(f"diverged: {algo} seed {seed}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _grid_values(grid: dict, key: str, default):
    v = grid.get(key, default)
    return v if isinstance(v, list) else [v]


def _cmd_bias(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("grid", str(exc)) from None
    estimators = _grid_values(grid, "estimators", list(ESTIMATORS))
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError("estimators", f"unknown estimator {name!r}")
    trials = int(grid.get("trials", 100_000))
    seed = int(grid.get("seed", 0))
    mean = float(grid.get("arm_mean", -0.0526))
    std = float(grid.get("arm_std", 1.0))
    rows = []
    combos = itertools.product(
        _grid_values(grid, "d", 38), _grid_values(grid, "w", 1.0),
        _grid_values(grid, "k", 1), _grid_values(grid, "coupled", True),
    )
    for d, w, k, coupled in combos:
        try:
            problem = EstimatorProblem.identical(int(d), mean, std, samples_per_arm=int(k),
                                                 weight=float(w), coupled=bool(coupled))
        except ValueError as exc:
            raise ConfigError("grid", str(exc)) from None
        for name in estimators:
            # Same stream for every estimator and weight at a given (d, k, coupled).
            rng = np.random.default_rng([seed, int(d), int(k), int(bool(coupled))])
            bias, se = ESTIMATORS[name](problem, trials, rng, n_jobs=args.jobs)
            rows.append([name, str(d), fmt(w), str(k), str(bool(coupled)).lower(),
                         str(trials), fmt(bias), fmt(se)])
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["estimator", "d", "w", "k", "coupled", "trials", "bias", "se"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        mdp = load_mdp(args.mdp)
    except (OSError, ValueError) as exc:
        raise ConfigError("mdp", str(exc)) from None
    w_star = sor_star(mdp)
    if args.w == "star":
        w = w_star
    else:
        try:
            w = float(args.w)
        except ValueError:
            raise ConfigError("w", f"expected a number or 'star', got {args.w!r}") from None
    try:
        q, k = solve_fixed_point(mdp, w, args.tol, args.max_iter)
    except RelaxationError as exc:
        raise ConfigError("w", str(exc)) from None
    except ConvergenceError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGED
    out = {
        "w": float(w),
        "w_star": w_star,
        "iterations": k,
        "state_values": [float(v) for v in q.max(axis=1)],
        "fixed_point": [[float(v) for v in row] for row in q],
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _cmd_presets(args) -> int:
    if args.action == "list":
        for name in sorted(PRESETS):
            spec = get_preset(name)
            labels = ", ".join(a.label for a in spec.agents)
            print(f"{name}: env={spec.env} gamma={spec.gamma:g} episodes={spec.episodes} "
                  f"seeds={len(spec.seeds)} agents=[{labels}]")
        return EXIT_OK
    if not args.name:
        raise ConfigError("presets", "'show' needs a preset name")
    print(json.dumps(spec_to_dict(get_preset(args.name)), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sorql", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file or preset")
    run.add_argument("--config")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--out", help="CSV file for the run records")
    run.add_argument("--plot", help="SVG file for the first metric")
    run.add_argument("--parallel", type=int, default=1)
    run.add_argument("--engine", choices=ENGINES, default="compiled")
    run.set_defaults(func=_cmd_run)

    bias = sub.add_parser("bias", help="Monte-Carlo estimator bias over a grid")
    bias.add_argument("--grid", required=True)
    bias.add_argument("--out", required=True)
    bias.add_argument("--jobs", type=int, default=1)
    bias.set_defaults(func=_cmd_bias)

    oracle = sub.add_parser("oracle", help="solve an MDP file by fixed-point iteration")
    oracle.add_argument("--mdp", required=True)
    oracle.add_argument("--w", default="1")
    oracle.add_argument("--tol", type=float, default=1e-8)
    oracle.add_argument("--max-iter", type=int, default=1_000_000)
    oracle.set_defaults(func=_cmd_oracle)

    presets = sub.add_parser("presets", help="list or show shipped presets")
    presets.add_argument("action", choices=("list", "show"))
    presets.add_argument("name", nargs="?")
    presets.set_defaults(func=_cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
