"""Command-line entry point: ``vrpvcsd <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.  Errors are
reported as a single ``error: <category>: <message>`` line on standard error;
progress also goes to standard error and data only to the flagged files.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import milp
from .decqn import TrainConfig, load_checkpoint, load_policy_params, save_checkpoint, Trainer
from .errors import DataError, StorageError, UsageError, VrpError
from .evaluation import (attach_improvements, emit_tables, evaluate, paired_improvement_ci, summarize,
                         write_dump)
from .instance import (DEFAULT_LAYOUT_SEED, TAG_CALIBRATE, TAG_CUSTOMERS, InstanceSpec, Kind, Level, Variability,
                       calibrate_duration_limit, default_area, load_instance, load_scenarios, make_grid, realization_for,
                       save_instance, save_scenarios, stream, vcsd_spec, vrpsd_spec, ScenarioSet, _write_json)
from .observation import ObservationConfig
from .policies import (FixedRoutesPolicy, GreedyPolicy, GreedyQPolicy, RandomPolicy, RolloutPolicy,
                       check_routes, read_routes, simulate_fixed_routes, write_routes)

COMMANDS = ("gen-instance", "gen-scenarios", "calibrate-L", "train", "evaluate", "rollout-eval",
            "export-milp", "simulate-routes")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _progress(label: str):
    def report(done, total):
        print(f"{label}: {done}/{total}", file=sys.stderr, flush=True)
    return report


# ---------------------------------------------------------------------------
# parser

def _instance_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("instance (either --instance or the generator flags)")
    g.add_argument("--instance", metavar="PATH", help="instance file written by gen-instance")
    g.add_argument("--kind", choices=[k.value for k in Kind], default="vcsd",
                   help="variable customers (vcsd) or fixed Solomon customers (vrpsd)")
    g.add_argument("--density", choices=[l.value for l in Level], help="customer density class (vcsd)")
    g.add_argument("--variability", choices=[v.value for v in Variability], help="demand variability (vrpsd)")
    g.add_argument("--Q", type=float, help="vehicle capacity [demand units]")
    g.add_argument("--m", type=int, help="fleet size [vehicles]; default from the density class")
    g.add_argument("--L", type=float, help="duration limit [time units = distance units]")
    g.add_argument("--duration", choices=["short", "medium", "long"], default="short",
                   help="named VRPSD duration limit (ignored when --L is given)")
    g.add_argument("--customers-file", metavar="PATH",
                   help="Solomon-format customer file for vrpsd (default: bundled R101)")
    g.add_argument("--n-customers", type=int, default=75, help="Solomon customers to keep [count]")
    g.add_argument("--layout-seed", type=int, default=DEFAULT_LAYOUT_SEED,
                   help="seed of the active-zone layout [integer]")


def _seed_flag(p):
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness [integer]")


def _config_flag(p):
    p.add_argument("--config", metavar="PATH", help="JSON file of flag values (flags override it)")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="vrpvcsd", description="Multi-vehicle stochastic routing: simulation, "
                                               "decentralized Q-learning, benchmarks and MILP export.")
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-instance", help="write an instance file")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    p.add_argument("--out", required=True, metavar="PATH", help="instance file to write (JSON)")

    p = sub.add_parser("gen-scenarios", help="write a customer x demand scenario grid")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    p.add_argument("--customers", type=int, default=50, help="customer realizations [count]")
    p.add_argument("--demands", type=int, default=50, help="demand realizations per customer set [count]")
    p.add_argument("--out", required=True, metavar="PATH", help="scenario file to write (JSON)")

    p = sub.add_parser("calibrate-L", help="estimate the duration limit from greedy tours")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    p.add_argument("--samples", type=int, default=10_000, help="customer/demand samples [count]")
    p.add_argument("--calib-Q", type=float, default=75.0, help="capacity used while calibrating [demand units]")
    p.add_argument("--out", required=True, metavar="PATH", help="JSON file receiving the limit")

    p = sub.add_parser("train", help="train a DecQN policy")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    d = TrainConfig()
    p.add_argument("--trials", type=int, default=d.trials_max, help="training episodes [count]")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="replay batch size [experiences]")
    p.add_argument("--memory-size", type=int, default=d.memory_size, help="replay capacity [experiences]")
    p.add_argument("--update-prob", type=float, default=d.beta_t, help="update probability per step [0-1]")
    p.add_argument("--target-sync", type=int, default=d.beta_d, help="trials between target syncs [count]")
    p.add_argument("--gamma", type=float, default=d.gamma, help="discount factor [0-1]")
    p.add_argument("--eps-start", type=float, default=d.eps_start, help="initial exploration rate [0-1]")
    p.add_argument("--eps-end", type=float, default=d.eps_end, help="final exploration rate [0-1]")
    p.add_argument("--eps-trials", type=int, default=d.eps_trials, help="exploration decay span [trials]")
    p.add_argument("--lr-start", type=float, default=d.lr_start, help="initial learning rate")
    p.add_argument("--lr-end", type=float, default=d.lr_end, help="final learning rate")
    p.add_argument("--lr-trials", type=int, default=d.lr_trials, help="learning-rate decay span [trials]")
    p.add_argument("--huber-delta", type=float, default=d.huber_delta, help="Huber threshold [reward units]")
    p.add_argument("--double-q", action="store_true", help="double-Q targets")
    p.add_argument("--n-tilde", type=int, default=10, help="target customers in the observation [count]")
    p.add_argument("--extras", nargs="*", default=[], choices=["duration", "variability"],
                   help="extra observation entries")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="trials between probe evaluations and checkpoints [count]; 0 = end only")
    p.add_argument("--probe", type=int, nargs=2, default=[10, 10], metavar=("CUST", "DEM"),
                   help="probe grid size [customer sets, demand sets]")
    p.add_argument("--resume", metavar="PATH", help="checkpoint to continue from")
    p.add_argument("--stats", metavar="PATH", help="CSV of probe statistics")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint file to write (npz)")

    for name, hlp in (("evaluate", "evaluate benchmark or learned policies on a scenario grid"),
                      ("rollout-eval", "evaluate the rollout policy against its base policy")):
        p = sub.add_parser(name, help=hlp)
        _instance_flags(p); _seed_flag(p); _config_flag(p)
        p.add_argument("--scenarios", metavar="PATH", help="scenario file; default: a fresh grid")
        p.add_argument("--grid", type=int, nargs=2, default=[50, 50], metavar=("CUST", "DEM"),
                       help="fresh grid size when --scenarios is absent [counts]")
        p.add_argument("--params", metavar="PATH", help="checkpoint or parameter file of a trained policy")
        p.add_argument("--jobs", type=int, default=1, help="worker processes [count]")
        p.add_argument("--label", default="", help="instance label written to the table")
        p.add_argument("--dump", metavar="PREFIX", help="per-scenario served demand, PREFIX.<policy>.csv")
        p.add_argument("--out", required=True, metavar="PATH", help="CSV table to write")
        if name == "evaluate":
            p.add_argument("--policy", action="append", choices=["random", "greedy", "decqn"],
                           help="policy to evaluate (repeatable; default random and greedy)")
        else:
            p.add_argument("--W", type=int, default=50, help="sampled demand scenarios per decision [count]")
            p.add_argument("--gamma", type=float, default=0.999, help="discount factor [0-1]")

    p = sub.add_parser("export-milp", help="write the deterministic multi-trip model as an LP file")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    p.add_argument("--scenarios", metavar="PATH", help="scenario file holding the customer realization")
    p.add_argument("--realization", type=int, default=0, help="realization index in the scenario file")
    p.add_argument("--E", type=int, help="trips per vehicle [count]; default from the trip bound")
    p.add_argument("--solve", action="store_true", help="also solve with HiGHS and write routes")
    p.add_argument("--time-limit", type=float, default=60.0, help="solver time limit [seconds]")
    p.add_argument("--routes-out", metavar="PATH", help="route file from the solved model")
    p.add_argument("--out", required=True, metavar="PATH", help="LP file to write")

    p = sub.add_parser("simulate-routes", help="evaluate fixed routes with classical recourse")
    _instance_flags(p); _seed_flag(p); _config_flag(p)
    p.add_argument("--scenarios", metavar="PATH", help="scenario file; default: a fresh grid")
    p.add_argument("--grid", type=int, nargs=2, default=[1, 100], metavar=("CUST", "DEM"),
                   help="fresh grid size when --scenarios is absent [counts]")
    p.add_argument("--realization", type=int, default=0, help="realization the routes were built for")
    p.add_argument("--routes", required=True, metavar="PATH", help="route file (one vehicle per line, ids)")
    p.add_argument("--label", default="", help="instance label written to the table")
    p.add_argument("--dump", metavar="PATH", help="per-scenario served demand CSV")
    p.add_argument("--out", required=True, metavar="PATH", help="CSV table to write")
    return top


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
    if getattr(args, "config", None):
        cfg = _read_config(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        bad = sorted(set(cfg) - known)
        if bad:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(bad)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed config ({e})") from e
    if not isinstance(d, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in d.items()}


# ---------------------------------------------------------------------------
# helpers

def _spec(args) -> InstanceSpec:
    if args.instance:
        return load_instance(args.instance)
    if args.Q is None:
        raise UsageError("--Q is required without --instance")
    if args.kind == Kind.VRPSD.value:
        if args.variability is None:
            raise UsageError("--variability is required for vrpsd instances")
        return vrpsd_spec(args.variability, args.Q, args.L if args.L is not None else args.duration,
                          n=args.n_customers, path=args.customers_file,
                          **({"m": args.m} if args.m is not None else {}), seed=args.seed)
    if args.density is None:
        raise UsageError("--density is required for vcsd instances")
    return vcsd_spec(args.density, args.Q, L=args.L, m=args.m, area=default_area(args.layout_seed),
                     seed=args.seed)


def _scenarios(args, spec, grid):
    if args.scenarios:
        sset = load_scenarios(args.scenarios)
    else:
        sset = make_grid(spec, grid[0], grid[1], args.seed)
    if len(sset) == 0:
        raise DataError("scenario set is empty")
    return sset


def _check_jobs(args):
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")


def _out_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise StorageError(f"output directory {parent} does not exist")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_instance(args):
    spec = _spec(args)
    _out_parent(args.out)
    save_instance(spec, args.out)


def cmd_gen_scenarios(args):
    if args.customers < 1 or args.demands < 1:
        raise UsageError("--customers and --demands must be >= 1")
    spec = _spec(args)
    _out_parent(args.out)
    save_scenarios(make_grid(spec, args.customers, args.demands, args.seed), args.out)


def cmd_calibrate(args):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    spec = _spec(args)
    _out_parent(args.out)
    L = calibrate_duration_limit(spec, args.samples, stream(args.seed, TAG_CALIBRATE), Q=args.calib_Q)
    _write_json(args.out, {"L": L, "samples": args.samples, "seed": args.seed, "Q": args.calib_Q})
    print(f"calibrated L = {L:.4f}", file=sys.stderr)


def cmd_train(args):
    spec = _spec(args)
    _out_parent(args.out)
    obs = ObservationConfig(n_tilde=args.n_tilde, extras=tuple(args.extras))
    cfg = TrainConfig(trials_max=args.trials, batch_size=args.batch_size, memory_size=args.memory_size,
                      beta_t=args.update_prob, beta_d=args.target_sync, gamma=args.gamma,
                      eps_start=args.eps_start, eps_end=args.eps_end, eps_trials=args.eps_trials,
                      lr_start=args.lr_start, lr_end=args.lr_end, lr_trials=args.lr_trials,
                      huber_delta=args.huber_delta, double_q=args.double_q, seed=args.seed, obs=obs,
                      checkpoint_every=args.checkpoint_every, probe_customers=args.probe[0],
                      probe_demands=args.probe[1])
    if args.resume:
        tr = load_checkpoint(args.resume)
        tr.cfg = TrainConfig.from_dict({**tr.cfg.to_dict(), "trials_max": args.trials})
    else:
        tr = Trainer.create(spec, cfg)
    tr.run(checkpoint_path=args.out, progress=True)
    if cfg.checkpoint_every and (not tr.stats.rows or tr.stats.rows[-1]["trial"] != tr.trial):
        tr.record_stats()
    save_checkpoint(tr, args.out)
    if args.stats:
        tr.stats.to_csv(args.stats)


def _learned(args):
    if not args.params:
        raise UsageError("--params is required for learned policies")
    return load_policy_params(args.params)


def cmd_evaluate(args):
    _check_jobs(args)
    spec = _spec(args)
    _out_parent(args.out)
    names = args.policy or ["random", "greedy"]
    sset = _scenarios(args, spec, args.grid)
    rows = []
    for name in names:
        if name == "random":
            pol = RandomPolicy()
        elif name == "greedy":
            pol = GreedyPolicy()
        else:
            params, obs = _learned(args)
            _check_obs(params, obs, spec)
            pol = GreedyQPolicy(params, obs)
        row, vals = evaluate(pol, spec, sset, args.seed, args.jobs, args.label, _progress(name))
        rows.append(row)
        if args.dump:
            write_dump(vals, f"{args.dump}.{name}.csv")
    emit_tables(attach_improvements(rows), args.out)


def _check_obs(params, obs, spec):
    if params.sizes[0] != obs.size(spec.m):
        raise DataError(f"policy expects {params.sizes[0]} inputs but the instance gives {obs.size(spec.m)}")


def cmd_rollout_eval(args):
    _check_jobs(args)
    if args.W < 1:
        raise UsageError("--W must be >= 1")
    spec = _spec(args)
    _out_parent(args.out)
    params, obs = _learned(args)
    _check_obs(params, obs, spec)
    sset = _scenarios(args, spec, args.grid)
    base_row, base_vals = evaluate(GreedyQPolicy(params, obs), spec, sset, args.seed, args.jobs, args.label,
                                   _progress("decqn"))
    ro_row, ro_vals = evaluate(RolloutPolicy(params, obs, args.W, args.gamma), spec, sset, args.seed, args.jobs,
                               args.label, _progress("rollout"))
    pct, lo, hi = paired_improvement_ci(ro_vals, base_vals)
    print(f"rollout vs base: {pct:+.3f}% (95% CI {lo:+.3f}% .. {hi:+.3f}%)", file=sys.stderr)
    emit_tables([base_row, ro_row], args.out)
    if args.dump:
        write_dump(base_vals, f"{args.dump}.decqn.csv")
        write_dump(ro_vals, f"{args.dump}.rollout.csv")


def _realization(args, spec):
    if args.scenarios:
        sset = load_scenarios(args.scenarios)
        if not 0 <= args.realization < len(sset.realizations):
            raise DataError(f"realization {args.realization} not in {args.scenarios}")
        return sset.realizations[args.realization]
    return realization_for(spec, stream(args.seed, TAG_CUSTOMERS, args.realization))


def cmd_export_milp(args):
    spec = _spec(args)
    _out_parent(args.out)
    real = _realization(args, spec)
    if args.E is not None and args.E < 1:
        raise UsageError("--E must be >= 1")
    model = milp.build_for_realization(real, spec, E=args.E)
    milp.export_lp(model, args.out)
    print(f"model: {len(model.variables)} variables, {len(model.constraints)} constraints, E={model.E}",
          file=sys.stderr)
    if args.solve:
        obj, vals = milp.solve_with_highs(args.out, args.time_limit)
        nodes = milp.routes_from_values(vals, model)
        routes = milp.fixed_routes(nodes)
        print(f"objective {obj:.4f}", file=sys.stderr)
        if args.routes_out:
            write_routes(routes, args.routes_out, real)


def cmd_simulate_routes(args):
    spec = _spec(args)
    _out_parent(args.out)
    sset = _scenarios(args, spec, args.grid)
    if not 0 <= args.realization < len(sset.realizations):
        raise DataError(f"realization {args.realization} not in the scenario set")
    real = sset.realizations[args.realization]
    routes = read_routes(args.routes, real)
    check_routes(routes, real.n)
    if len(routes) > spec.m:
        raise DataError(f"{len(routes)} routes for {spec.m} vehicles")
    vals = np.array([simulate_fixed_routes(routes, real, scen, spec)
                     for r, scen in sset.pairs if r == args.realization])
    if vals.size == 0:
        raise DataError("no scenarios for the chosen realization")
    sub = ScenarioSet([real], [(0, s) for r, s in sset.pairs if r == args.realization])
    emit_tables([summarize(vals, "fixed", spec, sub, args.label)], args.out)
    if args.dump:
        write_dump(vals, args.dump)


HANDLERS = {"gen-instance": cmd_gen_instance, "gen-scenarios": cmd_gen_scenarios, "calibrate-L": cmd_calibrate,
            "train": cmd_train, "evaluate": cmd_evaluate, "rollout-eval": cmd_rollout_eval,
            "export-milp": cmd_export_milp, "simulate-routes": cmd_simulate_routes}


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
        HANDLERS[args.command](args)
    except SystemExit as e:      # --help
        return int(e.code or 0)
    except VrpError as e:
        print(f"error: {e.category}: {e}".replace("\n", " "), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: io: {e}".replace("\n", " "), file=sys.stderr)
        return StorageError.exit_code
    return 0


def main() -> None:
    sys.exit(run())
