"""Command-line entry point: run, sweep, eval-opt, bounds, validate-graph."""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .. import __version__, analysis
from ..evaluation import parse_eval_mode
from ..fednac import FeatureMap, FedNacConfig, NAC_CSV_FIELDS, run_fednac
from ..fednpg import CSV_FIELDS, RunConfig, run as run_fednpg
from ..graph import from_spec, is_connected
from ..mdp import optimal_values
from .config import ConfigError, apply_overrides, load_file, parse_config, sweep_cells
from .io import content_hash, write_csv, write_json
from .problems import build_problem

EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 2, 3, 1


def repeat_seed(seed: int, rep: int) -> int:
    """Seed of repetition ``rep``: the run seed itself for rep 0, a spawned key otherwise."""
    if rep == 0:
        return seed
    return int(np.random.SeedSequence([seed, rep]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def build_features(spec, num_states, num_actions) -> FeatureMap:
    spec = {"type": spec} if isinstance(spec, str) else dict(spec)
    kind = spec.pop("type", "one_hot")
    if kind == "one_hot":
        fm = FeatureMap.one_hot(num_states, num_actions)
    elif kind == "random_projection":
        fm = FeatureMap.random_projection(num_states, num_actions, int(spec.pop("dim")),
                                          int(spec.pop("seed", 0)), float(spec.pop("c_phi", 1.0)))
    elif kind == "table":
        fm = FeatureMap.from_table(np.asarray(spec.pop("table"), dtype=float), spec.pop("c_phi", None))
    else:
        raise ConfigError(f"unknown feature map {kind!r}")
    if spec:
        raise ConfigError(f"unknown feature parameters {sorted(spec)}")
    return fm


def execute(cfg, out_dir: Path) -> dict:
    """Run one experiment (all repetitions) and write its CSVs and metadata."""
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg.problem, cfg.seed)
    mdp, rewards = problem.mdp, problem.rewards
    mixing = from_spec(cfg.topology, rewards.n_agents)
    meta = {
        "version": __version__,
        "config": cfg.to_dict(),
        "problem": problem.meta,
        "mixing": mixing.summary(),
        "sigma": mixing.sigma,
        "input_hash": content_hash({k: v for k, v in cfg.to_dict().items() if k != "out"},
                                   [mdp.transition, rewards.tables, problem.rho]),
        "runs": [],
    }
    p = cfg.params
    for rep in range(cfg.repeat):
        seed = repeat_seed(cfg.seed, rep)
        name = "metrics.csv" if cfg.repeat == 1 else f"metrics_rep{rep}.csv"
        if cfg.algorithm == "fednac":
            features = build_features(p.features, mdp.num_states, mdp.num_actions)
            nac_cfg = FedNacConfig(p.actor_iterations, p.critic_iterations, p.actor_lr, mixing,
                                   p.critic_lr, p.critic_lr_rule, None, seed, p.critic_diagnostics)
            res = run_fednac(mdp, rewards, features, nac_cfg, problem.rho)
            write_csv(out_dir / name, NAC_CSV_FIELDS, [m.row() for m in res.metrics])
            meta["mu"] = res.mu
            meta["critic_lr"] = nac_cfg.beta(features)
            meta["runs"].append({"file": name, "seed": seed, "v_star_rho": res.v_star_rho,
                                 "tracking_gap": res.tracking_gap})
        else:
            run_cfg = RunConfig(eta=p.eta, iterations=p.iterations, mixing=mixing, tau=p.tau,
                                eval_mode=parse_eval_mode(p.eval), tracking=p.tracking,
                                diagnostics=frozenset(p.diagnostics), seed=seed)
            res = run_fednpg(mdp, rewards, run_cfg, rho=problem.rho)
            write_csv(out_dir / name, CSV_FIELDS, [m.row() for m in res.metrics])
            meta["runs"].append({"file": name, "seed": seed, "v_star_rho": res.v_star_rho,
                                 "recursion_violation": res.recursion_violation})
    write_json(out_dir / "metadata.json", meta)
    return meta


def _load(args) -> dict:
    data = load_file(args.config) if args.config else {}
    data = apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    params = data.setdefault("params", {})
    if getattr(args, "eval", None):
        params["eval"] = args.eval
    if getattr(args, "no_tracking", False):
        params["tracking"] = False
    if getattr(args, "diagnostics", None) is not None:
        params["diagnostics"] = [d for d in args.diagnostics.split(",") if d]
    return data


def _out_dir(cfg) -> Path:
    if not cfg.out:
        raise ConfigError("no output directory; pass --out or set out in the config")
    return Path(cfg.out)


def cmd_run(args):
    cfg = parse_config(_load(args))
    out = _out_dir(cfg)
    execute(cfg, out)
    print(f"wrote {out}")


def cmd_sweep(args):
    data = _load(args)
    base = parse_config(data)
    root = _out_dir(base)
    cells = list(sweep_cells(data))
    cfgs = [parse_config(cell) for _, cell in cells]  # validate every cell before running any
    index = []
    for i, ((axes, _), cfg) in enumerate(zip(cells, cfgs)):
        name = f"cell_{i:03d}"
        cfg.out = str(root / name)
        execute(cfg, root / name)
        index.append({"cell": name, **axes})
    keys = ["cell"] + sorted(base.sweep)
    _write_index(root / "index.csv", keys, index)
    print(f"wrote {len(index)} cells to {root}")


def _write_index(path, keys, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([json.dumps(row[k]) if k != "cell" else row[k] for k in keys])


def cmd_eval_opt(args):
    cfg = parse_config(_load(args))
    problem = build_problem(cfg.problem, cfg.seed)
    tau = getattr(cfg.params, "tau", 0.0)
    opt = optimal_values(problem.mdp, problem.rewards.mean, tau)
    doc = {"tau": tau, "v_star_rho": float(problem.rho @ opt.v_star), "v_star": opt.v_star,
           "q_star": opt.q_star, "pi_star": opt.pi_star.probs, "iterations": opt.iterations}
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(cfg.out) / "optimum.json", doc)
    print(json.dumps({"tau": tau, "v_star_rho": doc["v_star_rho"], "iterations": opt.iterations}))


def cmd_bounds(args):
    if args.config or args.set:
        cfg = parse_config(_load(args))
        problem = build_problem(cfg.problem, cfg.seed)
        W = from_spec(cfg.topology, problem.rewards.n_agents)
        n, gamma, A = W.n_agents, problem.mdp.gamma, problem.mdp.num_actions
        tau, eta, sigma = getattr(cfg.params, "tau", 0.0), getattr(cfg.params, "eta", 0.0), W.sigma
    else:
        missing = [k for k in ("n_agents", "gamma", "sigma", "num_actions") if getattr(args, k) is None]
        if missing:
            raise ConfigError(f"bounds needs --config or all of {missing}")
        n, gamma, A, sigma = args.n_agents, args.gamma, args.num_actions, args.sigma
        tau, eta = args.tau or 0.0, args.eta or 0.0
    p = analysis.AnalysisParams(n, gamma, tau, sigma, A, eta)
    doc = {"n_agents": n, "gamma": gamma, "tau": tau, "sigma": sigma, "num_actions": A, "eta": eta,
           **analysis.learning_rate_bounds(p), "consensus_bound": analysis.consensus_bound(p)}
    if tau > 0:
        doc["rate_bound"] = analysis.rate_bound(p)
    print(json.dumps({k: (v if np.isfinite(v) else "inf") if isinstance(v, float) else v for k, v in doc.items()}))


def cmd_validate_graph(args):
    if args.config or args.set:
        data = _load(args)
        topo = data.get("topology", {"type": "ring"})
        n = args.n_agents or data.get("problem", {}).get("n_agents")
    else:
        topo = {"type": args.topology}
        if args.k is not None:
            topo["k"] = args.k
        n = args.n_agents
    if not n:
        raise ConfigError("validate-graph needs the number of agents")
    W = from_spec(topo, int(n))
    report = {**W.summary(), "connected": is_connected(W)}
    print(json.dumps(report))
    return 0 if W.doubly_stochastic and report["connected"] else EXIT_CHECK


def make_parser():
    ap = argparse.ArgumentParser(prog="fedmtrl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        return p

    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = common(sub.add_parser(name))
        p.add_argument("--eval", help="exact | noisy:EPS | model:M")
        p.add_argument("--no-tracking", action="store_true")
        p.add_argument("--diagnostics", help="comma list of consensus,omega,recursion")
        p.set_defaults(func=fn)
    common(sub.add_parser("eval-opt")).set_defaults(func=cmd_eval_opt)
    p = common(sub.add_parser("bounds"))
    p.add_argument("--n-agents", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--num-actions", type=int)
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_bounds)
    p = common(sub.add_parser("validate-graph"))
    p.add_argument("--topology", default="ring")
    p.add_argument("--n-agents", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_validate_graph)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
