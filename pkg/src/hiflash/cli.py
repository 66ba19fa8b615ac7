"""Command-line interface.

Exit codes: 0 success, 1 failed report recipes, 2 configuration or input
error, 3 runtime abort (divergence, numerical failure), 4 every run censored.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import association as assoc
from . import ddqn, learner, recipes, simulator, theory
from .config import ConfigError, load_experiment
from .staleness_mdp import toy_env

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CENSORED = 0, 1, 2, 3, 4

GEN_DATA_REQUIRED = ("data.partition", "data.n_clients")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _csv_text(rows, cols=None):
    if cols is None:
        cols = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([simulator._fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    simulator._atomic_write(path, text)


def _seeded(cfg, seed):
    if seed is None:
        return cfg
    return cfg.replace(**{"seeds.data": seed, "seeds.sim": seed, "seeds.agent": seed})


def _load_base(path, seed):
    exp = load_experiment(path)
    return exp, _seeded(exp.base, seed)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _require_keys(path, keys):
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    for key in keys:
        node = doc
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise CliError(f"{path}: missing required key '{key}'")
            node = node[part]


def cmd_gen_data(args):
    _require_keys(args.config, GEN_DATA_REQUIRED)
    _, cfg = _load_base(args.config, args.seed)
    d = cfg.data
    train, test = learner.generate_synthetic(d.num_samples, d.num_classes, d.feature_dim,
                                             d.class_separation, seed=cfg.seeds.data,
                                             num_test=d.num_test, anisotropy=d.anisotropy)
    clients = learner.partition(train, d.partition, d.n_clients, seed=cfg.seeds.data,
                                size_range=d.size_range)
    out = os.path.join(args.out_dir, "data")
    os.makedirs(out, exist_ok=True)
    audit = []
    for k, c in enumerate(clients):
        learner.save_dataset(c, os.path.join(out, f"client_{k:03d}.csv"), d.num_classes)
        classes = sorted(int(v) for v in np.unique(c.y))
        audit.append({"client": k, "samples": len(c), "classes": classes})
    learner.save_dataset(test, os.path.join(out, "test.csv"), d.num_classes)
    single = all(len(a["classes"]) == 1 for a in audit)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "clients": audit,
                "single_class_clients": single}
    _write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(clients)} client files and test.csv to {out} (config {cfg.hash()})")
    if d.partition == "noniid1":
        print(f"noniid1 single-class audit: {'pass' if single else 'FAIL'}")
        if not single:
            return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# associate
# ---------------------------------------------------------------------------

def cmd_associate(args):
    try:
        instance = assoc.load_instance(args.instance)
    except (OSError, ValueError) as exc:
        raise CliError(f"invalid instance file: {exc}") from exc
    seed = args.seed if args.seed is not None else 0
    lams = args.lam or [0.0]
    rows, report = [], []
    for lam in lams:
        if args.strategy == "brute":
            try:
                a = assoc.brute_force_associate(instance, lam, nonempty=args.nonempty)
            except ValueError as exc:
                raise CliError(str(exc)) from exc
        else:
            a = assoc.build(instance, args.strategy, lam, seed)
        rows.append({"lam": lam, "strategy": args.strategy, "total_js": assoc.total_js(a, instance),
                     "mean_latency": assoc.mean_latency(a, instance),
                     "objective": assoc.objective(a, instance, lam)})
        report.append({"lam": lam, "edges": {m: cl for m, cl in enumerate(a.clusters)}})
    text = _csv_text(rows)
    sys.stdout.write(text)
    out = args.out_dir
    _write(os.path.join(out, "association.csv"), text)
    doc = {"instance": os.path.abspath(args.instance), "strategy": args.strategy, "seed": seed,
           "associations": report}
    _write(os.path.join(out, "association.yaml"), yaml.safe_dump(doc, sort_keys=False))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-agent
# ---------------------------------------------------------------------------

def _agent_env_factory(args):
    if args.toy:
        return lambda ep: toy_env()
    _, cfg = _load_base(args.config, args.seed)
    setup = simulator.build_setup(cfg)

    def factory(ep):
        # episode -1 is the fixed evaluation environment
        c = cfg.replace(**{"seeds.sim": cfg.seeds.sim if ep < 0 else cfg.seeds.sim + 1 + ep})
        return simulator.make_env(c, setup)[0]

    return factory


def cmd_train_agent(args):
    if not args.toy and not args.config:
        raise CliError("train-agent needs a config file or --toy")
    factory = _agent_env_factory(args)
    try:
        hp = ddqn.AgentHyperparams(gamma=args.gamma, lr=args.lr, sync_every=args.sync_every,
                                   buffer_size=args.buffer_size, batch_size=args.batch_size,
                                   eval_every=args.eval_every)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    seed = args.seed if args.seed is not None else 0
    ckpt = args.checkpoint or os.path.join(args.out_dir, "agent.ckpt")
    os.makedirs(os.path.dirname(ckpt) or ".", exist_ok=True)
    try:
        policy, log = ddqn.train_agent(factory, hp, args.episodes, seed=seed)
    except ddqn.DivergenceError as exc:
        path = ckpt + ".last-good"
        if exc.last_good is not None:
            exc.last_good.save(path)
        raise CliError(f"{exc}; last good checkpoint: {path}", EXIT_RUNTIME) from exc
    policy.save(ckpt)
    cols = ["episode", "epsilon", "slots", "return", "reason", "mean_loss", "greedy_return"]
    curve = os.path.join(args.out_dir, "training_curve.csv")
    _write(curve, _csv_text(log.rows(), cols))
    print(f"checkpoint {ckpt}\ntraining curve {curve}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _run_one(job):
    i, cfg, log_dir = job
    log = simulator.run(cfg)
    path = os.path.join(log_dir, f"run_{i:03d}.jsonl")
    log.write(path)
    return i, log.summary, path


def cmd_run(args):
    exp = load_experiment(args.experiment)
    runs = exp.expand()
    if args.seed is not None:
        runs = [_seeded(r, args.seed) for r in runs]
        print(f"seed override: {args.seed}")
    log_dir = os.path.join(args.out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    jobs = [(i, r, log_dir) for i, r in enumerate(runs)]
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
    except simulator.SimulationError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from exc
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    rows = [s for _, s, _ in sorted(results, key=lambda t: t[0])]
    simulator.normalize_costs(rows)
    summary = simulator.summary_csv(rows)
    _write(os.path.join(args.out_dir, "summary.csv"), summary)
    _write(os.path.join(args.out_dir, "long.csv"), simulator.long_csv(rows))
    _write(os.path.join(args.out_dir, "config.yaml"),
           yaml.safe_dump({"runs": [r.to_dict() for r in runs], "seed_override": args.seed},
                          sort_keys=True, default_flow_style=None))
    sys.stdout.write(summary)
    if rows and all(r["censored"] for r in rows):
        print("every run exhausted its slot budget before the target accuracy", file=sys.stderr)
        return EXIT_CENSORED
    return EXIT_OK


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

BOUND_EXTRAS = ("kind", "F0_gap", "taus", "alpha", "upsilon")


def cmd_bounds(args):
    try:
        with open(args.constants) as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise CliError(f"cannot read constants file: {exc}") from exc
    kind = doc.get("kind", "convex")
    F0_gap = doc.get("F0_gap")
    if F0_gap is None:
        raise CliError(f"{args.constants}: missing required key 'F0_gap'")
    consts = {k: v for k, v in doc.items() if k not in BOUND_EXTRAS}
    cls = theory.ConvexConstants if kind == "convex" else theory.WeaklyConvexConstants
    try:
        k = cls(**consts)
    except TypeError as exc:
        raise CliError(f"{args.constants}: {exc}") from exc
    try:
        if "taus" in doc:
            if kind != "convex":
                raise CliError("a tau grid is only supported for the convex bound")
            rows = theory.tau_sweep(k, F0_gap, doc.get("alpha", 0.7), doc.get("upsilon", 0.99), doc["taus"])
        else:
            fn = theory.convex_bound if kind == "convex" else theory.nonconvex_bound
            t = fn(k, F0_gap)
            rows = [{"alpha_tau": k.alpha_tau, "kappa": t.kappa, "A1": t.A1, "A2": t.A2, "A3": t.A3,
                     "B": t.B, "C3": t.C3, "bound": t.bound}]
    except theory.RegimeError as exc:
        raise CliError(f"regime condition violated: {exc}") from exc
    text = _csv_text(rows)
    sys.stdout.write(text)
    _write(os.path.join(args.out_dir, "bounds.csv"), text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args):
    from . import plotting

    names = args.only or [r.name for r in recipes.criteria()]
    unknown = [n for n in names if n not in recipes.RECIPES]
    if unknown:
        raise CliError(f"unknown recipe(s) {unknown}; known: {', '.join(recipes.RECIPES)}")
    out = args.out_dir
    results = []
    for name in names:
        r = recipes.run_recipe(name, out)
        fig = plotting.render(name, r.rows, out)
        if fig:
            r.evidence.append(fig)
        results.append(r)
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.criterion:>2} {r.name}: {r.detail}", flush=True)
    rows = [{"criterion": r.criterion, "recipe": r.name, "passed": r.passed, "detail": r.detail,
             "evidence": ";".join(r.evidence)} for r in results]
    _write(os.path.join(out, "recipes.csv"), _csv_text(rows))
    plotting.render_summary(results, out)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} recipes passed; table in {os.path.join(out, 'recipes.csv')}")
    return EXIT_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override every seed in the config")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers for run")

    p = argparse.ArgumentParser(prog="hiflash", parents=[common],
                                description="Hierarchical federated learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate and partition synthetic data")
    g.add_argument("config")
    g.set_defaults(fn=cmd_gen_data)

    a = sub.add_parser("associate", parents=[common], help="client-edge association for an instance file")
    a.add_argument("instance")
    a.add_argument("--lam", type=float, nargs="+", help="one or more lambda values (a sweep)")
    a.add_argument("--strategy", default="greedy",
                   choices=("greedy", "brute", "latency_only", "random", "edge_iid", "edge_noniid"))
    a.add_argument("--nonempty", action="store_true", help="brute force: every edge gets a client")
    a.set_defaults(fn=cmd_associate)

    t = sub.add_parser("train-agent", parents=[common], help="train the DDQN staleness controller")
    t.add_argument("config", nargs="?")
    t.add_argument("--toy", action="store_true", help="train on the 3-edge toy environment")
    t.add_argument("--episodes", type=int, default=200)
    t.add_argument("--checkpoint")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--gamma", type=float, default=0.99)
    t.add_argument("--sync-every", type=int, default=100)
    t.add_argument("--buffer-size", type=int, default=10_000)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--eval-every", type=int, default=10)
    t.set_defaults(fn=cmd_train_agent)

    r = sub.add_parser("run", parents=[common], help="run an experiment file (with sweeps)")
    r.add_argument("experiment")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bounds", parents=[common], help="convergence bound table for a constants file")
    b.add_argument("constants")
    b.set_defaults(fn=cmd_bounds)

    rep = sub.add_parser("report", parents=[common], help="run the acceptance recipes")
    rep.add_argument("--only", nargs="+", help="subset of recipe names")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.out_dir = getattr(args, "out_dir", "out")
    args.jobs = getattr(args, "jobs", 1)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (simulator.SimulationError, FloatingPointError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
