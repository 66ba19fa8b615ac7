"""One experiment recipe per acceptance criterion.

Each recipe runs its experiment, writes its evidence table (CSV) when given an
output directory and evaluates a machine-checkable predicate. The report
command and the acceptance tests both call :func:`run_recipe`.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import association as assoc
from . import ddqn, learner, oracles, simulator, theory
from .config import SimConfig
from .staleness_mdp import FixedThreshold, toy_env


@dataclass
class RecipeResult:
    name: str
    criterion: int
    passed: bool
    detail: str
    rows: list = field(default_factory=list)
    evidence: list = field(default_factory=list)


@dataclass(frozen=True)
class Recipe:
    name: str
    criterion: int
    description: str
    experiment: dict
    fn: object


RECIPES = {}


def recipe(name, criterion, description, experiment=None):
    def wrap(fn):
        RECIPES[name] = Recipe(name, criterion, description, experiment or {}, fn)
        return fn
    return wrap


def _rows_csv(rows):
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([simulator._fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def run_recipe(name, out_dir=None, seeds=10):
    if name not in RECIPES:
        raise KeyError(f"unknown recipe {name!r}; known: {', '.join(RECIPES)}")
    r = RECIPES[name]
    result = r.fn(r.experiment, seeds)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"{name}.csv")
        simulator._atomic_write(path, _rows_csv(result.rows))
        result.evidence.append(path)
    return result


def _sim_config(experiment, seed, **extra):
    over = dict(experiment.get("config", {}))
    over.update({"seeds.data": seed, "seeds.sim": seed, "seeds.agent": seed})
    over.update(extra)
    return SimConfig().replace(**over)


# ---------------------------------------------------------------------------
# 1: degenerate equivalence
# ---------------------------------------------------------------------------

DEGENERATE = {"config": {"n_edges": 1, "data.n_clients": 1, "data.partition": "iid",
                         "data.num_samples": 200, "data.num_test": 50,
                         "training.H_range": (1, 1), "training.c": 1, "training.lr": 0.05,
                         "mixing.alpha": 1.0, "mixing.upsilon": 1.0, "target_accuracy": 1.0,
                         "staleness.k": 0, "slots.max_slots": 1000, "slots.jitter": 0.0},
              "steps": 200}


@recipe("degenerate-gd", 1, "1 edge, 1 client, H=c=1, alpha_tau=1 equals full-batch GD", DEGENERATE)
def degenerate_gd(exp, seeds):
    cfg = _sim_config(exp, 0)
    env, setup = simulator.make_env(cfg)
    env.backend.history = []
    env.run(FixedThreshold(0, cfg.staleness.tau_max))
    steps = exp["steps"]
    fed = env.backend.history[:steps]
    data = setup.clients[0]
    lr = cfg.training.lr
    ref = oracles.plain_gd(lambda w: learner.gradient(setup.spec, np.array(w), data).tolist(),
                           setup.init_model.tolist(), lr, steps)[1:]
    diffs = [float(np.max(np.abs(np.array(a) - np.array(b)))) for a, b in zip(fed, ref)]
    worst = max(diffs) if diffs else math.inf
    rows = [{"step": i + 1, "max_abs_diff": d} for i, d in enumerate(diffs)]
    ok = len(fed) == steps and worst <= 1e-12
    return RecipeResult("degenerate-gd", 1, ok,
                        f"{len(fed)} cloud updates compared, max coordinate diff {worst:.3g} (tol 1e-12)",
                        rows)


# ---------------------------------------------------------------------------
# 2: gradients
# ---------------------------------------------------------------------------

def _rel_err(a, b):
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 1e-8 else abs(a - b)


@recipe("gradient-suite", 2, "analytic gradients vs central differences",
        {"probes": 100, "tol_learner": 1e-5, "tol_q": 1e-4})
def gradient_suite(exp, seeds):
    rng = np.random.default_rng(0)
    rows = []
    worst = {"regularized-logistic": 0.0, "two-layer-mlp": 0.0, "q-network": 0.0}
    data, _ = learner.generate_synthetic(24, 3, 4, seed=3)
    X, y = data.X.tolist(), data.y.tolist()
    for kind in ("regularized-logistic", "two-layer-mlp"):
        spec = learner.LearnerSpec(kind, 4, 3, mu_reg=0.05, hidden_width=5)
        if kind == "regularized-logistic":
            f = lambda th: oracles.softmax_ce_loss(th, X, y, 3, 0.05)  # noqa: E731
        else:
            f = lambda th: oracles.mlp_ce_loss(th, X, y, 5, 3, 0.05)  # noqa: E731
        for p in range(exp["probes"]):
            w = rng.standard_normal(spec.num_params) * 0.7
            d = rng.standard_normal(spec.num_params)
            d /= np.linalg.norm(d)
            analytic = float(learner.gradient(spec, w, data) @ d)
            numeric = oracles.central_difference(f, w.tolist(), d.tolist(), h=1e-5)
            e = _rel_err(analytic, numeric)
            worst[kind] = max(worst[kind], e)
            rows.append({"model": kind, "probe": p, "analytic": analytic, "numeric": numeric, "rel_err": e})
    net = ddqn.QNetwork(10, 6, hidden=(8, 7), seed=1)
    for p in range(exp["probes"]):
        Xs = rng.standard_normal((4, 10))
        acts = rng.integers(0, 6, size=4)
        coef = rng.standard_normal(4)
        theta = net.flat() + rng.standard_normal(net.num_params) * 0.3
        net.set_flat(theta)
        grads = np.concatenate([g.ravel() for g in net.grad_taken(Xs, acts, coef)])
        d = rng.standard_normal(net.num_params)
        d /= np.linalg.norm(d)

        def f(th):
            layers = _layers(net, th)
            return sum(c * oracles.mlp_forward(x, layers)[a] for x, a, c in zip(Xs.tolist(), acts, coef))

        analytic = float(grads @ d)
        numeric = oracles.central_difference(f, theta.tolist(), d.tolist(), h=1e-5)
        e = _rel_err(analytic, numeric)
        worst["q-network"] = max(worst["q-network"], e)
        rows.append({"model": "q-network", "probe": p, "analytic": analytic, "numeric": numeric, "rel_err": e})
    ok = (worst["regularized-logistic"] < exp["tol_learner"] and worst["two-layer-mlp"] < exp["tol_learner"]
          and worst["q-network"] < exp["tol_q"])
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items())
    return RecipeResult("gradient-suite", 2, ok, detail, rows)


def _layers(net, theta):
    """Nested-list layers for the oracle forward pass from a flat parameter vector."""
    sizes = (net.n_in, *net.hidden, net.n_out)
    layers, i = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = [list(theta[i + r * b:i + (r + 1) * b]) for r in range(a)]
        i += a * b
        bias = list(theta[i:i + b])
        i += b
        layers.append((W, bias))
    return layers


# ---------------------------------------------------------------------------
# 3, 4, 6: simulation trends
# ---------------------------------------------------------------------------

@recipe("staleness-threshold", 3, "tau<=2 needs at most half the client epochs of no staleness control",
        {"config": {"data.partition": "noniid2"}, "threshold": 2, "ratio": 0.5, "need": 8})
def staleness_trend(exp, seeds):
    rows, wins = [], 0
    for s in range(seeds):
        cfg = _sim_config(exp, s, **{"staleness.policy": "fixed", "staleness.k": exp["threshold"]})
        fixed = simulator.run(cfg).summary
        free = simulator.run(cfg.replace(**{"staleness.policy": "unbounded"})).summary
        a, b = fixed["epochs_to_target"], free["epochs_to_target"]
        ratio = a / b if a is not None and b is not None else None
        win = ratio is not None and ratio <= exp["ratio"]
        wins += win
        rows.append({"seed": s, "epochs_fixed": a, "epochs_unbounded": b, "ratio": ratio,
                     "slots_fixed": fixed["slots_to_target"], "slots_unbounded": free["slots_to_target"],
                     "censored": fixed["censored"] or free["censored"], "pass": win})
    return RecipeResult("staleness-threshold", 3, wins >= exp["need"],
                        f"{wins}/{seeds} seeds with epoch ratio <= {exp['ratio']} (need {exp['need']})", rows)


@recipe("association-edge-iid", 4, "Edge-IID reaches the target in fewer cloud updates than Edge-NonIID",
        {"config": {"data.partition": "noniid1", "n_edges": 4, "association.classes_per_edge": 3},
         "need": 8})
def association_trend(exp, seeds):
    rows, wins = [], 0
    for s in range(seeds):
        cfg = _sim_config(exp, s)
        a = simulator.run(cfg.replace(**{"association.strategy": "edge_iid"})).summary
        b = simulator.run(cfg.replace(**{"association.strategy": "edge_noniid"})).summary
        x, y = a["cloud_updates_to_target"], b["cloud_updates_to_target"]
        win = x is not None and (y is None or x < y)
        wins += win
        rows.append({"seed": s, "updates_edge_iid": x, "updates_edge_noniid": y,
                     "js_edge_iid": a["total_js"], "js_edge_noniid": b["total_js"], "pass": win})
    return RecipeResult("association-edge-iid", 4, wins >= exp["need"],
                        f"{wins}/{seeds} seeds where Edge-IID needs fewer cloud updates (need {exp['need']})",
                        rows)


@recipe("comm-efficiency", 6, "HiFL needs at least 50% fewer cloud communications than FedAvg",
        {"config": {"data.partition": "noniid2"}, "reduction": 0.5})
def comm_efficiency(exp, seeds):
    rows, hifl, fedavg = [], [], []
    for s in range(seeds):
        cfg = _sim_config(exp, s)
        a = simulator.run(cfg).summary
        b = simulator.run(cfg.replace(method="fedavg")).summary
        hifl.append(a["cloud_comms_to_target"])
        fedavg.append(b["cloud_comms_to_target"])
        rows.append({"seed": s, "comms_hifl": a["cloud_comms_to_target"],
                     "comms_fedavg": b["cloud_comms_to_target"]})
    if any(v is None for v in hifl + fedavg):
        return RecipeResult("comm-efficiency", 6, False, "censored runs present", rows)
    mh, mf = float(np.median(hifl)), float(np.median(fedavg))
    reduction = 1.0 - mh / mf
    rows.append({"seed": "median", "comms_hifl": mh, "comms_fedavg": mf})
    return RecipeResult("comm-efficiency", 6, reduction >= exp["reduction"],
                        f"median cloud comms {mh:g} vs FedAvg {mf:g}: {reduction:.1%} fewer "
                        f"(need {exp['reduction']:.0%})", rows)


# ---------------------------------------------------------------------------
# 5, 7, 8: association and divergence
# ---------------------------------------------------------------------------

@recipe("lambda-monotonicity", 5, "total JS is non-increasing along an increasing lambda grid",
        {"config": {"data.partition": "noniid2"}, "grid": [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0]})
def lambda_monotonicity(exp, seeds):
    rows, good = [], 0
    for s in range(seeds):
        cfg = _sim_config(exp, s)
        inst = simulator.build_setup(cfg).instance
        js = [assoc.total_js(assoc.associate(inst, lam, seed=s), inst) for lam in exp["grid"]]
        mono = all(b <= a for a, b in zip(js, js[1:]))
        good += mono
        for lam, v in zip(exp["grid"], js):
            rows.append({"seed": s, "lam": lam, "total_js": v, "monotone": mono})
    return RecipeResult("lambda-monotonicity", 5, good == seeds,
                        f"{good}/{seeds} instances non-increasing over lambda grid {exp['grid']}", rows)


@recipe("js-properties", 7, "JS symmetry, range, identity and the disjoint-support value",
        {"pairs": 1000})
def js_properties(exp, seeds):
    rng = np.random.default_rng(7)
    rows, bad = [], 0
    for i in range(exp["pairs"]):
        K = int(rng.integers(2, 12))
        p = rng.dirichlet(np.full(K, 0.5))
        q = rng.dirichlet(np.full(K, 0.5))
        if i % 5 == 0:
            p[rng.random(K) < 0.4] = 0.0
            if p.sum() == 0:
                p[0] = 1.0
            p /= p.sum()
        if i % 7 == 0:
            q = p.copy()
        a, b = assoc.js_divergence(p, q), assoc.js_divergence(q, p)
        ok = (a == b and 0.0 <= a <= 1.0 and ((a <= 1e-12) == bool(np.allclose(p, q, rtol=0, atol=1e-12))))
        bad += not ok
        rows.append({"pair": i, "K": K, "js_pq": a, "js_qp": b, "ok": ok})
    disjoint = assoc.js_divergence([1.0, 0.0], [0.0, 1.0])
    ok = bad == 0 and disjoint == 1.0
    return RecipeResult("js-properties", 7, ok,
                        f"{exp['pairs'] - bad}/{exp['pairs']} pairs ok; JS([1,0],[0,1]) = {disjoint!r}", rows)


@recipe("association-oracle", 8, "greedy partitions are valid, never beat brute force, and match it on "
        "the symmetric instance", {"instances": 100, "lam": 0.5, "seed": 0})
def association_oracle(exp, seeds):
    rows, invalid, beaten = [], 0, 0
    for i in range(exp["instances"]):
        rng = np.random.default_rng(1000 + i)
        N, M = int(rng.integers(2, 8)), int(rng.integers(1, 4))
        inst = assoc.random_instance(N, M, 3, seed=1000 + i, range_prob=0.7,
                                     classes_per_client=int(rng.integers(1, 3)))
        lam = float(rng.choice([0.0, 0.1, exp["lam"], 5.0]))
        g = assoc.associate(inst, lam, seed=exp["seed"])
        _, best = oracles.exhaustive_association(inst.distributions.tolist(), inst.sizes.tolist(),
                                                 inst.latency.tolist(), lam, inst.reference.tolist())
        gv = assoc.objective(g, inst, lam)
        valid = g.is_partition_of(inst)
        invalid += not valid
        beaten += gv < best - 1e-9
        rows.append({"instance": i, "N": N, "M": M, "lam": lam, "valid": valid, "greedy": gv, "oracle": best})
    sym = assoc.AssociationInstance([[1, 0], [1, 0], [0, 1], [0, 1]], [10, 10, 10, 10], np.full((2, 4), 0.1))
    lam = 10.0
    g = assoc.associate(sym, lam, seed=exp["seed"])
    clusters, best = oracles.exhaustive_association(sym.distributions.tolist(), sym.sizes.tolist(),
                                                    sym.latency.tolist(), lam, sym.reference.tolist(),
                                                    nonempty=True)
    gjs = assoc.total_js(g, sym)
    match = gjs == 0.0 and abs(assoc.objective(g, sym, lam) - best) <= 1e-12
    rows.append({"instance": "symmetric", "N": 4, "M": 2, "lam": lam, "valid": g.is_partition_of(sym),
                 "greedy": assoc.objective(g, sym, lam), "oracle": best, "greedy_clusters": str(g.clusters),
                 "oracle_clusters": str(clusters), "greedy_js": gjs})
    ok = invalid == 0 and beaten == 0 and match
    return RecipeResult("association-oracle", 8, ok,
                        f"{invalid} invalid, {beaten} below oracle over {exp['instances']} instances; "
                        f"symmetric instance greedy {g.clusters} JS {gjs:.4g} vs oracle {clusters}", rows)


# ---------------------------------------------------------------------------
# 9: DDQN on the toy environment
# ---------------------------------------------------------------------------

@recipe("ddqn-toy", 9, "trained greedy DDQN within 10% of the best fixed threshold on the toy env",
        {"agents": 5, "episodes": 200, "tolerance": 0.10, "need": 4, "buffer": 500, "sync_every": 50})
def ddqn_toy(exp, seeds):
    env = toy_env()
    costs = {}
    for k in range(env.cfg.tau_max + 1):
        costs[k] = -sum(toy_env().run(FixedThreshold(k, env.cfg.tau_max)))
    best_k = min(costs, key=costs.get)
    best = costs[best_k]
    rows = [{"policy": f"fixed({k})", "cost": c} for k, c in costs.items()]
    hp = ddqn.AgentHyperparams(buffer_size=exp["buffer"], sync_every=exp["sync_every"])
    wins, violations = 0, []
    for s in range(exp["agents"]):
        audit = _InvariantAudit()
        policy, _ = ddqn.train_agent(lambda ep: toy_env(), hp, exp["episodes"], seed=s, audit=audit)
        cost = -sum(toy_env().run(policy))
        win = cost <= (1.0 + exp["tolerance"]) * best
        wins += win
        violations += audit.violations
        rows.append({"policy": f"ddqn(seed={s})", "cost": cost, "within_tolerance": win,
                     "audited_updates": audit.checks, "invariant_violations": len(audit.violations)})
    ok = wins >= exp["need"] and not violations
    return RecipeResult("ddqn-toy", 9, ok,
                        f"{wins}/{exp['agents']} agents within {exp['tolerance']:.0%} of fixed({best_k}) "
                        f"cost {best:.4g}; {len(violations)} invariant violations", rows)


class _InvariantAudit:
    """Checks replay FIFO order and target-network freezing after every update."""

    def __init__(self):
        self.last_target = None
        self.checks = 0
        self.violations = []

    def __call__(self, st):
        buf = st["buffer"]
        self.checks += 1
        n = min(buf.inserted, buf.capacity)
        if len(buf) != n or list(buf.ids) != list(range(buf.inserted - n, buf.inserted)):
            self.violations.append((st["updates"], "fifo"))
        target = st["target"].flat()
        synced = bool(st["syncs"]) and st["syncs"][-1] == st["updates"]
        if synced:
            if not np.array_equal(target, st["online"].flat()):
                self.violations.append((st["updates"], "sync"))
        elif self.last_target is not None and not np.array_equal(target, self.last_target):
            self.violations.append((st["updates"], "freeze"))
        self.last_target = target


# ---------------------------------------------------------------------------
# 10: bounds
# ---------------------------------------------------------------------------

BOUND_CONSTANTS = dict(beta=2.0, mu=0.5, rho=1.0, eta=0.1, c=3, H_min=1, H_max=3, delta_max=0.2,
                       Delta=0.1, V=0.05, alpha_tau=0.7, T_c=20)


@recipe("bound-calculators", 10, "g and kappa edge cases, monotone bound in tau, drift check",
        {"constants": BOUND_CONSTANTS, "F0_gap": 5.0, "taus": list(range(0, 17)), "intervals": 50})
def bound_calculators(exp, seeds):
    k = theory.ConvexConstants(**exp["constants"])
    g0 = theory.g_function(0.3, k.beta, k.eta, 0)
    g1 = theory.g_function(0.3, k.beta, k.eta, 1)
    kap0 = theory.kappa(0.0, k.eta, k.mu, k.c, k.H_min, k.T_c)
    sweep = theory.tau_sweep(k, exp["F0_gap"], 0.7, 0.99, exp["taus"])
    C3 = sweep[0]["C3"]
    increasing = all(b["U"] > a["U"] for a, b in zip(sweep, sweep[1:]))
    tr, _ = learner.generate_synthetic(400, 4, 6, 4.0, seed=0, anisotropy=3.0)
    clients = learner.partition(tr, "noniid2", 5, seed=0)
    spec = learner.LearnerSpec("regularized-logistic", 6, 4, 0.01)
    beta, _ = learner.estimate_convex_constants(spec, learner.pooled(clients))
    rep = theory.empirical_drift_check(spec, clients, learner.init_params(spec, 0), 0.5 / beta, 3,
                                        exp["intervals"])
    rows = [{"check": "g(0)", "value": g0}, {"check": "g(1)", "value": g1},
            {"check": "kappa(alpha_tau=0)", "value": kap0}]
    rows += [{"check": f"U(tau={r['tau']})", "value": r["U"]} for r in sweep]
    rows.append({"check": "drift violations", "value": rep.violations})
    ok = (g0 == 0.0 and g1 == 0.0 and kap0 == 1.0 and exp["F0_gap"] > C3 and increasing and rep.ok)
    return RecipeResult("bound-calculators", 10, ok,
                        f"g(0)={g0!r} g(1)={g1!r} kappa(0)={kap0!r}; U increasing over {len(sweep)} taus "
                        f"(C2={exp['F0_gap']} > C3={C3:.4g}): {increasing}; drift check "
                        f"{rep.violations} violations over {exp['intervals']} intervals", rows)


# ---------------------------------------------------------------------------
# 11: determinism
# ---------------------------------------------------------------------------

@recipe("determinism", 11, "repeating a run yields byte-identical summary CSVs and logs",
        {"config": {"data.partition": "noniid2"},
         "methods": ["hifl", "fedavg", "hierfavg", "fedasync"], "policies": ["fixed", "random", "unbounded"]})
def determinism(exp, seeds):
    def batch():
        rows, logs = [], []
        for m in exp["methods"]:
            for p in exp["policies"] if m == "hifl" else ["fixed"]:
                log = simulator.run(_sim_config(exp, 3, method=m, **{"staleness.policy": p}))
                rows.append(log.summary)
                logs.append(log.to_jsonl())
        return simulator.summary_csv(rows), logs

    a, la = batch()
    b, lb = batch()
    same = a == b and la == lb
    rows = [{"run": i, "bytes": len(x), "identical": x == y} for i, (x, y) in enumerate(zip(la, lb))]
    return RecipeResult("determinism", 11, same,
                        f"summary CSV {len(a)} bytes identical: {a == b}; {sum(x == y for x, y in zip(la, lb))}"
                        f"/{len(la)} event logs identical", rows)


def criteria():
    return sorted(RECIPES.values(), key=lambda r: r.criterion)
