"""Discrete-event simulation of hierarchical FL and its baselines.

HiFL and HiFlash run on :class:`~hiflash.staleness_mdp.SlotEnv` with a
learning backend. FedAsync reuses the same slot loop with one single-client
"edge" per client. FedAvg and HierFAVG are synchronous round loops whose round
duration is the slowest participant's latency.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import association as assoc
from . import cost_model, learner
from .config import SimConfig
from .cost_model import CostWeights
from .ddqn import load_checkpoint
from .hier_aggregation import CloudState, MixingParams, cloud_update, edge_training, weighted_average
from .staleness_mdp import (ArrivalQueue, EdgeSpec, FixedThreshold, NoControl, RandomThreshold,
                            SlotConfig, SlotEnv, train_slots)

LOG_VERSION = 1
SUMMARY_SCHEMA = "hiflash-summary/1"
SUMMARY_COLUMNS = ("schema", "method", "config_hash", "seed", "policy", "strategy", "lam",
                   "reached", "censored", "final_accuracy", "slots", "slots_to_target",
                   "cloud_comms_to_target", "cloud_updates_to_target", "epochs_to_target",
                   "cloud_comms", "discarded", "client_epochs", "comp_cost", "comm_cost",
                   "system_cost", "normalized_cost", "mean_waiting_time", "total_js")


class SimulationError(RuntimeError):
    pass


def evaluate(spec, model, test):
    """Fraction of test samples whose argmax prediction is correct."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(learner.predict(spec, model, test.X) == test.y))


@dataclass
class Setup:
    spec: learner.LearnerSpec
    clients: list
    test: learner.ClientDataset
    K: int
    profile: cost_model.ResourceProfile
    instance: assoc.AssociationInstance
    association: assoc.Association
    init_model: np.ndarray


def build_setup(cfg):
    d = cfg.data
    train, test = learner.generate_synthetic(d.num_samples, d.num_classes, d.feature_dim,
                                             d.class_separation, seed=cfg.seeds.data,
                                             num_test=d.num_test, anisotropy=d.anisotropy)
    clients = learner.partition(train, d.partition, d.n_clients, seed=cfg.seeds.data,
                                size_range=d.size_range)
    spec = learner.LearnerSpec(cfg.learner.kind, d.feature_dim, d.num_classes,
                               cfg.learner.mu_reg, cfg.learner.hidden_width)
    r = cfg.resources
    profile = cost_model.make_profile(len(clients), cfg.n_edges, batch_size=r.batch_size,
                                      bits_per_sample=r.bits_per_sample, f_range=r.f_range,
                                      zeta=r.zeta, bw_range=r.bw_range, range_prob=r.range_prob,
                                      model_size=r.model_size, snr_db=r.snr_db,
                                      c=cfg.training.c, seed=cfg.seeds.data + 1)
    dists = np.array([learner.label_distribution(c, d.num_classes) for c in clients])
    sizes = np.array([len(c) for c in clients], dtype=float)
    instance = assoc.AssociationInstance(dists, sizes, profile.latency_matrix())
    a = cfg.association
    if a.strategy == "file":
        association = load_association(a.file, instance)
    else:
        association = assoc.build(instance, a.strategy, a.lam, cfg.seeds.sim, a.classes_per_edge)
    init = learner.init_params(spec, seed=cfg.seeds.sim, scale=cfg.learner.init_scale)
    return Setup(spec, clients, test, d.num_classes, profile, instance, association, init)


def load_association(path, instance):
    with open(path) as fh:
        doc = json.load(fh) if str(path).endswith(".json") else _yaml_load(fh)
    clusters = doc["clusters"] if isinstance(doc, dict) else doc
    result = assoc.Association([sorted(int(k) for k in cl) for cl in clusters])
    if not result.is_partition_of(instance):
        raise SimulationError(f"{path}: association is not a valid in-range partition")
    return result


def _yaml_load(fh):
    import yaml

    return yaml.safe_load(fh)


def edge_specs(setup):
    specs = []
    for m, cl in enumerate(setup.association.clusters):
        specs.append(EdgeSpec(tuple(setup.profile.comp_cost(k) for k in cl),
                              tuple(setup.profile.comm_cost(m, k) for k in cl)))
    return specs


def _check_finite(model, where):
    if not np.isfinite(model).all():
        raise SimulationError(f"non-finite model values after {where}; lower the learning rate")


class FLBackend:
    """Learning state for the slot loop: the cloud model and the clients."""

    def __init__(self, cfg, setup, groups):
        self.cfg = cfg
        self.setup = setup
        self.groups = groups
        self.mixing = MixingParams(cfg.mixing.alpha, cfg.mixing.upsilon)
        self.history = None  # set to a list to record the cloud model after each update
        t = cfg.training
        self.schedule = learner.LRSchedule(t.lr, t.lr_decay, t.lr_every)
        self.per_epoch = {}
        self.samplers = {}
        for m, group in enumerate(groups):
            for i, data in enumerate(group):
                bs = t.batch_size
                self.per_epoch[(m, i)] = 1 if bs is None else math.ceil(len(data) / bs)
                seed = cfg.seeds.sim * 100_003 + data.client_id
                self.samplers[(m, i)] = learner.MinibatchSampler(len(data), bs, seed)

    @property
    def t_c(self):
        return self.cloud.t_c

    @property
    def model(self):
        return self.cloud.model

    def reset(self):
        self.cloud = CloudState(self.setup.init_model.copy(), 0)
        self.local_updates = {}
        self.accuracy = evaluate(self.setup.spec, self.model, self.setup.test)
        return self.accuracy

    def start(self, edge, H):
        group = self.groups[edge]
        rates = [self.schedule(self.local_updates.get(group[i].client_id, 0)) for i in range(len(group))]
        samplers = [self.samplers[(edge, i)] for i in range(len(group))]
        model, per_client = edge_training(self.setup.spec, group, self.model, H,
                                          self.cfg.training.c, rates, samplers)
        _check_finite(model, f"edge {edge} training")
        return model, per_client

    def finish(self, edge, payload, tau, accepted):
        model, per_client = payload
        group = self.groups[edge]
        epochs = 0.0
        for i, data in enumerate(group):
            self.local_updates[data.client_id] = self.local_updates.get(data.client_id, 0) + per_client
            epochs += per_client / self.per_epoch[(edge, i)]
        if accepted:
            self.cloud, _, _ = cloud_update(self.cloud, model, self.t_c - tau, self.mixing)
            _check_finite(self.model, f"cloud update {self.t_c}")
            if self.history is not None:
                self.history.append(self.model.copy())
        return epochs

    def end_slot(self, slot, updated):
        every = self.cfg.eval_every
        if not updated and not (every and slot % every == 0):
            return None, False
        self.accuracy = evaluate(self.setup.spec, self.model, self.setup.test)
        return self.accuracy, self.accuracy >= self.cfg.target_accuracy


def make_policy(cfg):
    s = cfg.staleness
    if s.policy == "fixed":
        return FixedThreshold(s.k, s.tau_max)
    if s.policy == "random":
        return RandomThreshold(s.tau_max, seed=cfg.seeds.agent)
    if s.policy == "unbounded":
        return NoControl()
    policy = load_checkpoint(s.checkpoint)
    if policy.tau_max != s.tau_max:
        raise SimulationError(f"checkpoint tau_max {policy.tau_max} != staleness.tau_max {s.tau_max}")
    return policy


def slot_config(cfg, admission=None):
    s = cfg.staleness
    return SlotConfig(tau_max=s.tau_max, weights=CostWeights(cfg.costs.sigma1, cfg.costs.sigma2),
                      slot_length=cfg.slots.slot_length, H_range=cfg.training.H_range,
                      admission=admission or s.admission, arrival_prob=s.arrival_prob,
                      backoff=s.backoff, max_slots=cfg.slots.max_slots, jitter=cfg.slots.jitter)


def make_env(cfg, setup=None):
    """Slot environment over the configured federation (also the agent's training env)."""
    setup = setup or build_setup(cfg)
    groups = [[setup.clients[k] for k in cl] for cl in setup.association.clusters]
    return SlotEnv(edge_specs(setup), FLBackend(cfg, setup, groups), slot_config(cfg),
                   seed=cfg.seeds.sim), setup


@dataclass
class EventLog:
    records: list
    config: dict
    config_hash: str
    summary: dict

    def to_jsonl(self):
        head = {"version": LOG_VERSION, "config_hash": self.config_hash, "config": self.config}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path):
        _atomic_write(path, self.to_jsonl())


def _atomic_write(path, text):
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run(cfg, policy=None, setup=None):
    """Simulate ``cfg`` to the target accuracy or the slot budget."""
    cfg.validate()
    if cfg.method == "fedasync":
        return run_fedasync(cfg)
    if cfg.method == "fedavg":
        return _sync_run(cfg, setup, "fedavg")
    if cfg.method == "hierfavg":
        return _sync_run(cfg, setup, "hierfavg")
    env, setup = make_env(cfg, setup)
    policy = policy or make_policy(cfg)
    env.run(policy)
    return _finish(cfg, setup, env.events, env.reason, getattr(policy, "name", "custom"), env.slot)


def run_fedasync(cfg):
    """Client-level asynchronous FL: every client is its own single-member edge."""
    setup = build_setup(cfg)
    specs, groups = [], []
    for k, data in enumerate(setup.clients):
        m = int(np.nanargmax(np.array(setup.profile.clients[k].bandwidth)))
        specs.append(EdgeSpec((setup.profile.comp_cost(k),), (setup.profile.comm_cost(m, k),)))
        groups.append([data])
    cfg1 = cfg.replace(**{"training.H_range": (1, 1)})
    env = SlotEnv(specs, FLBackend(cfg1, setup, groups), slot_config(cfg1, admission="open"),
                  seed=cfg.seeds.sim)
    env.run(NoControl())
    return _finish(cfg, setup, env.events, env.reason, "unbounded", env.slot)


def _sync_run(cfg, setup, kind):
    """FedAvg (sampled clients) or HierFAVG (sampled edges of sampled clients)."""
    setup = setup or build_setup(cfg)
    rng = np.random.default_rng(cfg.seeds.sim)
    b = cfg.baselines
    t = cfg.training
    spec = setup.spec
    schedule = learner.LRSchedule(t.lr, t.lr_decay, t.lr_every)
    samplers = {d.client_id: learner.MinibatchSampler(len(d), t.batch_size,
                                                      cfg.seeds.sim * 100_003 + d.client_id)
                for d in setup.clients}
    updates = {d.client_id: 0 for d in setup.clients}
    per_epoch = {d.client_id: 1 if t.batch_size is None else math.ceil(len(d) / t.batch_size)
                 for d in setup.clients}
    model = setup.init_model.copy()
    acc = evaluate(spec, model, setup.test)
    tot = dict(slot=0, epochs=0.0, comp=0.0, comm=0.0, comms=0)
    records = []
    reason = "budget"
    best_bw = [int(np.nanargmax(np.array(r.bandwidth))) for r in setup.profile.clients]

    def record(kind_, t_c, edge=None):
        records.append({"slot": tot["slot"], "t_c": t_c, "event": kind_, "edge": edge, "tau": 0,
                        "accuracy": acc, "client_epochs": tot["epochs"], "comp_cost": tot["comp"],
                        "comm_cost": tot["comm"], "cloud_comms": tot["comms"],
                        "cloud_updates": t_c, "discarded": 0})

    def local(data, start, steps):
        rate = schedule(updates[data.client_id])
        w = start
        for _ in range(steps):
            w = learner.sgd_step(spec, w, data, rate, samplers[data.client_id])
        updates[data.client_id] += steps
        tot["epochs"] += steps / per_epoch[data.client_id]
        return w

    for rnd in range(b.max_rounds):
        if kind == "fedavg":
            n = min(b.fedavg_clients, len(setup.clients))
            chosen = sorted(rng.choice(len(setup.clients), size=n, replace=False))
            models = [local(setup.clients[k], model, t.c) for k in chosen]
            model = weighted_average(models, [len(setup.clients[k]) for k in chosen])
            lat = max(setup.profile.comp_cost(k) + setup.profile.comm_cost(best_bw[k], k)
                      for k in chosen)
            tot["comp"] += sum(setup.profile.comp_cost(k) for k in chosen)
            tot["comm"] += sum(setup.profile.comm_cost(best_bw[k], k) for k in chosen)
            tot["comms"] += n
        else:
            H = t.H_range[1]
            nonempty = [m for m, cl in enumerate(setup.association.clusters) if cl]
            edges = sorted(rng.choice(nonempty, size=min(b.hierfavg_edges, len(nonempty)),
                                      replace=False))
            edge_models, edge_sizes, lat = [], [], 0.0
            for m in edges:
                cl = setup.association.clusters[m]
                members = sorted(rng.choice(cl, size=min(b.hierfavg_clients_per_edge, len(cl)),
                                            replace=False))
                w = model
                for _ in range(H):
                    ms = [local(setup.clients[k], w, t.c) for k in members]
                    w = weighted_average(ms, [len(setup.clients[k]) for k in members])
                edge_models.append(w)
                edge_sizes.append(sum(len(setup.clients[k]) for k in members))
                lat = max(lat, H * max(setup.profile.comp_cost(k) + setup.profile.comm_cost(m, k)
                                       for k in members))
                tot["comp"] += H * sum(setup.profile.comp_cost(k) for k in members)
                tot["comm"] += sum(setup.profile.comm_cost(m, k) for k in members)
            model = weighted_average(edge_models, edge_sizes)
            tot["comms"] += len(edges)
        _check_finite(model, f"{kind} round {rnd}")
        tot["slot"] += train_slots(1, lat, cfg.slots.slot_length)
        acc = evaluate(spec, model, setup.test)
        record("cloud-update", rnd + 1)
        if acc >= cfg.target_accuracy:
            reason = "target"
            break
        if tot["slot"] >= cfg.slots.max_slots:
            break
    return _finish(cfg, setup, records, reason, "sync", tot["slot"])


def _finish(cfg, setup, records, reason, policy_name, n_slots):
    summary = summarize(records, cfg, setup, reason, policy_name, n_slots=n_slots)
    return EventLog(records, cfg.to_dict(), cfg.hash(), summary)


def summarize(records, cfg, setup, reason, policy_name="", reference_cost=None, n_slots=None):
    """One summary row; ``*_to_target`` fields are ``None`` for censored runs.

    ``n_slots`` is the number of simulated slots; without it the count is
    inferred from the last logged event.
    """
    hit = None
    for r in records:
        if r["accuracy"] is not None and r["accuracy"] >= cfg.target_accuracy:
            hit = r
            break
    last = records[-1] if records else {"slot": 0, "accuracy": None, "client_epochs": 0.0,
                                        "comp_cost": 0.0, "comm_cost": 0.0, "cloud_comms": 0,
                                        "cloud_updates": 0, "discarded": 0}
    system = cfg.costs.sigma1 * last["comp_cost"] + cfg.costs.sigma2 * last["comm_cost"]
    hier = cfg.method in ("hifl", "hiflash", "hierfavg")
    waits = assoc.waiting_times(setup.association, setup.instance) if hier else []
    row = {"schema": SUMMARY_SCHEMA, "method": cfg.method, "config_hash": cfg.hash(),
           "seed": cfg.seeds.sim, "policy": policy_name, "strategy": cfg.association.strategy,
           "lam": cfg.association.lam, "reached": hit is not None, "censored": hit is None,
           "final_accuracy": last["accuracy"], "slots": n_slots if n_slots is not None else last["slot"] + 1,
           "slots_to_target": hit["slot"] + 1 if hit else None,
           "cloud_comms_to_target": hit["cloud_comms"] if hit else None,
           "cloud_updates_to_target": hit["cloud_updates"] if hit else None,
           "epochs_to_target": hit["client_epochs"] if hit else None,
           "cloud_comms": last["cloud_comms"], "discarded": last["discarded"],
           "client_epochs": last["client_epochs"], "comp_cost": last["comp_cost"],
           "comm_cost": last["comm_cost"], "system_cost": system,
           "normalized_cost": system / reference_cost if reference_cost else None,
           "mean_waiting_time": float(np.mean(waits)) if waits else None,
           "total_js": assoc.total_js(setup.association, setup.instance) if hier else None}
    return row


def normalize_costs(rows, reference_method=None):
    """Divide ``system_cost`` by the reference row's (default: the largest)."""
    costs = [r["system_cost"] for r in rows]
    if reference_method is not None:
        ref = [r["system_cost"] for r in rows if r["method"] == reference_method]
        base = ref[0] if ref else max(costs)
    else:
        base = max(costs)
    for r in rows:
        r["normalized_cost"] = r["system_cost"] / base if base else None
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def summary_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_summary_csv(rows, path):
    _atomic_write(path, summary_csv(rows))


def long_table(rows, id_columns=("method", "seed", "policy", "strategy", "lam")):
    """Plot-ready long format: one metric value per row."""
    out = []
    for r in rows:
        ids = {c: r.get(c) for c in id_columns}
        for c in SUMMARY_COLUMNS:
            if c in id_columns or c in ("schema", "config_hash"):
                continue
            v = r.get(c)
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                out.append({**ids, "metric": c, "value": v})
    return out


def long_csv(rows):
    table = long_table(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("method", "seed", "policy", "strategy", "lam", "metric", "value")
    w.writerow(cols)
    for r in table:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def checkin_arrivals(durations, n_slots, seed=0, arrival_prob=1.0, backoff=1):
    """Check-in schedule when every check-in is admitted and runs ``durations[m]`` slots.

    Returns ``(slot, edge)`` pairs. An edge re-enters the idle queue ``backoff``
    slots after it completes.
    """
    if not durations:
        raise ValueError("need at least one edge")
    rng = np.random.default_rng(seed)
    queue = ArrivalQueue(rng.permutation(len(durations)), rng, arrival_prob)
    busy_until = {}
    out = []
    for slot in range(n_slots):
        for m, end in list(busy_until.items()):
            if end <= slot:
                del busy_until[m]
                queue.push(m, end - 1 + backoff)
        m = queue.pop(slot)
        if m is not None:
            out.append((slot, m))
            busy_until[m] = slot + durations[m]
    return out
