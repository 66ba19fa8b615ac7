"""Slotted staleness-control environment.

One slot runs in this order: at most one check-in is answered by the policy,
running edges train, at most one edge uploads (staleness gate, then cloud mix
or discard), slot costs are charged and the reward is emitted. The
environment is driven by a *backend* that owns the learning state. The FL
simulator and the cost-only toy environments are both backends.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cost_model import CostWeights
from .hier_aggregation import EdgeRun

UNBOUNDED = math.inf


@dataclass(frozen=True)
class MdpState:
    est_comp: np.ndarray
    est_comm: np.ndarray
    est_train_slots: np.ndarray
    rem_slots: np.ndarray
    checkin: np.ndarray

    def __post_init__(self):
        if self.checkin.sum() > 1:
            raise ValueError("at most one check-in per slot")
        if float(self.checkin @ self.rem_slots) != 0:
            raise ValueError("a checking-in edge cannot be running")

    @property
    def n_edges(self) -> int:
        return len(self.checkin)

    def vector(self):
        return np.concatenate([self.est_comp, self.est_comm, self.est_train_slots,
                               self.rem_slots, self.checkin]).astype(float)

    @property
    def checkin_edge(self):
        hits = np.flatnonzero(self.checkin)
        return int(hits[0]) if len(hits) else None


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


def apply_action(running, checkin, a):
    """Running set after answering a check-in: join iff ``a >= 0``."""
    running = np.asarray(running, dtype=int)
    checkin = np.asarray(checkin, dtype=int)
    if (running & checkin).any():
        raise ValueError("check-in edge is already running")
    return running + checkin if a >= 0 else running.copy()


def reward(comp_cost, comm_cost, weights):
    if comp_cost < 0 or comm_cost < 0:
        raise ValueError("costs must be non-negative")
    return -weights.sigma1 * comp_cost - weights.sigma2 * comm_cost - 1.0


def cumulative_reward(rewards, gamma=1.0):
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


# ---------------------------------------------------------------------------
# staleness policies
# ---------------------------------------------------------------------------

class FixedThreshold:
    def __init__(self, k, tau_max):
        if not 0 <= k <= tau_max:
            raise ValueError(f"threshold {k} outside [0, {tau_max}]")
        self.k = k
        self.name = f"fixed({k})"

    def __call__(self, state):
        return self.k


class RandomThreshold:
    """Uniform over {0..tau_max}; never rejects."""

    def __init__(self, tau_max, seed=0):
        self.tau_max = tau_max
        self.rng = np.random.default_rng(seed)
        self.name = f"random({tau_max})"

    def __call__(self, state):
        return int(self.rng.integers(0, self.tau_max + 1))


class NoControl:
    name = "unbounded"

    def __call__(self, state):
        return UNBOUNDED


# ---------------------------------------------------------------------------
# edges, arrivals and the environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeSpec:
    """Jitter-free per-client costs of one edge for a single client-edge round.

    ``comp`` is each member's c-iteration compute time and ``comm`` each
    member's model transfer time.
    """

    comp: tuple
    comm: tuple

    @property
    def latency(self) -> float:
        return max(a + b for a, b in zip(self.comp, self.comm)) if self.comp else 0.0

    @property
    def empty(self) -> bool:
        return not self.comp


@dataclass
class SlotConfig:
    tau_max: int = 16
    weights: CostWeights = field(default_factory=CostWeights)
    slot_length: float = 0.05
    H_range: tuple = (1, 3)
    admission: str = "budget"
    arrival_prob: float = 1.0
    backoff: int = 1
    max_slots: int = 5000
    jitter: float = 0.2

    def __post_init__(self):
        if self.admission not in ("budget", "open"):
            raise ValueError("admission must be 'budget' or 'open'")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must lie in [0, 1)")
        if self.slot_length <= 0 or self.backoff < 1:
            raise ValueError("slot_length must be positive and backoff >= 1")


def train_slots(H, latency, slot_length):
    """Slots an edge round of ``H`` client-edge aggregations occupies."""
    return max(1, math.ceil(H * latency / slot_length - 1e-9))


class ArrivalQueue:
    """FIFO of idle edges; the head checks in once its backoff expires."""

    def __init__(self, edges, rng, arrival_prob=1.0):
        self.rng = rng
        self.arrival_prob = arrival_prob
        self.queue = deque((int(m), 0) for m in edges)

    def push(self, edge, ready_slot):
        self.queue.append((edge, ready_slot))

    def pop(self, slot):
        if self.arrival_prob < 1.0 and self.rng.random() >= self.arrival_prob:
            return None
        for i, (edge, ready) in enumerate(self.queue):
            if ready <= slot:
                del self.queue[i]
                return edge
        return None


class SlotEnv:
    """The slotted environment. ``reset()`` then ``step(action)`` per slot.

    ``events`` collects one dict per event with cumulative counters, which the
    simulator turns into its metrics log.
    """

    def __init__(self, edges, backend, config=None, seed=0):
        self.edges = list(edges)
        self.backend = backend
        self.cfg = config or SlotConfig()
        self.seed = seed
        self.M = len(self.edges)
        self.n_actions = self.cfg.tau_max + 2

    # -- estimates ---------------------------------------------------------
    def estimates(self, m, H):
        e = self.edges[m]
        return H * sum(e.comp), sum(e.comm), train_slots(H, e.latency, self.cfg.slot_length)

    def feature_scale(self):
        """Per-feature maxima of the jitter-free estimates, for normalisation."""
        H = self.cfg.H_range[1]
        est = [self.estimates(m, H) for m in range(self.M) if not self.edges[m].empty]
        comp = max(x[0] for x in est) or 1.0
        comm = max(x[1] for x in est) or 1.0
        slots = max(x[2] for x in est) or 1.0
        scale = np.concatenate([np.full(self.M, comp), np.full(self.M, comm),
                                np.full(self.M, slots), np.full(self.M, slots), np.ones(self.M)])
        return scale

    # -- episode -----------------------------------------------------------
    def reset(self):
        self.rng = np.random.default_rng(self.seed)
        self.slot = 0
        self.running = {}
        self.H_next = {m: self._draw_H() for m in range(self.M)}
        active = [m for m in range(self.M) if not self.edges[m].empty]
        order = self.rng.permutation(active) if active else []
        self.arrivals = ArrivalQueue(order, self.rng, self.cfg.arrival_prob)
        self.events = []
        self.totals = dict(comp=0.0, comm=0.0, accepted=0, discarded=0, rejected=0,
                           epochs=0.0, reward=0.0)
        self.accuracy = self.backend.reset()
        self.done = False
        self.reason = None
        self.checkin = self.arrivals.pop(self.slot)
        if self.checkin is not None:
            self._log("checkin", self.checkin)
        return self.state()

    def _draw_H(self):
        lo, hi = self.cfg.H_range
        return int(self.rng.integers(lo, hi + 1))

    def state(self):
        comp = np.zeros(self.M)
        comm = np.zeros(self.M)
        slots = np.zeros(self.M)
        rem = np.zeros(self.M)
        chk = np.zeros(self.M)
        for m in range(self.M):
            if self.edges[m].empty:
                continue
            H = self.running[m].H if m in self.running else self.H_next[m]
            comp[m], comm[m], slots[m] = self.estimates(m, H)
            if m in self.running:
                rem[m] = self.running[m].remaining_slots
        if self.checkin is not None:
            chk[self.checkin] = 1.0
        return MdpState(comp, comm, slots, rem, chk)

    def running_vector(self):
        v = np.zeros(self.M, dtype=int)
        for m in self.running:
            v[m] = 1
        return v

    def admissible(self, threshold):
        """Staleness budget: each edge could be overtaken by every concurrent edge."""
        if self.cfg.admission == "open":
            return True
        n_run = len(self.running)
        if n_run > threshold:
            return False
        t_c = self.backend.t_c
        return all((t_c - r.checked_in_at) + n_run <= r.threshold for r in self.running.values())

    def _jittered(self, m, H):
        e = self.edges[m]
        j = self.cfg.jitter
        n = len(e.comp)
        if j > 0:
            fj = self.rng.uniform(1 - j, 1 + j, size=n)
            bj = self.rng.uniform(1 - j, 1 + j, size=n)
        else:
            fj = bj = np.ones(n)
        comp = np.array(e.comp) / fj
        comm = np.array(e.comm) / bj
        lat = float(np.max(comp + comm))
        return H * float(comp.sum()), float(comm.sum()), train_slots(H, lat, self.cfg.slot_length)

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        i = self.slot
        info = {"slot": i, "checkin": self.checkin, "action": action, "admitted": False}
        if self.checkin is not None:
            m = self.checkin
            a = action
            if not (a == UNBOUNDED or -1 <= a <= self.cfg.tau_max):
                raise ValueError(f"action {a} outside [-1, {self.cfg.tau_max}]")
            if a >= 0 and self.admissible(a):
                H = self.H_next[m]
                comp, comm, T = self._jittered(m, H)
                payload = self.backend.start(m, H)
                self.running[m] = EdgeRun(m, self.backend.t_c, a, payload, H, T, start_slot=i,
                                          total_slots=T, comp_cost=comp, comm_cost=comm)
                info["admitted"] = True
                self._log("accept", m, threshold=a, H=H, train_slots=T)
            else:
                self.totals["rejected"] += 1
                self.arrivals.push(m, i + self.cfg.backoff)
                self._log("reject", m, threshold=a, reason="policy" if a < 0 else "budget")

        comp_cost = 0.0
        for run in self.running.values():
            if run.remaining_slots > 0:
                comp_cost += run.comp_cost / run.total_slots
                run.remaining_slots -= 1

        comm_cost = 0.0
        updated = False
        due = sorted((r for r in self.running.values() if r.remaining_slots == 0),
                     key=lambda r: (r.start_slot, r.edge_id))
        if due:
            run = due[0]
            for other in due[1:]:
                self._log("defer", other.edge_id)
            del self.running[run.edge_id]
            comm_cost = run.comm_cost
            tau = self.backend.t_c - run.checked_in_at
            accepted = tau <= run.threshold
            self.totals["epochs"] += self.backend.finish(run.edge_id, run.model, tau, accepted)
            if accepted:
                self.totals["accepted"] += 1
                updated = True
                self._log("complete", run.edge_id, tau=tau)
                self._log("cloud-update", run.edge_id, tau=tau)
            else:
                self.totals["discarded"] += 1
                self._log("discard", run.edge_id, tau=tau, threshold=run.threshold)
            self.H_next[run.edge_id] = self._draw_H()
            self.arrivals.push(run.edge_id, i + 1)

        r = reward(comp_cost, comm_cost, self.cfg.weights)
        self.totals["comp"] += comp_cost
        self.totals["comm"] += comm_cost
        self.totals["reward"] += r
        acc, reached = self.backend.end_slot(i, updated)
        if acc is not None:
            self.accuracy = acc
            self._log("eval", None)
        self.slot += 1
        if reached:
            self.done, self.reason = True, "target"
        elif self.slot >= self.cfg.max_slots:
            self.done, self.reason = True, "budget"
        self.checkin = None
        if not self.done:
            self.checkin = self.arrivals.pop(self.slot)
            if self.checkin is not None:
                self._log("checkin", self.checkin)
        info.update(comp=comp_cost, comm=comm_cost, reason=self.reason)
        return self.state(), r, self.done, info

    def _log(self, kind, edge, **extra):
        t = self.totals
        rec = {"slot": self.slot, "t_c": self.backend.t_c, "event": kind, "edge": edge,
               "tau": extra.pop("tau", None), "accuracy": self.accuracy,
               "client_epochs": t["epochs"], "comp_cost": t["comp"], "comm_cost": t["comm"],
               "cloud_comms": t["accepted"] + t["discarded"], "cloud_updates": t["accepted"],
               "discarded": t["discarded"]}
        rec.update(extra)
        self.events.append(rec)

    def run(self, policy):
        """Drive one episode with ``policy(state) -> action``."""
        state = self.reset()
        rewards = []
        while not self.done:
            a = policy(state) if state.checkin_edge is not None else 0
            state, r, _, _ = self.step(a)
            rewards.append(r)
        return rewards


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class ProgressBackend:
    """Backends implement ``reset() -> accuracy``, ``start(edge, H) -> payload``,
    ``finish(edge, payload, tau, accepted) -> epochs``, ``end_slot(slot,
    updated) -> (accuracy or None, reached)`` and expose ``t_c``.

    Learning-free backend: each accepted upload adds ``alpha * upsilon^tau``
    progress and the episode ends when ``target`` progress is reached."""

    def __init__(self, target=5.0, alpha=0.7, upsilon=0.5, epochs_per_round=1.0):
        self.target = target
        self.alpha = alpha
        self.upsilon = upsilon
        self.epochs_per_round = epochs_per_round

    def reset(self):
        self.t_c = 0
        self.progress = 0.0
        return 0.0

    def start(self, edge, H):
        return None

    def finish(self, edge, payload, tau, accepted):
        """Apply or drop an upload; returns the client epochs it consumed."""
        if accepted:
            self.progress += self.alpha * self.upsilon ** tau
            self.t_c += 1
        return self.epochs_per_round

    def end_slot(self, slot, updated):
        if not updated:
            return None, False
        return min(1.0, self.progress / self.target), self.progress >= self.target - 1e-12


def toy_env(seed=0, tau_max=4, weights=CostWeights(1.0, 1.0), max_slots=400):
    """Deterministic 3-edge environment with constant costs.

    Edge speeds differ (1, 2 and 4 slots per round); staleness halves an
    update's worth, so thresholds trade wall-clock slots against compute.
    """
    edges = [EdgeSpec(comp=(0.05, 0.05), comm=(0.0, 0.0)),
             EdgeSpec(comp=(0.10, 0.10), comm=(0.0, 0.0)),
             EdgeSpec(comp=(0.20, 0.20), comm=(0.0, 0.0))]
    cfg = SlotConfig(tau_max=tau_max, weights=weights, slot_length=0.05, H_range=(1, 1),
                     jitter=0.0, max_slots=max_slots)
    return SlotEnv(edges, ProgressBackend(target=6.0, alpha=0.7, upsilon=0.5), cfg, seed=seed)
