"""Computation and communication cost accounting and client/edge latencies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BITS_PER_PARAM = 32


@dataclass(frozen=True)
class ClientResources:
    """CPU frequency ``f`` (Hz), processing density ``zeta`` (cycles/bit),
    bits processed per local iteration ``D`` and bandwidth to each edge (Hz).
    ``inf`` bandwidth is not allowed; out-of-range edges use ``nan``.
    """

    f: float
    zeta: float
    D: float
    bandwidth: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.f > 0 and self.zeta > 0 and self.D > 0):
            raise ValueError("f, zeta and D must be strictly positive")

    def in_range(self, m) -> bool:
        b = self.bandwidth[m]
        return b == b and b > 0


@dataclass(frozen=True)
class CostWeights:
    sigma1: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("cost weights must be non-negative")


def client_comp_cost(res, c, f=None):
    """Seconds for ``c`` local iterations: ``c * D * zeta / f``."""
    f = res.f if f is None else f
    if f <= 0:
        raise ValueError("CPU frequency must be positive")
    return c * res.D * res.zeta / f


def snr_linear(snr_db):
    return 10.0 ** (snr_db / 10.0)


def client_comm_cost(model_size, bandwidth, snr_db=17.0):
    """Seconds to ship ``model_size`` 32-bit parameters over a Shannon-rate link."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if model_size <= 0:
        raise ValueError("model size must be positive")
    return model_size * BITS_PER_PARAM / (bandwidth * math.log2(1.0 + snr_linear(snr_db)))


def edge_comp_cost(per_client_costs):
    return float(sum(per_client_costs))


def slot_comp_cost(running, edge_costs):
    running = np.asarray(running)
    if not np.isin(running, (0, 1)).all():
        raise ValueError("running indicator must be 0/1")
    return float(np.dot(running, edge_costs))


def slot_comm_cost(running, still_running_next, edge_comm_costs):
    """Charge communication for edges that finish in this slot."""
    finishing = np.asarray(running) - np.asarray(still_running_next)
    if (finishing < 0).any() or (finishing > 1).any():
        raise ValueError("an edge cannot start running at the end of a slot")
    return float(np.dot(finishing, edge_comm_costs))


def response_latency(l_comp, l_comm):
    return l_comp + l_comm


def edge_latency(latencies):
    latencies = list(latencies)
    if not latencies:
        raise ValueError("edge latency of an empty cluster")
    return max(latencies)


def waiting_time(latencies):
    """Mean excess latency of a cluster's members over its fastest member."""
    lat = np.asarray(list(latencies), dtype=float)
    if lat.size == 0:
        raise ValueError("waiting time of an empty cluster")
    return float((lat - lat.min()).mean())


@dataclass(frozen=True)
class ResourceProfile:
    """Per-client resources plus model size and SNR used for all cost figures."""

    clients: tuple
    model_size: int = 21840
    snr_db: float = 17.0
    c: int = 3

    @property
    def num_edges(self) -> int:
        return len(self.clients[0].bandwidth) if self.clients else 0

    def comp_cost(self, k, f=None):
        return client_comp_cost(self.clients[k], self.c, f)

    def comm_cost(self, m, k, bandwidth=None):
        res = self.clients[k]
        b = res.bandwidth[m] if bandwidth is None else bandwidth
        return client_comm_cost(self.model_size, b, self.snr_db)

    def latency_matrix(self):
        """``L[m, k]`` for in-range pairs; ``inf`` elsewhere."""
        M, N = self.num_edges, len(self.clients)
        L = np.full((M, N), np.inf)
        for k in range(N):
            comp = self.comp_cost(k)
            for m in range(M):
                if self.clients[k].in_range(m):
                    L[m, k] = response_latency(comp, self.comm_cost(m, k))
        return L


def make_profile(n_clients, n_edges, *, batch_size=60, bits_per_sample=6272,
                 f_range=(1e9, 2e9), zeta=20.0, bw_range=(1e6, 10e6),
                 range_prob=1.0, model_size=21840, snr_db=17.0, c=3, seed=0):
    """Random heterogeneous resources: ``f`` and bandwidth drawn uniformly.

    Defaults mirror an MNIST-sized workload (60 samples of 784 bytes per local
    iteration, a 21,840 parameter model). Every client is kept in range of at
    least one edge.
    """
    rng = np.random.default_rng(seed)
    clients = []
    for _ in range(n_clients):
        f = rng.uniform(*f_range)
        bw = rng.uniform(*bw_range, size=n_edges)
        mask = rng.random(n_edges) < range_prob
        if not mask.any():
            mask[rng.integers(n_edges)] = True
        bw = np.where(mask, bw, np.nan)
        clients.append(ClientResources(f, zeta, batch_size * bits_per_sample, tuple(bw)))
    return ResourceProfile(tuple(clients), model_size=model_size, snr_db=snr_db, c=c)


def load_profile(section, n_edges, c=3):
    """Build a profile from a config section with one row per client."""
    rows = section.get("clients")
    if not rows:
        raise ValueError("resource section needs a non-empty 'clients' list")
    clients = []
    for i, row in enumerate(rows):
        missing = {"f", "zeta", "D", "bandwidth"} - set(row)
        if missing:
            raise ValueError(f"resource row {i} is missing {sorted(missing)}")
        bw = tuple(float("nan") if b is None else float(b) for b in row["bandwidth"])
        if len(bw) != n_edges:
            raise ValueError(f"resource row {i} needs {n_edges} bandwidth entries")
        clients.append(ClientResources(float(row["f"]), float(row["zeta"]), float(row["D"]), bw))
    return ResourceProfile(tuple(clients), model_size=int(section.get("model_size", 21840)),
                           snr_db=float(section.get("snr_db", 17.0)), c=c)
