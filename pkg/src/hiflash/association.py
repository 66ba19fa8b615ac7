"""Client-edge association: label-distribution divergence versus response latency."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

STRATEGIES = ("greedy", "edge_iid", "edge_noniid", "latency_only", "random", "brute")
NORM_TOL = 1e-9


class InfeasibleAssociation(ValueError):
    pass


def _check_dist(p, name):
    p = np.asarray(p, dtype=float)
    if (p < 0).any() or abs(p.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"{name} is not a normalised distribution (sum={p.sum()!r})")
    return p


def kl_divergence(p1, p2):
    """KL(p1 || p2) in bits, with 0 * log(0 / q) = 0."""
    p1 = _check_dist(p1, "P1")
    p2 = _check_dist(p2, "P2")
    if p1.shape != p2.shape:
        raise ValueError("distributions differ in length")
    mask = p1 > 0
    if (p2[mask] == 0).any():
        return float("inf")
    return float(np.sum(p1[mask] * np.log2(p1[mask] / p2[mask])))


def js_divergence(p, q):
    """Jensen-Shannon divergence in bits, so the value lies in [0, 1]."""
    p = _check_dist(p, "P")
    q = _check_dist(q, "Q")
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    m = 0.5 * (p + q)
    js = 0.5 * _kl_bits(p, m) + 0.5 * _kl_bits(q, m)
    return min(max(js, 0.0), 1.0)


def _kl_bits(a, m):
    mask = a > 0
    return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))


@dataclass
class AssociationInstance:
    """Label distributions (N x K), client sizes, latency matrix (M x N; inf = out of range)."""

    distributions: np.ndarray
    sizes: np.ndarray
    latency: np.ndarray
    reference: np.ndarray = None

    def __post_init__(self):
        self.distributions = np.asarray(self.distributions, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        self.latency = np.asarray(self.latency, dtype=float)
        N, K = self.distributions.shape
        if self.reference is None:
            self.reference = np.full(K, 1.0 / K)
        self.reference = _check_dist(self.reference, "LD_IID")
        if self.sizes.shape != (N,) or (self.sizes <= 0).any():
            raise ValueError("sizes must be one positive entry per client")
        if self.latency.ndim != 2 or self.latency.shape[1] != N:
            raise ValueError("latency matrix must be M x N")
        for k, row in enumerate(self.distributions):
            _check_dist(row, f"LD_{k}")
        unreachable = [k for k in range(N) if not np.isfinite(self.latency[:, k]).any()]
        if unreachable:
            raise InfeasibleAssociation(f"clients {unreachable} are in no edge's range")

    @property
    def M(self) -> int:
        return self.latency.shape[0]

    @property
    def N(self) -> int:
        return self.distributions.shape[0]

    def in_range(self, m, k) -> bool:
        return bool(np.isfinite(self.latency[m, k]))


@dataclass
class Association:
    clusters: list = field(default_factory=list)

    def edge_of(self):
        out = {}
        for m, cl in enumerate(self.clusters):
            for k in cl:
                out[k] = m
        return out

    def is_partition_of(self, instance) -> bool:
        seen = [k for cl in self.clusters for k in cl]
        if sorted(seen) != list(range(instance.N)):
            return False
        return all(instance.in_range(m, k) for m, cl in enumerate(self.clusters) for k in cl)


def edge_distribution(instance, members):
    members = list(members)
    w = instance.sizes[members]
    return (w[:, None] * instance.distributions[members]).sum(axis=0) / w.sum()


def association_cost(instance, m, members, k, lam):
    """Latency of ``k`` at edge ``m`` plus ``lam`` times the JS divergence of the
    size-weighted merged distribution from the reference."""
    if not instance.in_range(m, k):
        raise ValueError(f"client {k} is out of edge {m}'s range")
    lat = float(instance.latency[m, k])
    if lam == 0:
        return lat
    members = list(members)
    if members:
        size_m = instance.sizes[members].sum()
        ld_m = edge_distribution(instance, members)
        merged = (size_m * ld_m + instance.sizes[k] * instance.distributions[k]) / (size_m + instance.sizes[k])
    else:
        merged = instance.distributions[k]
    merged = merged / merged.sum()
    return lat + lam * js_divergence(merged, instance.reference)


def best_candidate(instance, m, members, candidates, lam):
    """Lowest-cost candidate; ties go to the lowest client index."""
    best, best_cost = None, np.inf
    for k in sorted(candidates):
        cost = association_cost(instance, m, members, k, lam)
        if cost < best_cost:
            best, best_cost = k, cost
    return best


def associate(instance, lam, seed=0):
    """Two-way greedy association.

    Each outer round every edge either seeds its empty cluster with its
    lowest-latency reachable client or proposes its minimum-cost client; a
    client proposed by several edges joins one of them uniformly at random.
    """
    rng = np.random.default_rng(seed)
    pool = set(range(instance.N))
    clusters = [[] for _ in range(instance.M)]
    while pool:
        proposals = {}
        progressed = False
        for m in range(instance.M):
            candidates = [k for k in pool if instance.in_range(m, k)]
            if not candidates:
                continue
            if not clusters[m]:
                k = min(candidates, key=lambda j: (instance.latency[m, j], j))
                clusters[m].append(k)
                pool.discard(k)
                progressed = True
            else:
                k = best_candidate(instance, m, clusters[m], candidates, lam)
                proposals.setdefault(k, []).append(m)
        for k in sorted(proposals):
            if k not in pool:
                continue
            edges = proposals[k]
            m = edges[0] if len(edges) == 1 else edges[int(rng.integers(len(edges)))]
            clusters[m].append(k)
            pool.discard(k)
            progressed = True
        if not progressed:
            raise InfeasibleAssociation(f"clients {sorted(pool)} cannot be reached")
    return Association([sorted(cl) for cl in clusters])


def total_js(association, instance):
    return float(sum(js_divergence(edge_distribution(instance, cl), instance.reference)
                     for cl in association.clusters if cl))


def mean_latency(association, instance):
    """Mean response latency over all associated clients."""
    lat = [instance.latency[m, k] for m, cl in enumerate(association.clusters) for k in cl]
    return float(np.mean(lat))


def objective(association, instance, lam):
    """Sum over non-empty edges of ``L^m + lam * JS(LD^m, LD_IID)``."""
    total = 0.0
    for m, cl in enumerate(association.clusters):
        if not cl:
            continue
        total += max(instance.latency[m, k] for k in cl)
        total += lam * js_divergence(edge_distribution(instance, cl), instance.reference)
    return float(total)


def brute_force_associate(instance, lam, max_clients=10, max_edges=3, nonempty=False):
    """Exhaustive optimum of :func:`objective`; implemented in the oracle module.

    ``nonempty=True`` restricts the search to partitions that use every edge.
    """
    from .oracles import exhaustive_association

    if instance.N > max_clients or instance.M > max_edges:
        raise ValueError(f"instance too large for enumeration (N={instance.N}, M={instance.M})")
    clusters, _ = exhaustive_association(instance.distributions.tolist(), instance.sizes.tolist(),
                                         instance.latency.tolist(), lam,
                                         instance.reference.tolist(), nonempty=nonempty)
    return Association(clusters)


def dominant_class(instance):
    return np.argmax(instance.distributions, axis=1)


def reference_strategy(instance, kind, seed=0, classes_per_edge=1):
    rng = np.random.default_rng(seed)
    M, N = instance.M, instance.N
    if kind == "latency_only":
        clusters = [[] for _ in range(M)]
        for k in range(N):
            clusters[int(np.argmin(instance.latency[:, k]))].append(k)
        return Association(clusters)
    if kind == "random":
        clusters = [[] for _ in range(M)]
        for k in range(N):
            edges = np.flatnonzero(np.isfinite(instance.latency[:, k]))
            clusters[int(rng.choice(edges))].append(k)
        return Association(clusters)
    labels = dominant_class(instance)
    K = instance.distributions.shape[1]
    by_class = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in range(K)}
    if kind == "edge_iid":
        clusters = [[] for _ in range(M)]
        for c, members in by_class.items():
            if len(members) % M:
                raise InfeasibleAssociation(
                    f"edge_iid needs a multiple of {M} clients per class; class {c} has {len(members)}")
            for i, k in enumerate(members):
                clusters[i % M].append(int(k))
        return Association([sorted(cl) for cl in clusters])
    if kind == "edge_noniid":
        q = classes_per_edge
        if not 1 <= q <= K:
            raise ValueError("classes_per_edge must lie in [1, K]")
        owners = {c: [] for c in range(K)}
        for m in range(M):
            start = (m * K) // M
            for j in range(q):
                owners[(start + j) % K].append(m)
        clusters = [[] for _ in range(M)]
        for c, members in by_class.items():
            if members and not owners[c]:
                raise InfeasibleAssociation(f"class {c} belongs to no edge")
            for i, k in enumerate(members):
                clusters[owners[c][i % len(owners[c])]].append(int(k))
        if any(not cl for cl in clusters):
            raise InfeasibleAssociation("edge_noniid left an edge without clients")
        return Association([sorted(cl) for cl in clusters])
    raise ValueError(f"unknown reference strategy {kind!r}")


def build(instance, strategy, lam=0.0, seed=0, classes_per_edge=1):
    if strategy == "greedy":
        return associate(instance, lam, seed)
    if strategy == "brute":
        return brute_force_associate(instance, lam)
    return reference_strategy(instance, strategy, seed, classes_per_edge)


def waiting_times(association, instance):
    from .cost_model import waiting_time

    return [waiting_time(instance.latency[m, cl]) for m, cl in enumerate(association.clusters) if cl]


# ---------------------------------------------------------------------------
# instance files
# ---------------------------------------------------------------------------

def load_instance(path):
    """Read a YAML instance with ``distributions``, ``sizes`` and ``latency`` sections.

    Latency rows are per edge; ``null`` marks a client outside the edge's range.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping with distributions/sizes/latency")
    missing = [s for s in ("distributions", "sizes", "latency") if s not in doc]
    if missing:
        raise ValueError(f"{path}: missing section(s) {missing}")
    unknown = set(doc) - {"distributions", "sizes", "latency", "reference"}
    if unknown:
        raise ValueError(f"{path}: unknown section(s) {sorted(unknown)}")
    latency = [[np.inf if v is None else float(v) for v in row] for row in doc["latency"]]
    try:
        return AssociationInstance(np.array(doc["distributions"], dtype=float),
                                   np.array(doc["sizes"], dtype=float),
                                   np.array(latency, dtype=float), doc.get("reference"))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_instance(instance, path):
    latency = [[None if not np.isfinite(v) else float(v) for v in row] for row in instance.latency]
    doc = {"distributions": instance.distributions.tolist(), "sizes": instance.sizes.tolist(),
           "latency": latency, "reference": instance.reference.tolist()}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def random_instance(n_clients, n_edges, K, seed=0, range_prob=1.0, classes_per_client=1,
                    latency_range=(0.02, 0.15)):
    """Seeded test instance with label-skewed clients and random latencies."""
    rng = np.random.default_rng(seed)
    dists = np.zeros((n_clients, K))
    for k in range(n_clients):
        cls = rng.choice(K, size=classes_per_client, replace=False)
        w = rng.random(classes_per_client) + 0.5
        dists[k, cls] = w / w.sum()
    sizes = rng.integers(20, 80, size=n_clients).astype(float)
    lat = rng.uniform(*latency_range, size=(n_edges, n_clients))
    mask = rng.random((n_edges, n_clients)) < range_prob
    for k in range(n_clients):
        if not mask[:, k].any():
            mask[rng.integers(n_edges), k] = True
    lat = np.where(mask, lat, np.inf)
    return AssociationInstance(dists, sizes, lat)
