"""Convergence-bound calculators and empirical checks of the edge drift bound.

All formulas are evaluated in float64 exactly as written; no simplification is
attempted. The drift check compares a federated edge trajectory against the
centralised "virtual cluster" trajectory that re-syncs at every edge
aggregation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import learner
from .hier_aggregation import weighted_average


class RegimeError(ValueError):
    """Constants fall outside the regime the bounds are stated for."""


def g_function(delta_max, beta, eta, x):
    """Drift bound ``delta/beta * ((eta*beta + 1)^x - 1) - eta*delta*x``.

    For integer ``x`` the bracket is expanded binomially, dropping the two
    terms that cancel, so ``g(0)`` and ``g(1)`` are exactly zero.
    """
    if beta == 0:
        raise ValueError("beta must be non-zero")
    if x < 0:
        raise ValueError("x must be non-negative")
    u = eta * beta
    if float(x).is_integer():
        x = int(x)
        return delta_max / beta * sum(math.comb(x, j) * u ** j for j in range(2, x + 1))
    return delta_max / beta * ((u + 1.0) ** x - 1.0) - eta * delta_max * x


def contraction_base(alpha_tau, eta, mu, c, H_min):
    return 1.0 - alpha_tau + alpha_tau * (1.0 - eta * mu) ** (c * H_min)


def kappa(alpha_tau, eta, mu, c, H_min, T_c):
    if eta * mu >= 1.0:
        raise RegimeError(f"eta*mu = {eta * mu:g} >= 1 is outside the strongly convex regime")
    return contraction_base(alpha_tau, eta, mu, c, H_min) ** T_c


@dataclass(frozen=True)
class ConvexConstants:
    beta: float
    mu: float
    rho: float
    eta: float
    c: int
    H_min: int
    H_max: int
    delta_max: float
    Delta: float
    V: float
    alpha_tau: float
    T_c: int

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise RegimeError(f"{name} must be non-negative (got {value})")
        if self.mu <= 0:
            raise RegimeError("mu must be positive for the strongly convex bound")
        if not self.eta < 1.0 / self.beta:
            raise RegimeError(f"eta = {self.eta:g} violates eta < 1/beta = {1.0 / self.beta:g}")
        if self.H_min > self.H_max:
            raise RegimeError("H_min must not exceed H_max")
        return self


@dataclass(frozen=True)
class WeaklyConvexConstants:
    """``rho`` and ``beta`` default to their tilde counterparts when omitted."""

    mu: float
    mu_t: float
    beta_t: float
    rho_t: float
    eta: float
    c: int
    H_min: int
    H_max: int
    delta_t: float
    Delta_t: float
    V_t: float
    alpha_tau: float
    T_c: int
    rho: float = None
    beta: float = None

    def validate(self):
        for name, value in asdict(self).items():
            if value is not None and value < 0:
                raise RegimeError(f"{name} must be non-negative (got {value})")
        if not self.mu_t > self.mu:
            raise RegimeError(f"mu_t = {self.mu_t:g} must exceed mu = {self.mu:g}")
        beta = self.beta if self.beta is not None else self.beta_t
        limit = min(1.0 / beta, 2.0 / (self.mu_t - self.mu))
        if not self.eta < limit:
            raise RegimeError(f"eta = {self.eta:g} violates eta < min(1/beta, 2/(mu_t-mu)) = {limit:g}")
        if self.H_min > self.H_max:
            raise RegimeError("H_min must not exceed H_max")
        return self


@dataclass
class BoundTerms:
    kappa: float
    A1: float
    A2: float
    A3: float
    B: float
    C3: float
    bound: float
    extra: dict = field(default_factory=dict)


def convex_bound(k, F0_gap):
    """Strongly convex bound after ``T_c`` cloud updates, with all its terms."""
    k.validate()
    kap = kappa(k.alpha_tau, k.eta, k.mu, k.c, k.H_min, k.T_c)
    A1 = 1.0 / (2.0 * k.mu)
    A2 = k.rho * k.H_max * (((k.eta * k.beta + 1.0) ** k.c - 1.0) / k.beta - k.eta * k.c)
    A3 = k.c * k.H_max * k.eta / 2.0
    B = 1.0 - (1.0 - k.eta * k.mu) ** (k.c * k.H_min)
    if B == 0:
        raise RegimeError("degenerate bound: B = 0")
    C3 = (A1 * k.V + A2 * k.delta_max + A3 * k.Delta) / B
    return BoundTerms(kap, A1, A2, A3, B, C3, kap * F0_gap + (1.0 - kap) * C3)


def nonconvex_bound(k, F0_gap):
    k.validate()
    gap = k.mu_t - k.mu
    rho = k.rho if k.rho is not None else k.rho_t
    base = (1.0 - k.eta * gap / 2.0) ** (k.c * k.H_min)
    kap = (1.0 - k.alpha_tau + k.alpha_tau * base) ** k.T_c
    A1 = 12.0 * rho ** 2 * k.H_max / gap ** 3 + (5.0 * k.mu_t - k.mu) / (2.0 * gap ** 2)
    A2 = k.rho_t * k.H_max / k.beta_t * ((k.eta * k.beta_t + 1.0) ** k.c - 1.0 - k.beta_t * k.eta * k.c)
    A3 = 2.0 * k.H_max / gap
    B = 1.0 - base
    if B == 0:
        raise RegimeError("degenerate bound: B = 0")
    C3 = (A1 * k.V_t + A2 * k.delta_t + A3 * k.Delta_t) / B
    return BoundTerms(kap, A1, A2, A3, B, C3, kap * F0_gap + (1.0 - kap) * C3)


def closed_form_bound(C1, T_c, C2, C3):
    """The bound rewritten as ``C1^T_c (C2 - C3) + C3``."""
    return C1 ** T_c * (C2 - C3) + C3


def tau_sweep(k, F0_gap, alpha, upsilon, taus):
    """Bound rows over a staleness grid, with ``alpha_tau = alpha * upsilon^tau``."""
    rows = []
    for tau in taus:
        a = alpha * upsilon ** tau
        kk = ConvexConstants(**{**asdict(k), "alpha_tau": a})
        terms = convex_bound(kk, F0_gap)
        C1 = contraction_base(a, k.eta, k.mu, k.c, k.H_min)
        rows.append({"tau": tau, "alpha_tau": a, "C1": C1, "kappa": terms.kappa,
                     "A1": terms.A1, "A2": terms.A2, "A3": terms.A3, "B": terms.B,
                     "C3": terms.C3, "bound": terms.bound,
                     "U": closed_form_bound(C1, k.T_c, F0_gap, terms.C3)})
    return rows


# ---------------------------------------------------------------------------
# virtual cluster model and the empirical drift check
# ---------------------------------------------------------------------------

@dataclass
class EdgeTrajectory:
    """Per-step federated edge model, virtual cluster model and client models."""

    federated: list
    virtual: list
    clients: list


def virtual_cluster_training(spec, clients, start, lr, c, H):
    """Full-batch federated edge run alongside its virtual cluster model.

    Step ``t`` (0..Hc) stores the size-weighted average of the client models
    and the virtual model, which takes gradient steps on the pooled edge
    objective and is reset to the federated model whenever ``t mod c == 0``.
    """
    sizes = [len(d) for d in clients]
    pool = learner.pooled(clients)
    models = [np.array(start, dtype=float) for _ in clients]
    v = np.array(start, dtype=float)
    fed_traj = [weighted_average(models, sizes)]
    virt_traj = [v.copy()]
    client_traj = [[m.copy() for m in models]]
    for t in range(1, H * c + 1):
        models = [m - lr * learner.gradient(spec, m, d) for m, d in zip(models, clients)]
        v = v - lr * learner.gradient(spec, v, pool)
        fed = weighted_average(models, sizes)
        fed_traj.append(fed)
        virt_traj.append(v.copy())
        client_traj.append([m.copy() for m in models])
        if t % c == 0:
            models = [fed.copy() for _ in clients]
            v = fed.copy()
    return EdgeTrajectory(fed_traj, virt_traj, client_traj)


def estimate_divergence(spec, clients, points):
    """Size-weighted client-edge gradient divergence, maximised over ``points``."""
    pool = learner.pooled(clients)
    sizes = np.array([len(d) for d in clients], dtype=float)
    per_client = np.zeros(len(clients))
    for w in points:
        g_edge = learner.gradient(spec, w, pool)
        for i, d in enumerate(clients):
            per_client[i] = max(per_client[i], np.linalg.norm(learner.gradient(spec, w, d) - g_edge))
    return float(sizes @ per_client / sizes.sum())


@dataclass
class DriftReport:
    rows: list
    violations: int
    delta_max: float
    beta: float
    eta: float
    c: int
    sample_points: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def empirical_drift_check(spec, clients, start, lr, c, H, *, n_random=20, seed=0, slack=1e-9):
    """Measure ``||w_fed - v||`` at every step against ``g(t - (h-1)c)``.

    ``beta`` comes from :func:`learner.estimate_convex_constants` on the pooled
    data; ``delta_max`` is maximised over the trajectory iterates plus
    ``n_random`` seeded points around them.
    """
    beta, _ = learner.estimate_convex_constants(spec, learner.pooled(clients))
    traj = virtual_cluster_training(spec, clients, start, lr, c, H)
    rng = np.random.default_rng(seed)
    points = list(traj.federated) + list(traj.virtual)
    points += [m for step in traj.clients for m in step]
    scale = max(1.0, max(np.linalg.norm(p) for p in points))
    points += [traj.federated[int(rng.integers(len(traj.federated)))]
               + rng.standard_normal(len(start)) * scale * 0.1 for _ in range(n_random)]
    delta = estimate_divergence(spec, clients, points)
    rows = []
    violations = 0
    for t in range(len(traj.federated)):
        x = t - ((t - 1) // c) * c if t > 0 else 0
        h = (t - 1) // c + 1 if t > 0 else 1
        measured = float(np.linalg.norm(traj.federated[t] - traj.virtual[t]))
        bound = g_function(delta, beta, lr, x)
        bad = measured > bound + slack
        violations += bad
        rows.append({"t_e": t, "interval": h, "x": x, "measured": measured,
                     "bound": bound, "violation": bool(bad)})
    return DriftReport(rows, violations, delta, beta, lr, c, len(points))
