"""Slow, independent reference implementations.

Everything here is written with plain Python loops and the ``math`` module so
that it shares no code path with the vectorised implementations it checks.
The exhaustive association search doubles as the CLI's exact solver for small
instances.
"""

from __future__ import annotations

import itertools
import math


def kl_bits(p, q):
    total = 0.0
    for a, b in zip(p, q):
        if a > 0:
            total += a * math.log2(a / b)
    return total


def js_bits(p, q):
    m = [(a + b) / 2.0 for a, b in zip(p, q)]
    return 0.5 * kl_bits(p, m) + 0.5 * kl_bits(q, m)


def merged_distribution(distributions, sizes, members):
    K = len(distributions[0])
    out = [0.0] * K
    total = 0.0
    for k in members:
        total += sizes[k]
        for j in range(K):
            out[j] += sizes[k] * distributions[k][j]
    return [x / total for x in out]


def exhaustive_association(distributions, sizes, latency, lam, reference, nonempty=False):
    """Minimise ``sum_m [max latency + lam * JS]`` over every feasible partition.

    ``latency[m][k]`` is ``inf`` for out-of-range pairs. With ``nonempty`` only
    partitions that leave no edge empty are considered. Returns the clusters
    and the optimal value; ties keep the first assignment in lexicographic
    order of the edge-index tuple.
    """
    M, N = len(latency), len(distributions)
    options = [[m for m in range(M) if math.isfinite(latency[m][k])] for k in range(N)]
    if any(not o for o in options):
        raise ValueError("some client is out of range of every edge")
    best_value, best = math.inf, None
    for assign in itertools.product(*options):
        clusters = [[] for _ in range(M)]
        for k, m in enumerate(assign):
            clusters[m].append(k)
        if nonempty and not all(clusters):
            continue
        value = 0.0
        for m, cl in enumerate(clusters):
            if cl:
                value += max(latency[m][k] for k in cl)
                value += lam * js_bits(merged_distribution(distributions, sizes, cl), reference)
        if value < best_value:
            best_value, best = value, clusters
    if best is None:
        raise ValueError("no feasible partition uses every edge")
    return best, best_value


# ---------------------------------------------------------------------------
# derivatives, learners and networks
# ---------------------------------------------------------------------------

def central_difference(f, x, direction, h=1e-6):
    """Directional derivative of ``f`` at ``x`` along ``direction``."""
    xp = [a + h * d for a, d in zip(x, direction)]
    xm = [a - h * d for a, d in zip(x, direction)]
    return (f(xp) - f(xm)) / (2.0 * h)


def _ce(z, label):
    zmax = max(z)
    return zmax + math.log(sum(math.exp(v - zmax) for v in z)) - z[label]


def softmax_ce_loss(W, X, y, K, mu=0.0):
    """Mean cross-entropy of a bias-free softmax model plus ``mu/2 ||W||^2``.

    ``W`` is a flat row-major ``K x d`` list.
    """
    d = len(X[0])
    total = 0.0
    for row, label in zip(X, y):
        z = [sum(row[i] * W[j * d + i] for i in range(d)) for j in range(K)]
        total += _ce(z, label)
    return total / len(X) + mu / 2.0 * sum(w * w for w in W)


def mlp_ce_loss(theta, X, y, hidden, K, mu=0.0):
    """Same loss for a tanh MLP with parameters ``[W1 (h x d), b1, W2 (K x h), b2]``."""
    d = len(X[0])
    i = 0
    W1 = [theta[i + r * d:i + (r + 1) * d] for r in range(hidden)]
    i += hidden * d
    b1 = theta[i:i + hidden]
    i += hidden
    W2 = [theta[i + r * hidden:i + (r + 1) * hidden] for r in range(K)]
    i += K * hidden
    b2 = theta[i:i + K]
    total = 0.0
    for row, label in zip(X, y):
        a = [math.tanh(b1[r] + sum(W1[r][j] * row[j] for j in range(d))) for r in range(hidden)]
        z = [b2[q] + sum(W2[q][r] * a[r] for r in range(hidden)) for q in range(K)]
        total += _ce(z, label)
    return total / len(X) + mu / 2.0 * sum(w * w for w in theta)


def mlp_forward(x, layers, activation=math.tanh, final_linear=True):
    """Per-neuron forward pass; ``layers`` is a list of ``(W, b)`` nested lists."""
    h = list(x)
    for li, (W, b) in enumerate(layers):
        out = []
        for j in range(len(b)):
            s = b[j]
            for i in range(len(h)):
                s += h[i] * W[i][j]
            last = li == len(layers) - 1
            out.append(s if (last and final_linear) else activation(s))
        h = out
    return h


def accuracy(predictions, labels):
    hits = 0
    for p, y in zip(predictions, labels):
        hits += int(p == y)
    return hits / len(labels)


def plain_gd(grad, x0, lr, steps):
    """Iterates of full-batch gradient descent, starting point included."""
    xs = [list(x0)]
    x = list(x0)
    for _ in range(steps):
        g = grad(x)
        x = [a - lr * b for a, b in zip(x, g)]
        xs.append(x)
    return xs


# ---------------------------------------------------------------------------
# costs, rewards and MDPs
# ---------------------------------------------------------------------------

def comm_seconds(model_size, bandwidth, snr_db):
    bits = 0.0
    for _ in range(int(model_size)):
        bits += 32.0
    return bits / (bandwidth * math.log(1.0 + 10.0 ** (snr_db / 10.0), 2))


def comp_seconds(c, D, zeta, f):
    cycles = 0.0
    for _ in range(int(c)):
        cycles += D * zeta
    return cycles / f


def discounted_sum(rewards, gamma):
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * r
        weight *= gamma
    return total


def value_iteration(P, R, gamma, tol=1e-12, max_iter=100_000):
    """Tabular optimum. ``P[s][a]`` maps next state to probability, ``R[s][a]``
    is the expected reward, and absorbing states have no actions."""
    V = {s: 0.0 for s in P}
    for _ in range(max_iter):
        delta = 0.0
        for s in P:
            if not P[s]:
                continue
            best = max(R[s][a] + gamma * sum(p * V[t] for t, p in P[s][a].items()) for a in P[s])
            delta = max(delta, abs(best - V[s]))
            V[s] = best
        if delta < tol:
            break
    policy = {}
    for s in P:
        if P[s]:
            q = {a: R[s][a] + gamma * sum(p * V[t] for t, p in P[s][a].items()) for a in P[s]}
            policy[s] = max(sorted(q), key=lambda a: q[a])
    return V, policy


# ---------------------------------------------------------------------------
# convergence bounds
# ---------------------------------------------------------------------------

def power(base, n):
    out = 1.0
    for _ in range(int(n)):
        out *= base
    return out


def convex_bound(beta, mu, rho, eta, c, H_min, H_max, delta, Delta, V, alpha_tau, T_c, F0_gap):
    C1 = 1 - alpha_tau + alpha_tau * power(1 - eta * mu, c * H_min)
    kap = power(C1, T_c)
    A1 = 1 / (2 * mu)
    A2 = rho * H_max * ((power(eta * beta + 1, c) - 1) / beta - eta * c)
    A3 = c * H_max * eta / 2
    B = 1 - power(1 - eta * mu, c * H_min)
    C3 = (A1 * V + A2 * delta + A3 * Delta) / B
    return kap * F0_gap + (1 - kap) * C3


def g(delta, beta, eta, x):
    return delta / beta * (power(eta * beta + 1, x) - 1) - eta * delta * x
