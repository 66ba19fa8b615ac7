"""Synthetic data, non-IID partitioning and the two differentiable learners.

Datasets are stored as ``(X, y)`` numpy arrays. Model parameters are always a
flat float64 vector so that every aggregation rule in the protocol can treat
them as plain points in R^d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMES = ("iid", "noniid1", "noniid2", "quantity_skew")
LEARNER_KINDS = ("regularized-logistic", "two-layer-mlp")


@dataclass(frozen=True)
class ClientDataset:
    X: np.ndarray
    y: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        if len(self.y) == 0:
            raise ValueError(f"client {self.client_id} has an empty dataset")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("feature rows and labels differ in length")

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class LearnerSpec:
    """Shape and regularisation of a learner.

    ``regularized-logistic`` is a bias-free multinomial logistic regression and
    is ``mu_reg``-strongly convex for ``mu_reg > 0``. ``two-layer-mlp`` has a
    tanh hidden layer and is the non-convex learner.
    """

    kind: str
    feature_dim: int
    num_classes: int
    mu_reg: float = 0.0
    hidden_width: int = 16

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ValueError("need feature_dim >= 1 and num_classes >= 2")
        if self.mu_reg < 0:
            raise ValueError("mu_reg must be non-negative")

    @property
    def num_params(self) -> int:
        d, K, h = self.feature_dim, self.num_classes, self.hidden_width
        if self.kind == "regularized-logistic":
            return K * d
        return h * d + h + K * h + K


# ---------------------------------------------------------------------------
# data generation and partitioning
# ---------------------------------------------------------------------------

def generate_synthetic(num_samples, K, feature_dim, class_separation=4.0, seed=0,
                       num_test=None, anisotropy=1.0):
    """Gaussian-blob classification data.

    Class means all have norm ``class_separation / sqrt(2)``; when
    ``feature_dim >= K`` they are orthogonal, so every pair of means is exactly
    ``class_separation`` apart. With ``anisotropy > 1`` the noise standard
    deviations are log-spaced from 1 to ``anisotropy`` along random
    orthogonal axes, which makes the problem ill-conditioned. Returns
    ``(train, test)`` as ClientDatasets with ``client_id=-1``.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    if num_samples < K:
        raise ValueError("num_samples must be at least K")
    if anisotropy < 1.0:
        raise ValueError("anisotropy must be at least 1")
    if num_test is None:
        num_test = max(K, num_samples // 4)
    rng = np.random.default_rng(seed)
    radius = class_separation / math.sqrt(2.0)
    if feature_dim >= K:
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, K)))
        means = radius * q.T
    else:
        dirs = rng.standard_normal((K, feature_dim))
        means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    mixing = None
    if anisotropy != 1.0:
        axes, _ = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
        mixing = np.logspace(0.0, math.log10(anisotropy), feature_dim)[:, None] * axes.T

    def draw(n):
        y = np.arange(n) % K
        rng.shuffle(y)
        noise = rng.standard_normal((n, feature_dim))
        X = means[y] + (noise if mixing is None else noise @ mixing)
        return ClientDataset(X, y.astype(np.int64), client_id=-1)

    return draw(num_samples), draw(num_test)


def _split_evenly(idx, parts):
    return [np.asarray(p, dtype=np.int64) for p in np.array_split(idx, parts)]


def partition(dataset, scheme, n_clients, seed=0, size_range=(4, 60)):
    """Split ``dataset`` into ``n_clients`` disjoint shards covering every sample."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    rng = np.random.default_rng(seed)
    y = dataset.y
    K = int(y.max()) + 1
    n = len(y)
    by_class = [rng.permutation(np.flatnonzero(y == k)) for k in range(K)]

    if scheme == "iid":
        shards = _split_evenly(rng.permutation(n), n_clients)
    elif scheme == "quantity_skew":
        lo, hi = size_range
        raw = rng.integers(lo, hi + 1, size=n_clients).astype(float)
        sizes = _apportion(raw / raw.sum() * n, n)
        if (sizes < 1).any():
            raise ValueError("quantity skew produced an empty client shard")
        cuts = np.cumsum(sizes)[:-1]
        shards = [s.astype(np.int64) for s in np.split(rng.permutation(n), cuts)]
    elif scheme == "noniid1":
        if n_clients < K:
            raise ValueError("noniid1 needs at least one client per class")
        classes = _balanced_labels(K, n_clients, rng)
        shards = [None] * n_clients
        for k in range(K):
            owners = np.flatnonzero(classes == k)
            for owner, part in zip(owners, _split_evenly(by_class[k], len(owners))):
                shards[owner] = part
    else:
        shards = _noniid2(by_class, K, n_clients, rng)

    out = []
    for cid, idx in enumerate(shards):
        if idx is None or len(idx) == 0:
            raise ValueError(f"partition left client {cid} with no samples")
        idx = np.sort(idx)
        out.append(ClientDataset(dataset.X[idx], dataset.y[idx], client_id=cid))
    return out


def _apportion(quotas, total):
    base = np.floor(quotas).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:rem]] += 1
    return base


def _balanced_labels(K, count, rng):
    labels = np.concatenate([rng.permutation(K) for _ in range(math.ceil(count / K))])
    return labels[:count]


def _noniid2(by_class, K, n_clients, rng):
    if K < 2:
        raise ValueError("noniid2 needs K >= 2")
    slots = _balanced_labels(K, 2 * n_clients, rng)
    pairs = slots.reshape(n_clients, 2).copy()
    # repair clients that drew the same class twice by swapping with another client
    for i in range(n_clients):
        if pairs[i, 0] != pairs[i, 1]:
            continue
        for j in rng.permutation(n_clients):
            if j == i:
                continue
            a = pairs[i, 1]
            b = pairs[j, 1]
            if b != pairs[i, 0] and a != pairs[j, 0]:
                pairs[i, 1], pairs[j, 1] = b, a
                break
        else:
            raise ValueError("cannot give every client two distinct classes")
    shard_pieces = {}
    for k in range(K):
        holders = [(i, s) for i in range(n_clients) for s in range(2) if pairs[i, s] == k]
        if not holders:
            continue
        if len(by_class[k]) < len(holders):
            raise ValueError(f"class {k} has fewer samples than shards")
        for holder, part in zip(holders, _split_evenly(by_class[k], len(holders))):
            shard_pieces[holder] = part
    return [np.concatenate([shard_pieces[(i, 0)], shard_pieces[(i, 1)]])
            for i in range(n_clients)]


def label_distribution(dataset, K):
    y = dataset.y if isinstance(dataset, ClientDataset) else np.asarray(dataset)
    if len(y) == 0:
        raise ValueError("label distribution of an empty dataset")
    counts = np.bincount(y, minlength=K).astype(float)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# learners
# ---------------------------------------------------------------------------

def init_params(spec, seed=0, scale=0.1):
    """Zeros for the convex learner, small Gaussian weights for the MLP."""
    if spec.kind == "regularized-logistic":
        return np.zeros(spec.num_params)
    rng = np.random.default_rng(seed)
    d, K, h = spec.feature_dim, spec.num_classes, spec.hidden_width
    W1 = rng.standard_normal((h, d)) * scale
    W2 = rng.standard_normal((K, h)) * scale
    return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(K)])


def _check(spec, params, X):
    if params.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got {params.shape}")
    if X.shape[1] != spec.feature_dim:
        raise ValueError(f"expected feature_dim {spec.feature_dim}, got {X.shape[1]}")


def _unpack_mlp(spec, params):
    d, K, h = spec.feature_dim, spec.num_classes, spec.hidden_width
    i = 0
    W1 = params[i:i + h * d].reshape(h, d); i += h * d
    b1 = params[i:i + h]; i += h
    W2 = params[i:i + K * h].reshape(K, h); i += K * h
    b2 = params[i:i + K]
    return W1, b1, W2, b2


def logits(spec, params, X):
    _check(spec, params, X)
    if spec.kind == "regularized-logistic":
        return X @ params.reshape(spec.num_classes, spec.feature_dim).T
    W1, b1, W2, b2 = _unpack_mlp(spec, params)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(spec, params, dataset):
    """Mean cross-entropy plus ``mu_reg/2 * ||params||^2``."""
    X, y = dataset.X, dataset.y
    logp = _log_softmax(logits(spec, params, X))
    ce = -logp[np.arange(len(y)), y].mean()
    return float(ce + 0.5 * spec.mu_reg * params @ params)


def gradient(spec, params, dataset, batch=None):
    X, y = dataset.X, dataset.y
    if batch is not None:
        X, y = X[batch], y[batch]
    _check(spec, params, X)
    n = len(y)
    if spec.kind == "regularized-logistic":
        z = X @ params.reshape(spec.num_classes, spec.feature_dim).T
        p = np.exp(_log_softmax(z))
        p[np.arange(n), y] -= 1.0
        g = (p.T @ X / n).ravel()
    else:
        W1, b1, W2, b2 = _unpack_mlp(spec, params)
        a = np.tanh(X @ W1.T + b1)
        p = np.exp(_log_softmax(a @ W2.T + b2))
        p[np.arange(n), y] -= 1.0
        dz2 = p / n
        gW2 = dz2.T @ a
        gb2 = dz2.sum(axis=0)
        dz1 = (dz2 @ W2) * (1.0 - a * a)
        gW1 = dz1.T @ X
        gb1 = dz1.sum(axis=0)
        g = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return g + spec.mu_reg * params


def predict(spec, params, X):
    return np.argmax(logits(spec, params, X), axis=1)


class MinibatchSampler:
    """Seeded mini-batch index stream, without replacement within each pass."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    @property
    def full_batch(self) -> bool:
        return self.batch_size is None or self.batch_size >= self.n

    def next_batch(self):
        if self.full_batch:
            return None
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def sgd_step(spec, params, dataset, lr, sampler=None):
    """One step ``params - lr * g``; full batch when ``sampler`` is None or covers the data."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    batch = sampler.next_batch() if sampler is not None else None
    return params - lr * gradient(spec, params, dataset, batch)


@dataclass(frozen=True)
class LRSchedule:
    """Exponential step decay: ``lr * rate ** (epochs // every)``."""

    lr: float
    rate: float = 1.0
    every: int = 100

    def __call__(self, epochs: int) -> float:
        if self.rate == 1.0:
            return self.lr
        return self.lr * self.rate ** (epochs // self.every)


def estimate_convex_constants(spec, dataset, iters=500, tol=1e-12, seed=0):
    """Smoothness and strong-convexity constants of the convex learner.

    beta = lambda_max(X^T X / n) / 2 + mu_reg. The 1/2 is the curvature bound
    of the softmax cross-entropy in its logits (sigmoid parametrisations would
    use 1/4). lambda_max comes from power iteration.
    """
    if spec.kind != "regularized-logistic":
        raise ValueError("convex constants are only defined for regularized-logistic")
    X = dataset.X
    lam = power_iteration(X.T @ X / len(X), iters=iters, tol=tol, seed=seed)
    return 0.5 * lam + spec.mu_reg, spec.mu_reg


def power_iteration(A, iters=500, tol=1e-12, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ A @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


# ---------------------------------------------------------------------------
# columnar text export
# ---------------------------------------------------------------------------

def save_dataset(dataset, path, K):
    """Header ``d,K`` then one ``features...,label`` row per sample."""
    path = Path(path)
    d = dataset.X.shape[1]
    lines = [f"{d},{K}"]
    for row, label in zip(dataset.X, dataset.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path, client_id=-1):
    lines = Path(path).read_text().strip().splitlines()
    try:
        d, K = (int(v) for v in lines[0].split(","))
    except ValueError as exc:
        raise ValueError(f"{path}: bad header {lines[0]!r}, expected 'd,K'") from exc
    rows = [line.split(",") for line in lines[1:]]
    if any(len(r) != d + 1 for r in rows):
        raise ValueError(f"{path}: every row needs {d} features and a label")
    X = np.array([[float(v) for v in r[:d]] for r in rows]).reshape(-1, d)
    y = np.array([int(r[d]) for r in rows], dtype=np.int64)
    if (y >= K).any() or (y < 0).any():
        raise ValueError(f"{path}: label outside [0, {K})")
    return ClientDataset(X, y, client_id=client_id), K


def pooled(datasets):
    """Concatenate client datasets (used for edge-level objectives)."""
    return ClientDataset(np.concatenate([d.X for d in datasets]),
                         np.concatenate([d.y for d in datasets]), client_id=-1)
