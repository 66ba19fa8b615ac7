"""Double DQN staleness controller in plain numpy.

The Q-network is a tanh MLP with two hidden layers and a linear output, one
value per action index ``j`` (action ``a = j - 1``). Training follows the
slot loop: act epsilon-greedily, store the transition, sample a minibatch,
regress on the double-Q target with plain SGD and copy the online weights to
the target network every ``sync_every`` updates.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

CHECKPOINT_MAGIC = "hiflash-ddqn"


class DivergenceError(RuntimeError):
    """Non-finite Q-network parameters; ``last_good`` is the best finite snapshot."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class QNetwork:
    def __init__(self, n_in, n_out, hidden=(48, 32), seed=0, zero=False):
        self.n_in, self.n_out, self.hidden = n_in, n_out, tuple(hidden)
        if len(self.hidden) != 2:
            raise ValueError("the Q-network has exactly two hidden layers")
        sizes = (n_in, *self.hidden, n_out)
        rng = np.random.default_rng(seed)
        self.params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            W = np.zeros((a, b)) if zero else rng.standard_normal((a, b)) * math.sqrt(1.0 / a)
            self.params += [W, np.zeros(b)]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self):
        net = QNetwork.__new__(QNetwork)
        net.n_in, net.n_out, net.hidden = self.n_in, self.n_out, self.hidden
        net.params = [p.copy() for p in self.params]
        return net

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {theta.size}")
        i = 0
        for p in self.params:
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    def _forward(self, X):
        W1, b1, W2, b2, W3, b3 = self.params
        h1 = np.tanh(X @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        return h1, h2, h2 @ W3 + b3

    def forward(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_in:
            raise ValueError(f"state has {X.shape[1]} features, network expects {self.n_in}")
        return self._forward(X)[2]

    def grad_taken(self, X, actions, coef):
        """Gradient of ``sum_i coef_i * Q(x_i, a_i)`` with respect to every parameter."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W1, b1, W2, b2, W3, b3 = self.params
        h1, h2, _ = self._forward(X)
        dq = np.zeros((len(X), self.n_out))
        dq[np.arange(len(X)), actions] = coef
        gW3 = h2.T @ dq
        gb3 = dq.sum(0)
        d2 = (dq @ W3.T) * (1.0 - h2 ** 2)
        gW2 = h1.T @ d2
        gb2 = d2.sum(0)
        d1 = (d2 @ W2.T) * (1.0 - h1 ** 2)
        return [X.T @ d1, d1.sum(0), gW2, gb2, gW3, gb3]


def q_values(net, state):
    return net.forward(state)[0]


def select_action(net, state, eps, rng):
    """Epsilon-greedy action index; greedy ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(net.n_out))
    return int(np.argmax(q_values(net, state)))


def ddqn_targets(online, target, rewards, next_states, terminals, gamma):
    """``r + gamma * Q'(s', argmax_a Q(s', a))``; terminal rows keep ``r``."""
    rewards = np.asarray(rewards, dtype=float)
    if gamma == 0:
        return rewards.copy()
    nxt = np.atleast_2d(next_states)
    best = np.argmax(online.forward(nxt), axis=1)
    boot = target.forward(nxt)[np.arange(len(nxt)), best]
    return rewards + gamma * np.where(np.asarray(terminals, dtype=bool), 0.0, boot)


def td_loss(net, states, actions, targets):
    q = net.forward(states)[np.arange(len(actions)), actions]
    return 0.5 * float(np.mean((np.asarray(targets) - q) ** 2))


def update_step(net, states, actions, targets, lr):
    """One SGD step on the mean squared TD error; mutates ``net`` in place."""
    states = np.atleast_2d(states)
    actions = np.asarray(actions, dtype=int)
    q = net.forward(states)[np.arange(len(actions)), actions]
    err = np.asarray(targets, dtype=float) - q
    grads = net.grad_taken(states, actions, err / len(actions))
    for p, g in zip(net.params, grads):
        p += lr * g
    return 0.5 * float(np.mean(err ** 2))


def sync_target(online, target):
    """Copy the online weights into the target network."""
    for t, o in zip(target.params, online.params):
        t[...] = o


class ReplayBuffer:
    """FIFO transition store; the oldest entry is evicted once full."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items = deque(maxlen=capacity)
        self.ids = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self):
        return len(self.items)

    def add(self, transition):
        self.items.append(transition)
        self.ids.append(self.inserted)
        self.inserted += 1

    def sample(self, batch_size, rng):
        idx = rng.choice(len(self.items), size=min(batch_size, len(self.items)), replace=False)
        return [self.items[i] for i in idx]


@dataclass(frozen=True)
class AgentHyperparams:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.6
    lr: float = 1e-3
    sync_every: int = 100
    buffer_size: int = 10_000
    batch_size: int = 32
    hidden: tuple = (48, 32)
    warmup: int = 32
    eval_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.sync_every < 1:
            raise ValueError("sync_every must be at least 1")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("buffer_size must be at least batch_size >= 1")


def epsilon(hp, progress):
    """Linear decay over the first ``eps_decay_fraction`` of training."""
    frac = min(1.0, progress / hp.eps_decay_fraction) if hp.eps_decay_fraction > 0 else 1.0
    return hp.eps_start + (hp.eps_end - hp.eps_start) * frac


class GreedyPolicy:
    """Frozen greedy policy over normalised states."""

    def __init__(self, net, scale, tau_max):
        self.net = net.copy()
        self.scale = np.asarray(scale, dtype=float)
        self.tau_max = tau_max
        self.name = "ddqn"

    def __call__(self, state):
        x = state.vector() / self.scale
        return int(np.argmax(q_values(self.net, x))) - 1

    def save(self, path):
        save_checkpoint(path, self.net, self.scale, self.tau_max)


def save_checkpoint(path, net, scale, tau_max):
    lines = [f"{CHECKPOINT_MAGIC} 1",
             f"dims {net.n_in} {net.hidden[0]} {net.hidden[1]} {net.n_out}",
             f"tau_max {tau_max}",
             "scale " + " ".join(repr(float(s)) for s in scale)]
    lines += [repr(float(x)) for x in net.flat()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a Q-network checkpoint")
    dims = [int(x) for x in lines[1].split()[1:]]
    tau_max = int(lines[2].split()[1])
    scale = [float(x) for x in lines[3].split()[1:]]
    if dims[-1] != tau_max + 2:
        raise ValueError("checkpoint output width does not match tau_max")
    net = QNetwork(dims[0], dims[3], hidden=(dims[1], dims[2]), zero=True)
    net.set_flat([float(x) for x in lines[4:] if x.strip()])
    return GreedyPolicy(net, scale, tau_max)


@dataclass
class TrainingLog:
    episodes: list
    hyperparams: dict
    syncs: list

    def rows(self):
        return self.episodes


def train_agent(env_factory, hp=None, episodes=50, seed=0, *, audit=None):
    """Train on fresh environments from ``env_factory(episode)``.

    Every ``eval_every`` episodes the greedy policy is rolled out on
    ``env_factory(-1)`` and the best-scoring snapshot is what gets returned
    (``eval_every=0`` returns the final network instead).

    ``audit(agent_state)`` is called after every update step with a dict
    exposing the buffer, the networks and the step counter; tests use it to
    check FIFO and target-freeze invariants during training.
    """
    hp = hp or AgentHyperparams()
    rng = np.random.default_rng(seed)
    env = env_factory(0)
    scale = env.feature_scale()
    n_in = 5 * env.M
    online = QNetwork(n_in, env.n_actions, hp.hidden, seed=seed)
    target = online.copy()
    buffer = ReplayBuffer(hp.buffer_size)
    updates = 0
    syncs = []
    log = []
    best = (-math.inf, None)
    last_finite = GreedyPolicy(online, scale, env.cfg.tau_max)
    for ep in range(episodes):
        if ep:
            env = env_factory(ep)
        eps = epsilon(hp, ep / max(1, episodes))
        state = env.reset()
        x = state.vector() / scale
        total, n_steps, losses = 0.0, 0, []
        while not env.done:
            if state.checkin_edge is not None:
                j = select_action(online, x, eps, rng)
            else:
                j = 1
            nxt, r, done, info = env.step(j - 1)
            x_next = nxt.vector() / scale
            terminal = done and info["reason"] == "target"
            buffer.add((x, j, r, x_next, terminal))
            total += r
            n_steps += 1
            if len(buffer) >= max(hp.warmup, hp.batch_size):
                batch = buffer.sample(hp.batch_size, rng)
                S = np.array([b[0] for b in batch])
                A = np.array([b[1] for b in batch])
                R = np.array([b[2] for b in batch])
                S2 = np.array([b[3] for b in batch])
                T = np.array([b[4] for b in batch])
                # overflow surfaces as DivergenceError below rather than as warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    Y = ddqn_targets(online, target, R, S2, T, hp.gamma)
                    losses.append(update_step(online, S, A, Y, hp.lr))
                updates += 1
                if not all(np.isfinite(p).all() for p in online.params):
                    raise DivergenceError(
                        f"non-finite Q-network parameters after update {updates} "
                        f"(episode {ep}, last loss {losses[-1]!r}); lower lr or rescale rewards",
                        best[1] or last_finite)
                if updates % hp.sync_every == 0:
                    sync_target(online, target)
                    syncs.append(updates)
                if audit is not None:
                    audit({"buffer": buffer, "online": online, "target": target,
                           "updates": updates, "syncs": syncs})
            state, x = nxt, x_next
        log.append({"episode": ep, "epsilon": eps, "slots": n_steps, "return": total,
                    "reason": env.reason, "mean_loss": float(np.mean(losses)) if losses else None})
        last_finite = GreedyPolicy(online, scale, env.cfg.tau_max)
        if hp.eval_every and ((ep + 1) % hp.eval_every == 0 or ep + 1 == episodes):
            greedy = GreedyPolicy(online, scale, env.cfg.tau_max)
            score = sum(env_factory(-1).run(greedy))
            log[-1]["greedy_return"] = score
            if score > best[0]:
                best = (score, greedy)
    policy = best[1] if best[1] is not None else GreedyPolicy(online, scale, env.cfg.tau_max)
    return policy, TrainingLog(log, asdict(hp), syncs)
