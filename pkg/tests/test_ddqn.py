import math

import numpy as np
import pytest

from hiflash import ddqn, oracles
from hiflash.staleness_mdp import MdpState, toy_env
from conftest import rel_err


def layers(net):
    return [(net.params[i].tolist(), net.params[i + 1].tolist()) for i in range(0, 6, 2)]


def test_zero_network_and_output_width():
    net = ddqn.QNetwork(5 * 3, 16 + 2, zero=True)
    assert np.array_equal(net.forward(np.ones(15)), np.zeros((1, 18)))


def test_forward_matches_per_neuron_oracle(rng):
    net = ddqn.QNetwork(7, 4, hidden=(6, 5), seed=3)
    for _ in range(5):
        x = rng.standard_normal(7)
        ref = oracles.mlp_forward(x.tolist(), layers(net))
        assert np.max(np.abs(net.forward(x)[0] - ref)) < 1e-10


def test_select_action(rng):
    net = ddqn.QNetwork(3, 6, seed=0)
    x = np.array([0.1, -0.4, 0.9])
    assert ddqn.select_action(net, x, 0.0, rng) == int(np.argmax(net.forward(x)))
    counts = np.bincount([ddqn.select_action(net, x, 1.0, rng) for _ in range(10_000)], minlength=6)
    sigma = math.sqrt(10_000 * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 10_000 / 6) <= 3 * sigma)


def test_argmax_invariant_to_constant_shift():
    net = ddqn.QNetwork(3, 5, seed=2)
    x = np.array([0.3, 0.2, -0.1])
    before = ddqn.select_action(net, x, 0.0, None)
    net.params[-1] += 7.5
    assert ddqn.select_action(net, x, 0.0, None) == before


def test_targets(rng):
    online, target = ddqn.QNetwork(4, 3, seed=1), ddqn.QNetwork(4, 3, seed=2)
    r = rng.standard_normal(5)
    s2 = rng.standard_normal((5, 4))
    assert np.array_equal(ddqn.ddqn_targets(online, target, r, s2, [False] * 5, 0.0), r)
    assert np.array_equal(ddqn.ddqn_targets(online, target, r, s2, [True] * 5, 0.9), r)
    same = ddqn.ddqn_targets(online, online.copy(), r, s2, [False] * 5, 0.9)
    assert np.allclose(same, r + 0.9 * online.forward(s2).max(axis=1))


def test_update_zero_error_and_descent(rng):
    net = ddqn.QNetwork(4, 3, seed=1)
    S = rng.standard_normal((8, 4))
    A = rng.integers(0, 3, 8)
    Y = net.forward(S)[np.arange(8), A]
    before = net.flat()
    ddqn.update_step(net, S, A, Y, 0.1)
    assert np.array_equal(net.flat(), before)
    Y2 = Y + rng.standard_normal(8)
    l0 = ddqn.td_loss(net, S, A, Y2)
    ddqn.update_step(net, S, A, Y2, 1e-3)
    assert ddqn.td_loss(net, S, A, Y2) < l0


def test_backprop_finite_differences(rng):
    net = ddqn.QNetwork(5, 4, hidden=(6, 3), seed=4)
    S = rng.standard_normal((3, 5))
    A = rng.integers(0, 4, 3)
    coef = rng.standard_normal(3)
    g = np.concatenate([x.ravel() for x in net.grad_taken(S, A, coef)])
    theta = net.flat()
    for _ in range(10):
        d = rng.standard_normal(theta.size)

        def f(th):
            probe = net.copy()
            probe.set_flat(th)
            return float(coef @ probe.forward(S)[np.arange(3), A])

        assert rel_err(g @ d, oracles.central_difference(f, theta.tolist(), d.tolist(), 1e-5)) < 1e-4


def test_sync():
    online, target = ddqn.QNetwork(3, 2, seed=0), ddqn.QNetwork(3, 2, seed=9)
    before = online.flat()
    ddqn.sync_target(online, target)
    assert np.array_equal(online.flat(), before)
    x = np.array([0.5, 0.1, -2.0])
    assert np.array_equal(online.forward(x), target.forward(x))


def test_replay_fifo_and_capacity(rng):
    buf = ddqn.ReplayBuffer(5)
    for i in range(12):
        buf.add(i)
        assert len(buf) == min(i + 1, 5)
    assert list(buf.items) == [7, 8, 9, 10, 11] and list(buf.ids) == [7, 8, 9, 10, 11]
    assert len(set(buf.sample(5, rng))) == 5


def test_epsilon_schedule():
    hp = ddqn.AgentHyperparams()
    assert ddqn.epsilon(hp, 0.0) == 1.0
    assert ddqn.epsilon(hp, 0.6) == pytest.approx(0.05)
    assert ddqn.epsilon(hp, 0.9) == pytest.approx(0.05)


class TwoStateEnv:
    """s0 -> s1 -> end; action index 1 means a = 0, index 0 means a = -1."""

    R = {0: {0: 0.0, 1: 1.0}, 1: {0: 0.5, 1: -1.0}}

    class cfg:
        tau_max = 0

    M = 1
    n_actions = 2

    def feature_scale(self):
        return np.ones(5)

    def _state(self):
        return MdpState(np.array([float(self.s)]), np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))

    def reset(self):
        self.s, self.done, self.reason = 0, False, None
        return self._state()

    def step(self, a):
        r = self.R[self.s][a + 1]
        if self.s == 1:
            self.done, self.reason = True, "target"
        self.s = 1
        return self._state(), r, self.done, {"reason": self.reason}

    def run(self, policy):
        st, out = self.reset(), []
        while not self.done:
            st, r, _, _ = self.step(policy(st))
            out.append(r)
        return out


def test_two_state_mdp_matches_value_iteration():
    P = {0: {j: {1: 1.0} for j in (0, 1)}, 1: {j: {"end": 1.0} for j in (0, 1)}, "end": {}}
    R = {0: dict(TwoStateEnv.R[0]), 1: dict(TwoStateEnv.R[1])}
    _, opt = oracles.value_iteration(P, R, 0.9)
    hp = ddqn.AgentHyperparams(gamma=0.9, lr=0.05, warmup=8, batch_size=8, sync_every=10,
                               buffer_size=200, hidden=(8, 8))
    policy, _ = ddqn.train_agent(lambda ep: TwoStateEnv(), hp, episodes=300, seed=0)
    env = TwoStateEnv()
    for s in (0, 1):
        env.reset()
        env.s = s
        assert policy(env._state()) + 1 == opt[s]


def test_training_deterministic_and_buffer_bounded():
    hp = ddqn.AgentHyperparams(buffer_size=100, eval_every=5)
    seen = []
    _, a = ddqn.train_agent(lambda ep: toy_env(), hp, 10, seed=1,
                            audit=lambda st: seen.append(len(st["buffer"])))
    _, b = ddqn.train_agent(lambda ep: toy_env(), hp, 10, seed=1)
    assert a.episodes == b.episodes and a.syncs == b.syncs
    assert max(seen) <= 100
    assert a.syncs == list(range(100, 100 * (len(a.syncs) + 1), 100))


def test_checkpoint_round_trip(tmp_path, rng):
    net = ddqn.QNetwork(15, 6, seed=5)
    pol = ddqn.GreedyPolicy(net, np.arange(1, 16), 4)
    p = tmp_path / "agent.ckpt"
    pol.save(p)
    back = ddqn.load_checkpoint(p)
    probes = rng.standard_normal((10, 15))
    assert np.array_equal(back.net.forward(probes), net.forward(probes))
    assert np.array_equal(back.scale, pol.scale) and back.tau_max == 4


def test_divergence_raises_with_last_good():
    hp = ddqn.AgentHyperparams(lr=1e6, warmup=32)
    with pytest.raises(ddqn.DivergenceError) as err:
        ddqn.train_agent(lambda ep: toy_env(), hp, 5, seed=0)
    assert err.value.last_good is not None
    assert np.isfinite(err.value.last_good.net.flat()).all()
