import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiflash import oracles
from hiflash.cost_model import CostWeights
from hiflash.simulator import checkin_arrivals
from hiflash.staleness_mdp import (EdgeSpec, FixedThreshold, MdpState, NoControl, ProgressBackend,
                                   RandomThreshold, SlotConfig, SlotEnv, apply_action,
                                   cumulative_reward, reward, toy_env, train_slots)


def test_apply_action_branches():
    assert apply_action([1, 0], [0, 1], 3).tolist() == [1, 1]
    assert apply_action([1, 0], [0, 1], -1).tolist() == [1, 0]
    assert apply_action([1, 0], [0, 0], 2).tolist() == [1, 0]
    with pytest.raises(ValueError):
        apply_action([1, 0], [1, 0], 0)


def test_reward_examples():
    assert reward(3.0, 7.0, CostWeights(0, 0)) == -1
    assert reward(2.0, 4.0, CostWeights(1.0, 0.5)) == -5
    with pytest.raises(ValueError):
        reward(-1.0, 0.0, CostWeights())


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 10), st.floats(0, 10))
def test_reward_at_most_minus_one(comp, comm, s1, s2):
    assert reward(comp, comm, CostWeights(s1, s2)) <= -1


def test_cumulative_reward():
    assert cumulative_reward([-1.0] * 17, 1.0) == -17
    assert cumulative_reward([-2.5], 0.9) == -2.5


@given(st.lists(st.floats(-100, 0), max_size=30), st.floats(0.01, 1))
def test_cumulative_reward_matches_loop(rewards, gamma):
    assert cumulative_reward(rewards, gamma) == pytest.approx(
        oracles.discounted_sum(rewards, gamma), rel=1e-9, abs=1e-9)


def test_state_invariants():
    z = np.zeros(2)
    with pytest.raises(ValueError):
        MdpState(z, z, z, z, np.ones(2))
    with pytest.raises(ValueError):
        MdpState(z, z, z, np.array([3.0, 0.0]), np.array([1.0, 0.0]))
    s = MdpState(z, z, z, np.array([0.0, 2.0]), np.array([1.0, 0.0]))
    assert s.checkin_edge == 0 and s.vector().shape == (10,)


def test_train_slots():
    assert train_slots(1, 0.05, 0.05) == 1
    assert train_slots(3, 0.05, 0.05) == 3
    assert train_slots(1, 0.001, 0.05) == 1


def two_edge_env(admission="budget", tau_max=4):
    edges = [EdgeSpec((0.05,), (0.0,)), EdgeSpec((0.5,), (0.0,))]
    cfg = SlotConfig(tau_max=tau_max, slot_length=0.05, H_range=(1, 2), admission=admission,
                     max_slots=300, jitter=0.2)
    return SlotEnv(edges, ProgressBackend(target=1e9), cfg, seed=3)


def drive(env, policy):
    state = env.reset()
    trace = []
    while not env.done:
        a = policy(state) if state.checkin_edge is not None else 0
        state, *_ = env.step(a)
        trace.append(env.running_vector().sum())
    return trace


def test_fixed_zero_runs_one_edge_at_a_time():
    env = two_edge_env()
    assert max(drive(env, FixedThreshold(0, 4))) <= 1
    assert env.totals["accepted"] > 0


def test_fixed_tau_max_never_discards():
    env = two_edge_env()
    drive(env, FixedThreshold(4, 4))
    assert env.totals["discarded"] == 0 and env.totals["accepted"] > 0


def test_open_admission_with_no_control_never_rejects():
    env = two_edge_env("open")
    drive(env, NoControl())
    assert env.totals["rejected"] == 0 and env.totals["discarded"] == 0


def test_random_policy_reproducible():
    a = two_edge_env()
    b = two_edge_env()
    pa, pb = RandomThreshold(4, seed=5), RandomThreshold(4, seed=5)
    drive(a, pa)
    drive(b, pb)
    assert a.events == b.events


def test_action_out_of_range():
    env = two_edge_env()
    env.reset()
    with pytest.raises(ValueError):
        env.step(9)


def test_toy_env_fixed_threshold_costs():
    # frozen from exhaustive enumeration over thresholds
    costs = {k: -sum(toy_env().run(FixedThreshold(k, 4))) for k in range(5)}
    assert min(costs, key=costs.get) == 2
    assert costs[2] == pytest.approx(23.1, abs=1e-9)
    assert -sum(toy_env().run(NoControl())) == pytest.approx(35.0, abs=1e-9)


def test_toy_env_deterministic():
    assert toy_env().run(FixedThreshold(1, 4)) == toy_env().run(FixedThreshold(1, 4))


def test_checkin_arrivals():
    arr = checkin_arrivals([3, 1, 5], 200, seed=2)
    slots = [s for s, _ in arr]
    assert len(slots) == len(set(slots))
    assert arr == checkin_arrivals([3, 1, 5], 200, seed=2)
    single = checkin_arrivals([4], 50, seed=0)
    assert all(b - a >= 4 for (a, _), (b, _) in zip(single, single[1:]))
