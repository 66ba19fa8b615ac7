import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiflash import cost_model as cm
from hiflash import oracles


def res(f=2e9):
    return cm.ClientResources(f=f, zeta=20, D=1e6, bandwidth=(1e6,))


def test_comp_cost_example():
    assert cm.client_comp_cost(res(), 3) == pytest.approx(oracles.comp_seconds(3, 1e6, 20, 2e9), rel=1e-15)
    assert cm.client_comp_cost(res(), 3) == pytest.approx(0.03)
    assert cm.client_comp_cost(res(4e9), 3) == cm.client_comp_cost(res(), 3) / 2
    assert cm.client_comp_cost(res(), 0) == 0


def test_comm_cost_example():
    # frozen from oracles.comm_seconds(21840, 1e6, 17)
    assert cm.client_comm_cost(21840, 1e6, 17) == pytest.approx(0.1231337388149526, rel=1e-12)
    assert cm.client_comm_cost(21840, 2e6, 17) == pytest.approx(cm.client_comm_cost(21840, 1e6, 17) / 2)
    assert cm.client_comm_cost(43680, 1e6, 17) == pytest.approx(2 * cm.client_comm_cost(21840, 1e6, 17))


def test_slot_costs(rng):
    assert cm.slot_comp_cost([0, 0, 0], [1.0, 2.0, 3.0]) == 0
    assert cm.slot_comp_cost([0, 1, 0], [1.0, 2.0, 3.0]) == 2.0
    assert cm.slot_comm_cost([1, 1], [1, 1], [3.0, 4.0]) == 0
    assert cm.slot_comm_cost([1, 1], [1, 0], [3.0, 4.0]) == 4.0
    run = rng.integers(0, 2, size=6)
    costs = rng.random(6)
    naive = 0.0
    for m in range(6):
        naive += run[m] * costs[m]
    assert cm.slot_comp_cost(run, costs) == pytest.approx(naive, rel=1e-15)


def test_latency_and_waiting():
    assert cm.response_latency(0.03, 0.12314) == pytest.approx(0.15314)
    assert cm.edge_latency([0.2]) == 0.2
    assert cm.waiting_time([2, 2, 2]) == 0
    assert cm.waiting_time([1, 3]) == 1.0


@given(st.lists(st.floats(0, 100), min_size=1, max_size=10))
def test_latency_properties(lat):
    assert cm.edge_latency(lat) >= max(lat)
    assert cm.waiting_time(lat) >= 0


def test_profile_latency_matrix_marks_out_of_range():
    p = cm.make_profile(6, 3, range_prob=0.5, seed=4)
    L = p.latency_matrix()
    assert L.shape == (3, 6)
    for k in range(6):
        assert np.isfinite(L[:, k]).any()
        for m in range(3):
            assert np.isfinite(L[m, k]) == p.clients[k].in_range(m)


def test_invalid_resources():
    with pytest.raises(ValueError):
        cm.ClientResources(f=0, zeta=1, D=1)
    with pytest.raises(ValueError):
        cm.CostWeights(-1, 0)
