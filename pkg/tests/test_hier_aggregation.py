import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiflash import learner
from hiflash.hier_aggregation import (CloudState, MixingParams, ProtocolError, client_edge_round,
                                      cloud_update, edge_training, mix, mixing_weight, staleness,
                                      weighted_average)


def test_weighted_average_examples():
    assert weighted_average([np.array([0.0]), np.array([2.0])], [5, 5]).tolist() == [1.0]
    assert weighted_average([np.array([0.0]), np.array([2.0])], [1, 3]).tolist() == [1.5]


def test_one_client_round_is_plain_sgd(small_data, logistic):
    w = np.zeros(logistic.num_params)
    out = client_edge_round(logistic, [small_data], w, 0.1, 3)
    ref = w
    for _ in range(3):
        ref = learner.sgd_step(logistic, ref, small_data, 0.1)
    assert np.array_equal(out, ref)


def test_identical_clients_equal_centralised_gd(small_data, logistic):
    w0 = np.zeros(logistic.num_params)
    out, n = edge_training(logistic, [small_data, small_data, small_data], w0, H=2, c=3, lr=0.05)
    ref = w0
    for _ in range(6):
        ref = learner.sgd_step(logistic, ref, small_data, 0.05)
    assert n == 6
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)


def test_mixing_weight_values():
    p = MixingParams(0.7, 0.99)
    assert mixing_weight(p, 0) == 0.7
    assert mixing_weight(p, 10) == pytest.approx(0.6330674525061629, abs=1e-15)


@given(st.integers(0, 500))
def test_mixing_weight_decreasing(tau):
    p = MixingParams(0.7, 0.99)
    assert mixing_weight(p, tau + 1) < mixing_weight(p, tau)


def test_mixing_params_validated():
    with pytest.raises(ValueError):
        MixingParams(0.0, 0.9)
    with pytest.raises(ValueError):
        MixingParams(0.5, 1.5)


def test_mix_examples():
    s = mix(CloudState(np.zeros(2), 4), np.ones(2), 1.0)
    assert s.model.tolist() == [1.0, 1.0] and s.t_c == 5
    assert mix(CloudState(np.zeros(2)), np.ones(2), 0.5).model.tolist() == [0.5, 0.5]


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
       st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), st.floats(0, 1))
def test_mix_is_convex_combination(a, b, alpha):
    out = mix(CloudState(np.array(a)), np.array(b), alpha).model
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    slack = 1e-9 * (1 + np.abs(lo) + np.abs(hi))
    assert ((out >= lo - slack) & (out <= hi + slack)).all()


def test_staleness():
    assert staleness(5, 3) == 2
    assert staleness(7, 7) == 0
    with pytest.raises(ProtocolError):
        staleness(2, 3)


def test_cloud_update_reports_tau_before_advancing():
    state, tau, a = cloud_update(CloudState(np.zeros(1), 3), np.ones(1), 1, MixingParams(0.5, 0.5))
    assert (tau, a, state.t_c) == (2, 0.125, 4)
