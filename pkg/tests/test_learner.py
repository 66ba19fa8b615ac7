import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiflash import learner, oracles
from hiflash.association import js_divergence
from conftest import rel_err


def test_generate_balanced_and_deterministic():
    a, _ = learner.generate_synthetic(200, 2, 2, 4.0, seed=1)
    b, _ = learner.generate_synthetic(200, 2, 2, 4.0, seed=1)
    assert len(a) == 200
    counts = np.bincount(a.y)
    assert abs(counts[0] - counts[1]) <= 1
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_separable_data_fits_perfectly():
    data, _ = learner.generate_synthetic(10, 2, 2, 10.0, seed=7)
    spec = learner.LearnerSpec("regularized-logistic", 2, 2)
    grad = lambda w: learner.gradient(spec, np.array(w), data).tolist()  # noqa: E731
    w = oracles.plain_gd(grad, [0.0] * spec.num_params, 0.5, 200)[-1]
    preds = learner.predict(spec, np.array(w), data.X)
    assert oracles.accuracy(preds.tolist(), data.y.tolist()) == 1.0


def test_anisotropy_must_be_at_least_one():
    with pytest.raises(ValueError):
        learner.generate_synthetic(10, 2, 2, seed=0, anisotropy=0.5)


def test_noniid1_clients_are_single_class():
    train, _ = learner.generate_synthetic(500, 10, 5, seed=0)
    for c in learner.partition(train, "noniid1", 20, seed=0):
        dist = learner.label_distribution(c, 10)
        assert np.count_nonzero(dist) == 1 and dist.max() == 1.0


def test_iid_clients_close_to_global():
    train, _ = learner.generate_synthetic(2000, 10, 5, seed=0)
    glob = learner.label_distribution(train, 10)
    for c in learner.partition(train, "iid", 10, seed=0):
        assert js_divergence(learner.label_distribution(c, 10), glob) <= 0.05


@pytest.mark.parametrize("scheme", ["iid", "noniid1", "noniid2", "quantity_skew"])
def test_partition_covers_every_sample_once(scheme):
    train, _ = learner.generate_synthetic(400, 4, 3, seed=3)
    shards = learner.partition(train, scheme, 8, seed=3, size_range=(10, 60))
    rows = np.concatenate([c.X for c in shards])
    assert len(rows) == len(train)
    key = lambda X: sorted(map(tuple, X.round(12)))  # noqa: E731
    assert key(rows) == key(train.X)


def test_noniid2_has_at_most_two_classes():
    train, _ = learner.generate_synthetic(400, 10, 3, seed=3)
    for c in learner.partition(train, "noniid2", 20, seed=3):
        assert len(np.unique(c.y)) <= 2


def test_unknown_scheme_rejected(small_data):
    with pytest.raises(ValueError, match="unknown partition"):
        learner.partition(small_data, "dirichlet", 3)


def test_zero_params_loss_is_log_k():
    data, _ = learner.generate_synthetic(20, 2, 3, seed=0)
    spec = learner.LearnerSpec("regularized-logistic", 3, 2, mu_reg=0.3)
    assert learner.loss(spec, np.zeros(spec.num_params), data) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_matches_per_sample_oracle(small_data, logistic, mlp, rng):
    X, y = small_data.X.tolist(), small_data.y.tolist()
    w = rng.standard_normal(logistic.num_params)
    assert learner.loss(logistic, w, small_data) == pytest.approx(
        oracles.softmax_ce_loss(w.tolist(), X, y, 3, 0.05), rel=1e-12)
    th = rng.standard_normal(mlp.num_params)
    assert learner.loss(mlp, th, small_data) == pytest.approx(
        oracles.mlp_ce_loss(th.tolist(), X, y, 5, 3, 0.01), rel=1e-12)


def test_small_step_decreases_convex_loss(small_data, logistic):
    w = np.zeros(logistic.num_params)
    w2 = learner.sgd_step(logistic, w, small_data, 0.01)
    assert learner.loss(logistic, w2, small_data) < learner.loss(logistic, w, small_data)


@pytest.mark.parametrize("kind", ["logistic", "mlp"])
def test_gradient_finite_differences(small_data, logistic, mlp, kind, rng):
    spec = logistic if kind == "logistic" else mlp
    f = lambda th: learner.loss(spec, np.array(th), small_data)  # noqa: E731
    for _ in range(10):
        w = rng.standard_normal(spec.num_params) * 0.5
        d = rng.standard_normal(spec.num_params)
        numeric = oracles.central_difference(f, w.tolist(), d.tolist(), h=1e-5)
        analytic = float(learner.gradient(spec, w, small_data) @ d)
        assert rel_err(analytic, numeric) < 1e-5


def test_gradient_vanishes_at_optimum(small_data, logistic):
    beta, _ = learner.estimate_convex_constants(logistic, small_data)
    w = np.zeros(logistic.num_params)
    for _ in range(5000):
        w = learner.sgd_step(logistic, w, small_data, 1.0 / beta)
    assert np.linalg.norm(learner.gradient(logistic, w, small_data)) < 1e-6


def test_identical_data_identical_gradients(small_data, logistic):
    w = np.full(logistic.num_params, 0.1)
    copy = learner.ClientDataset(small_data.X.copy(), small_data.y.copy(), client_id=9)
    assert np.array_equal(learner.gradient(logistic, w, small_data), learner.gradient(logistic, w, copy))


def test_sgd_step_definitions(small_data, logistic):
    w = np.linspace(-1, 1, logistic.num_params)
    assert np.array_equal(learner.sgd_step(logistic, w, small_data, 0.0), w)
    g = learner.gradient(logistic, w, small_data)
    assert np.array_equal(learner.sgd_step(logistic, w, small_data, 0.3), w - 0.3 * g)


def test_minibatch_without_replacement():
    s = learner.MinibatchSampler(300, 60, seed=0)
    seen = np.concatenate([s.next_batch() for _ in range(5)])
    assert len(seen) == 300 and len(np.unique(seen)) == 300
    assert learner.MinibatchSampler(30, 60, seed=0).next_batch() is None


def test_label_distribution_worked_example():
    dist = learner.label_distribution(np.array([0, 2, 2]), 4)
    assert dist.tolist() == pytest.approx([1 / 3, 0, 2 / 3, 0])
    assert learner.label_distribution(np.array([1, 1]), 3).tolist() == [0.0, 1.0, 0.0]


@given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_label_distribution_sums_to_one(labels):
    assert learner.label_distribution(np.array(labels), 6).sum() == pytest.approx(1.0)


def test_zero_features_beta_is_mu():
    spec = learner.LearnerSpec("regularized-logistic", 3, 2, mu_reg=0.2)
    data = learner.ClientDataset(np.zeros((5, 3)), np.array([0, 1, 0, 1, 0]))
    assert learner.estimate_convex_constants(spec, data) == (0.2, 0.2)


def test_power_iteration_matches_dense_eigensolver(rng):
    B = rng.standard_normal((5, 5))
    A = B @ B.T
    assert learner.power_iteration(A) == pytest.approx(np.linalg.eigvalsh(A)[-1], abs=1e-4)


def test_dataset_round_trip(tmp_path, small_data):
    p = tmp_path / "c.csv"
    learner.save_dataset(small_data, p, 3)
    back, K = learner.load_dataset(p)
    assert K == 3
    assert np.array_equal(back.X, small_data.X) and np.array_equal(back.y, small_data.y)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_lr_schedule_non_increasing(epochs):
    s = learner.LRSchedule(0.1, 0.5, 10)
    assert s(epochs + 1) <= s(epochs) <= 0.1
