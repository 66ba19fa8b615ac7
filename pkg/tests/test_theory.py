from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiflash import learner, oracles, theory

K = theory.ConvexConstants(beta=2.0, mu=0.5, rho=1.0, eta=0.1, c=3, H_min=1, H_max=3, delta_max=0.2,
                           Delta=0.1, V=0.05, alpha_tau=0.7, T_c=20)


def test_g_exact_values():
    assert theory.g_function(0.3, 2.0, 0.1, 0) == 0.0
    assert theory.g_function(0.3, 2.0, 0.1, 1) == 0.0
    assert theory.g_function(1.0, 1.0, 0.01, 2) == pytest.approx(1e-4, rel=1e-12)


@given(st.floats(0.01, 5), st.floats(0.1, 10), st.floats(0.001, 0.09), st.integers(0, 30))
def test_g_matches_raw_formula(delta, beta, eta, x):
    assert theory.g_function(delta, beta, eta, x) == pytest.approx(
        oracles.g(delta, beta, eta, x), rel=1e-7, abs=1e-12)


def test_kappa():
    assert theory.kappa(0.0, 0.1, 0.5, 3, 1, 57) == 1.0
    # (0.3 + 0.7 * 0.99^3)^100, frozen from the oracle's repeated multiplication
    assert theory.kappa(0.7, 0.01, 1.0, 3, 1, 100) == pytest.approx(0.1223356268087787, rel=1e-12)
    ks = [theory.kappa(0.7, 0.1, 0.5, 3, 1, T) for T in range(1, 30)]
    assert all(b < a for a, b in zip(ks, ks[1:]))


def test_convex_bound_matches_oracle(rng):
    for _ in range(5):
        k = replace(K, beta=float(rng.uniform(1, 4)), mu=float(rng.uniform(0.1, 0.9)),
                    eta=float(rng.uniform(0.01, 0.2)), delta_max=float(rng.uniform(0, 1)),
                    alpha_tau=float(rng.uniform(0, 1)), T_c=int(rng.integers(1, 100)))
        ref = oracles.convex_bound(k.beta, k.mu, k.rho, k.eta, k.c, k.H_min, k.H_max, k.delta_max,
                                   k.Delta, k.V, k.alpha_tau, k.T_c, 3.0)
        assert theory.convex_bound(k, 3.0).bound == pytest.approx(ref, rel=1e-12)


def test_convex_limits():
    far = theory.convex_bound(replace(K, T_c=100_000), 5.0)
    assert far.bound == pytest.approx(far.C3, rel=1e-12)
    zero = theory.convex_bound(replace(K, delta_max=0.0, Delta=0.0, V=0.0, T_c=100_000), 5.0)
    assert zero.bound == pytest.approx(0.0, abs=1e-300)
    assert theory.convex_bound(replace(K, alpha_tau=0.0), 5.0).bound == 5.0


def test_bound_grows_with_staleness():
    rows = theory.tau_sweep(K, 5.0, 0.7, 0.99, range(17))
    assert 5.0 > rows[0]["C3"]
    assert all(b["U"] > a["U"] for a, b in zip(rows, rows[1:]))
    assert all(b["bound"] >= a["bound"] for a, b in zip(rows, rows[1:]))


def test_regime_errors():
    with pytest.raises(theory.RegimeError, match="eta"):
        theory.convex_bound(replace(K, eta=0.9), 1.0)
    with pytest.raises(theory.RegimeError, match="mu"):
        theory.convex_bound(replace(K, mu=0.0), 1.0)


W = theory.WeaklyConvexConstants(mu=0.1, mu_t=0.6, beta_t=2.0, rho_t=1.0, eta=0.05, c=3, H_min=1,
                                 H_max=3, delta_t=0.2, Delta_t=0.1, V_t=0.05, alpha_tau=0.7, T_c=40)


def test_nonconvex_bound():
    assert theory.nonconvex_bound(replace(W, alpha_tau=0.0), 4.0).bound == 4.0
    zero = theory.nonconvex_bound(replace(W, delta_t=0.0, Delta_t=0.0, V_t=0.0, T_c=1_000_000), 4.0)
    assert zero.bound == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(theory.RegimeError, match="mu_t"):
        theory.nonconvex_bound(replace(W, mu_t=0.05), 1.0)


@pytest.fixture
def convex_clients():
    train, _ = learner.generate_synthetic(300, 3, 4, 4.0, seed=1)
    return train


def test_virtual_model_single_client_and_c1(convex_clients):
    spec = learner.LearnerSpec("regularized-logistic", 4, 3, 0.01)
    w0 = np.zeros(spec.num_params)
    one = theory.virtual_cluster_training(spec, [convex_clients], w0, 0.1, 3, 4)
    assert all(np.allclose(a, b, atol=1e-14) for a, b in zip(one.federated, one.virtual))
    shards = learner.partition(convex_clients, "noniid1", 3, seed=0)
    c1 = theory.virtual_cluster_training(spec, shards, w0, 0.1, 1, 5)
    assert all(np.allclose(a, b, atol=1e-14) for a, b in zip(c1.federated, c1.virtual))


def test_iid_drift_smaller_than_noniid(convex_clients):
    spec = learner.LearnerSpec("regularized-logistic", 4, 3, 0.01)
    w0 = np.zeros(spec.num_params)

    def drift(scheme):
        shards = learner.partition(convex_clients, scheme, 3, seed=0)
        t = theory.virtual_cluster_training(spec, shards, w0, 0.2, 5, 4)
        return max(np.linalg.norm(a - b) for a, b in zip(t.federated, t.virtual))

    assert drift("iid") < drift("noniid1")


def test_drift_check(convex_clients):
    spec = learner.LearnerSpec("regularized-logistic", 4, 3, 0.01)
    w0 = np.zeros(spec.num_params)
    single = theory.empirical_drift_check(spec, [convex_clients], w0, 0.1, 3, 5)
    assert single.delta_max == pytest.approx(0.0, abs=1e-12) and single.ok
    two, _ = learner.generate_synthetic(200, 2, 4, 4.0, seed=1)
    spec2 = learner.LearnerSpec("regularized-logistic", 4, 2, 0.01)
    shards = learner.partition(two, "noniid1", 2, seed=0)
    beta, _ = learner.estimate_convex_constants(spec2, learner.pooled(shards))
    rep = theory.empirical_drift_check(spec2, shards, np.zeros(spec2.num_params), 0.5 / beta, 3, 50)
    assert rep.violations == 0 and len(rep.rows) == 151
