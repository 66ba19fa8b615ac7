import numpy as np
import pytest

from hiflash import learner


@pytest.fixture
def small_data():
    train, _ = learner.generate_synthetic(60, 3, 4, 4.0, seed=2)
    return train


@pytest.fixture
def logistic():
    return learner.LearnerSpec("regularized-logistic", 4, 3, mu_reg=0.05)


@pytest.fixture
def mlp():
    return learner.LearnerSpec("two-layer-mlp", 4, 3, mu_reg=0.01, hidden_width=5)


def rel_err(a, b):
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 1e-8 else abs(a - b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.VERDICTS:
            terminalreporter.write_line(line)
