import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stratify.data import Dataset, load_digits_dataset, make_synthetic

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def digits():
    return load_digits_dataset()


@pytest.fixture
def blobs():
    return make_synthetic(4, 30, num_domains=2, seed=1, dim=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_dataset(n_per_class=6, num_classes=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), n_per_class)
    X = rng.normal(size=(len(y), dim)) + y[:, None]
    return Dataset(X, y, num_classes)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
