import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stratify.estimators import FederatedBaselineClassifier, StratifyClassifier
from stratify.exceptions import ConfigurationError


@pytest.fixture
def xy(digits):
    X = digits.X.reshape(len(digits.y), -1)[:600]
    return X, np.array(["c%d" % v for v in digits.y[:600]])


def test_stratify_batch_learns_digits(xy):
    X, y = xy
    clf = StratifyClassifier(epochs=5, num_clients=4, lr=0.5, random_state=0).fit(X, y)
    assert set(clf.predict(X)) <= set(clf.classes_)
    assert clf.score(X, y) > 0.8
    assert len(clf.history_) == 5 and clf.transcript_


def test_single_mode_and_groups(xy):
    X, y = xy
    groups = np.arange(len(y)) % 3
    clf = StratifyClassifier(mode="single", epochs=1, lr=0.05, random_state=0).fit(X, y, groups=groups)
    assert clf.score(X, y) > 0.5


@pytest.mark.parametrize("algo", ["fedavg", "fedprox", "scaffold", "sfl"])
def test_baselines_fit_and_score(xy, algo):
    X, y = xy
    clf = FederatedBaselineClassifier(algorithm=algo, epochs=3, local_epochs=3, num_clients=4, lr=0.2,
                                      prox_mu=0.01)
    assert clf.fit(X, y).score(X, y) > 0.7


def test_same_seed_same_params(xy):
    X, y = xy
    a = StratifyClassifier(epochs=1, num_clients=3).fit(X, y)
    b = clone(a).fit(X, y)
    assert a.params_.max_abs_diff(b.params_) == 0


def test_errors(xy):
    X, y = xy
    with pytest.raises(NotFittedError):
        StratifyClassifier().predict(X)
    with pytest.raises(ConfigurationError):
        StratifyClassifier(mode="both").fit(X, y)
    with pytest.raises(ConfigurationError):
        StratifyClassifier().fit(X, np.zeros(len(y)))
    with pytest.raises(ConfigurationError):
        FederatedBaselineClassifier(algorithm="fednova").fit(X, y)
    clf = StratifyClassifier(epochs=1, num_clients=2).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :10])
