"""scikit-learn style wrappers around federated training on one in-memory dataset.

The data passed to ``fit`` is split into simulated clients, either by an
explicit ``groups`` vector (one client id per sample) or by a partition
scheme, and the federation is trained for ``epochs`` epochs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import BaselineConfig, BaselineRunner
from .data import ClientShard, Dataset, PartitionSpec, partition
from .exceptions import ConfigurationError
from .model import build_model
from .orchestrator import build_federation


def _shards_from_groups(X, y, groups):
    groups = np.asarray(groups)
    if len(groups) != len(y):
        raise ConfigurationError("groups must have one entry per sample")
    out = []
    for cid, g in enumerate(np.unique(groups)):
        idx = np.flatnonzero(groups == g)
        out.append(ClientShard(cid, idx, X[idx], y[idx]))
    return out


class _FederatedClassifier(ClassifierMixin, BaseEstimator):
    def _prepare(self, X, y, groups):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("need at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        if groups is not None:
            shards = _shards_from_groups(X, y_enc, groups)
        else:
            data = Dataset(X, y_enc, len(self.classes_))
            spec = PartitionSpec(self.partition, self.num_clients, self.random_state,
                                 self.classes_per_client, None, self.beta)
            shards = partition(data, spec)
        kwargs = {"hidden": self.hidden} if self.arch in ("mlp", "cnn") else {}
        self.model_ = build_model(self.arch, self.input_shape_, len(self.classes_), **kwargs)
        return shards

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has feature shape {X.shape[1:]}, expected {self.input_shape_}")
        return self.classes_[self.model_.predict(self.params_, X)]


class StratifyClassifier(_FederatedClassifier):
    """Schedule-driven federated training (``mode`` is ``"batch"`` or ``"single"``)."""

    def __init__(self, mode="batch", arch="mlp", hidden=32, epochs=10, lr=0.5, batch_size=32,
                 chunk_size=1, policy="uniform", num_clients=10, partition="iid",
                 classes_per_client=None, beta=0.5, random_state=0):
        self.mode = mode
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.chunk_size = chunk_size
        self.policy = policy
        self.num_clients = num_clients
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.beta = beta
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        if self.mode not in ("batch", "single"):
            raise ConfigurationError(f"mode must be 'batch' or 'single', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        shards = self._prepare(X, y, groups)
        server, _ = build_federation(self.model_, shards, lr=self.lr, seed=self.random_state,
                                     policy=self.policy, num_classes=len(self.classes_))
        for _ in range(self.epochs):
            if self.mode == "batch":
                server.run_batch_epoch(self.batch_size)
            else:
                server.run_single_sample_epoch(self.chunk_size)
        self.params_ = server.global_params
        self.history_ = list(server.round_log)
        self.transcript_ = server.transcript
        return self


class FederatedBaselineClassifier(_FederatedClassifier):
    """FedAvg, FedProx, SCAFFOLD or sequential FL over simulated clients."""

    def __init__(self, algorithm="fedavg", arch="mlp", hidden=32, epochs=10, lr=0.1, local_epochs=1,
                 local_batch=32, prox_mu=0.0, num_clients=10, partition="iid",
                 classes_per_client=None, beta=0.5, random_state=0):
        self.algorithm = algorithm
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.local_epochs = local_epochs
        self.local_batch = local_batch
        self.prox_mu = prox_mu
        self.num_clients = num_clients
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.beta = beta
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        cfg = BaselineConfig(self.algorithm, self.local_epochs, self.local_batch, self.lr,
                             self.prox_mu, self.random_state).validate()
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        shards = self._prepare(X, y, groups)
        runner = BaselineRunner(self.model_, shards, cfg, self.model_.init_params(self.random_state))
        for _ in range(self.epochs):
            runner.step()
        self.params_ = runner.params
        self.transcript_ = runner.transcript
        return self
