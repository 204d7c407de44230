import numpy as np
import pytest

from conftest import tiny_dataset
from oracles import centralized_minibatch_sgd, centralized_per_sample_sgd, extraction_rows
from stratify.data import ClientShard, PartitionSpec, partition
from stratify.exceptions import ConfigurationError
from stratify.model import SumReducer, mlp, sgd_step, sum_gradients
from stratify.network import (
    GRAD_RETURN,
    MODEL_RELAY,
    NEXT_CLIENT_SIGNAL,
    NOT_TRAIN_REPORT,
    TASK_ASSIGN,
    TRAIN_REQUEST,
    TRAIN_SIGNAL,
)
from stratify.orchestrator import build_federation, evaluate_shards


class RowRecorder:
    """Collects the global indices each server update consumed."""

    def __init__(self, server):
        self.steps, self._current = [], []
        self.params = []
        for client in server.clients.values():
            client.extract = self._wrap(client)
        server.on_step = self._close
        for client in server.clients.values():
            client.on_step = self._close

    def _wrap(self, client):
        inner = client.extract

        def extract(p):
            row = inner(p)
            if row is not None:
                self._current.append(int(client.train.indices[row]))
            return row
        return extract

    def _close(self, params):
        self.steps.append(self._current)
        self._current = []
        self.params.append(params)


def federation(ds, clients=3, kind="iid", seed=0, model=None, **kw):
    shards = partition(ds, PartitionSpec(kind, clients, seed, classes_per_client=2))
    model = model or mlp((ds.X.shape[1],), ds.num_classes, hidden=8)
    server, result = build_federation(model, shards, lr=kw.pop("lr", 0.1), seed=seed, **kw)
    return server, result, model


def test_single_client_batch_matches_centralized_oracle():
    ds = tiny_dataset(n_per_class=8)
    server, _, model = federation(ds, clients=1)
    p0 = server.global_params
    server.run_batch_epoch(batch_size=4)
    client = server.clients[0]
    rows = extraction_rows(server, client, 0)
    ref = centralized_minibatch_sgd(model, p0, client.train.X, client.train.y, rows, 4, 0.1, len(rows) // 4)
    assert server.global_params.max_abs_diff(ref[-1]) < 1e-12


def test_single_client_relay_matches_per_sample_oracle():
    ds = tiny_dataset(n_per_class=5)
    server, _, model = federation(ds, clients=1)
    p0 = server.global_params
    server.run_single_sample_epoch(chunk_size=3)
    client = server.clients[0]
    rows = extraction_rows(server, client, 0)
    ref = centralized_per_sample_sgd(model, p0, client.train.X, client.train.y, rows, 0.1, len(rows))
    assert server.global_params.max_abs_diff(ref[-1]) < 1e-12


@pytest.mark.parametrize("kind", ["iid", "classes_per_client"])
def test_multi_client_batch_equals_centralized_on_the_same_rows(kind):
    ds = tiny_dataset(n_per_class=12, num_classes=4)
    server, _, model = federation(ds, clients=4, kind=kind, seed=2)
    rec = RowRecorder(server)
    params = server.global_params
    for _ in range(2):
        server.run_batch_epoch(batch_size=5)
    for rows, got in zip(rec.steps, rec.params):
        g = model.grad_summed(params, ds.X[rows], ds.y[rows])
        params = sgd_step(params, g, 0.1, len(rows))
        assert got.max_abs_diff(params) < 1e-12


def test_multi_client_relay_equals_centralized_on_the_same_rows():
    ds = tiny_dataset(n_per_class=10, num_classes=4)
    server, _, model = federation(ds, clients=4, kind="classes_per_client", seed=1)
    rec = RowRecorder(server)
    p0 = server.global_params
    server.run_single_sample_epoch(chunk_size=2)
    rows = [r for step in rec.steps for r in step]
    assert all(len(step) == 1 for step in rec.steps)
    ref = centralized_per_sample_sgd(model, p0, ds.X, ds.y, rows, 0.1, len(rows))
    assert server.global_params.max_abs_diff(ref[-1]) < 1e-12


def test_bn_lockstep_matches_centralized_batch():
    ds = tiny_dataset(n_per_class=10, num_classes=4)
    model = mlp((4,), 4, hidden=6, bn=True)
    server, _, _ = federation(ds, clients=4, kind="classes_per_client", seed=3, model=model)
    rec = RowRecorder(server)
    params = server.global_params
    server.run_batch_epoch(batch_size=6)
    assert rec.steps
    for rows, got in zip(rec.steps, rec.params):
        _, (g,), stats = model.loss_and_grads_parts(params, [(ds.X[rows], ds.y[rows])], bn=SumReducer())
        params = model.update_running_stats(sgd_step(params, g, 0.1, len(rows)), stats)
        assert got.max_abs_diff(params) < 1e-8
    bn_msgs = [m for m in server.transcript if m.kind == "BnStats"]
    assert bn_msgs


def test_bn_model_refuses_single_sample_mode():
    ds = tiny_dataset()
    server, _, _ = federation(ds, clients=1, model=mlp((4,), 3, hidden=4, bn=True))
    with pytest.raises(ConfigurationError):
        server.run_single_sample_epoch()


def test_relay_message_order_per_task():
    ds = tiny_dataset(n_per_class=6, num_classes=4)
    server, _, _ = federation(ds, clients=4, kind="classes_per_client", seed=0)
    mark = server.transcript.mark()
    server.run_single_sample_epoch(chunk_size=1)
    msgs = [m for m in server.transcript.since(mark) if m.kind != "ModelBroadcast"]
    i = 0
    while i < len(msgs):
        task = msgs[i]
        assert task.kind == TASK_ASSIGN and task.src == "server"
        assert msgs[i + 1].kind == NEXT_CLIENT_SIGNAL and msgs[i + 1].src == task.dst
        i += 2
        if task.payload["next_hop"] != task.dst:
            relay = msgs[i]
            assert relay.kind == MODEL_RELAY and relay.dst == task.payload["next_hop"]
            i += 1
        assert msgs[i].kind == NOT_TRAIN_REPORT
        i += 1
    # the model is only sent by the server on the first hop of the epoch
    assert sum(m.payload.get("params") is not None for m in msgs if m.kind == TASK_ASSIGN) == 1


def test_batch_message_order():
    ds = tiny_dataset(n_per_class=6, num_classes=4)
    server, _, _ = federation(ds, clients=2, seed=0)
    mark = server.transcript.mark()
    server.run_batch_epoch(batch_size=4)
    kinds = [m.kind for m in server.transcript.since(mark)]
    for k, kind in enumerate(kinds):
        if kind == TRAIN_SIGNAL:
            assert TRAIN_REQUEST in kinds[:k]
        if kind == GRAD_RETURN:
            assert kinds[:k].count(TRAIN_SIGNAL) >= 1


@pytest.mark.parametrize("mode", ["single", "batch"])
def test_slot_conservation_with_over_scheduled_labels(mode):
    ds = tiny_dataset(n_per_class=4, num_classes=3)
    # every label scheduled more often than it exists
    server, _, _ = federation(ds, clients=3, kind="classes_per_client", seed=5, freq=6)
    entry = server.run_single_sample_epoch(2) if mode == "single" else server.run_batch_epoch(4)
    assert entry.sls_length == 18
    assert entry.steps == 12
    assert entry.steps + entry.dropped == entry.sls_length


def test_full_data_epoch_trains_every_slot():
    ds = tiny_dataset(n_per_class=6, num_classes=3)
    server, _, _ = federation(ds, clients=3, kind="iid", seed=0)
    entry = server.run_batch_epoch(4)
    assert (entry.steps, entry.dropped) == (entry.sls_length, 0)


def test_update_divides_by_trained_slots_only():
    # three slots per label, but only three samples exist in total
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([0, 0, 1])
    shard = ClientShard(0, np.arange(3), X, y)
    model = mlp((2,), 2, hidden=3)
    server, _ = build_federation(model, [shard], lr=0.5, seed=0, freq=3)
    p0 = server.global_params
    entry = server.run_batch_epoch(batch_size=6)
    assert entry.steps == 3 and entry.dropped == 3
    g = model.grad_summed(p0, X, y)
    expected = sgd_step(p0, g, 0.5, 3)
    assert server.global_params.max_abs_diff(expected) < 1e-14


def test_uniform_mode_never_discloses_counts():
    ds = tiny_dataset()
    server, _, _ = federation(ds, clients=2)
    assert "CountReport" not in server.transcript.counts_by_kind()
    server, _, _ = federation(ds, clients=2, policy="weighted")
    assert server.transcript.counts_by_kind()["CountReport"] == 2


def test_round_log_counts_model_transfers():
    ds = tiny_dataset(n_per_class=6, num_classes=3)
    server, _, _ = federation(ds, clients=3, kind="classes_per_client", seed=0)
    entry = server.run_single_sample_epoch(1)
    relays = entry.messages.get(MODEL_RELAY, 0)
    # relays + final broadcast + the server's first send
    assert entry.model_transfers == relays + 3 + 1


def test_epochs_are_deterministic():
    ds = tiny_dataset(n_per_class=8, num_classes=3)
    a, _, _ = federation(ds, clients=3, seed=9)
    b, _, _ = federation(ds, clients=3, seed=9)
    for s in (a, b):
        s.run_batch_epoch(3)
        s.run_single_sample_epoch(2)
    assert a.global_params.max_abs_diff(b.global_params) == 0
    assert [m.record() for m in a.transcript] == [m.record() for m in b.transcript]


def test_evaluate_skips_empty_splits():
    ds = tiny_dataset()
    model = mlp((4,), 3, hidden=4)
    params = model.init_params(0)
    full = ClientShard(0, np.arange(len(ds)), ds.X, ds.y)
    empty = ClientShard(1, np.arange(0), ds.X[:0], ds.y[:0])
    acc = evaluate_shards(model, params, [full, empty])
    assert acc == pytest.approx(np.mean(model.predict(params, ds.X) == ds.y))
    with pytest.raises(ConfigurationError):
        evaluate_shards(model, params, [empty])


def test_gradients_sum_identically_in_any_client_order():
    ds = tiny_dataset(n_per_class=4)
    model = mlp((4,), 3, hidden=4)
    p = model.init_params(1)
    parts = [model.grad_summed(p, ds.X[i::3], ds.y[i::3]) for i in range(3)]
    a = sum_gradients(parts, p)
    b = sum_gradients(parts[::-1], p)
    np.testing.assert_allclose(a.flat(), b.flat(), atol=1e-13)
    np.testing.assert_allclose(a.flat(), model.grad_summed(p, ds.X, ds.y).flat(), atol=1e-12)
