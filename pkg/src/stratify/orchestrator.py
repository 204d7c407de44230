"""Server and client state machines for schedule-driven federated training.

Two procedures are provided:

* single-sample relay: the model travels from client to client; each client
  takes one SGD step per scheduled placeholder on one local sample;
* batch aggregation: selected clients return summed-loss gradients for the
  placeholders they were assigned and the server takes one step on their
  total divided by the number of trained slots.

All server/client interaction is logged in a :class:`~stratify.network.Transcript`.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ProtocolOrderError
from .model import SumReducer, sgd_step, sum_gradients
from .network import (
    BN_STATS,
    GRAD_RETURN,
    MODEL_BROADCAST,
    MODEL_RELAY,
    NEXT_CLIENT_SIGNAL,
    NOT_TRAIN_REPORT,
    SERVER,
    TASK_ASSIGN,
    TRAIN_REQUEST,
    TRAIN_SIGNAL,
    Network,
    Transcript,
)
from .privacy import LabelHolder, MaskedLabelProtocol, MockAdditiveBackend, disclose_counts
from .schedule import FrequencyPlan, build_sls
from .selection import ClientPool, SelectionPolicy, group_runs, select_batch, select_single_sample

log = logging.getLogger(__name__)


class Client:
    """A participant holding a private shard and the placeholder -> label map."""

    def __init__(self, client_id, model, train, test=None, placeholder_map=None, lr=0.05, seed=0):
        self.client_id = client_id
        self.model = model
        self.train = train
        self.test = test
        self.placeholder_map = dict(placeholder_map or {})
        self.lr = lr
        self.seed = seed
        self.held_params = None
        self.local_params = None
        self.global_params = None
        self.batch_rows = []
        self.steps = 0
        self.on_step = None
        self._queues = {}
        self._cursors = {}

    def start_epoch(self, epoch) -> None:
        """Fresh per-label extraction order from a seeded permutation of the shard."""
        rng = np.random.default_rng([self.seed, 3, int(self.client_id), int(epoch)])
        perm = rng.permutation(len(self.train.y))
        labels = self.train.y[perm]
        self._queues = {int(lab): perm[labels == lab] for lab in np.unique(self.train.y)}
        self._cursors = {lab: 0 for lab in self._queues}
        self.held_params = None
        self.batch_rows = []

    def extract(self, placeholder):
        """Next unused row index for the placeholder's label, or ``None``."""
        label = self.placeholder_map.get(placeholder)
        queue = self._queues.get(label)
        if queue is None:
            return None
        pos = self._cursors[label]
        if pos >= len(queue):
            return None
        self._cursors[label] = pos + 1
        return int(queue[pos])

    def on_message(self, msg, net) -> None:
        handler = {
            TASK_ASSIGN: self._on_task,
            MODEL_RELAY: self._on_relay,
            TRAIN_REQUEST: self._on_train_request,
            TRAIN_SIGNAL: self._on_train_signal,
            MODEL_BROADCAST: self._on_broadcast,
        }.get(msg.kind)
        if handler is not None:
            handler(msg, net)

    def _on_relay(self, msg, net):
        self.held_params = msg.payload["params"]

    def _on_broadcast(self, msg, net):
        self.global_params = msg.payload["params"]

    def _on_task(self, msg, net):
        params = msg.payload.get("params")
        if params is None:
            params = self.held_params
        if params is None:
            raise ProtocolOrderError(f"client {self.client_id} has no model for its task")
        params = params.copy()
        not_train = []
        for p in msg.payload["placeholders"]:
            row = self.extract(p)
            if row is None:
                not_train.append(p)
                continue
            g = self.model.grad_summed(params, self.train.X[row:row + 1], self.train.y[row:row + 1])
            params = sgd_step(params, g, self.lr, 1)
            self.steps += 1
            if self.on_step is not None:
                self.on_step(params)
        next_hop = msg.payload["next_hop"]
        net.send(NEXT_CLIENT_SIGNAL, self.client_id, SERVER)
        if next_hop == self.client_id:
            self.held_params = params
        else:
            self.held_params = None
            net.send(MODEL_RELAY, self.client_id, next_hop, params=params)
        net.send(NOT_TRAIN_REPORT, self.client_id, SERVER, not_train=not_train, exhaust=list(dict.fromkeys(not_train)))

    def _on_train_request(self, msg, net):
        if msg.payload.get("params") is not None:
            self.local_params = msg.payload["params"]
        unavail = []
        for p in msg.payload["placeholders"]:
            row = self.extract(p)
            if row is None:
                unavail.append(p)
            else:
                self.batch_rows.append(row)
        net.send(NOT_TRAIN_REPORT, self.client_id, SERVER, not_train=unavail, exhaust=list(dict.fromkeys(unavail)))

    def local_batch(self):
        rows = np.asarray(self.batch_rows, dtype=np.int64)
        return self.train.X[rows], self.train.y[rows]

    def _on_train_signal(self, msg, net):
        if self.local_params is None:
            raise ProtocolOrderError(f"client {self.client_id} signalled before receiving a model")
        if msg.payload.get("lockstep"):
            # batch-norm: the forward/backward pass runs jointly through shared sums
            return
        X, y = self.local_batch()
        self.return_grads(self.model.grad_summed(self.local_params, X, y), net)

    def return_grads(self, grads, net):
        self.steps += grads.num_terms
        self.batch_rows = []
        net.send(GRAD_RETURN, self.client_id, SERVER, grads=grads)


class TranscriptReducer(SumReducer):
    """Sum reducer that logs each participant's partial sums and the returned total."""

    def __init__(self, transcript, participants):
        self.transcript = transcript
        self.participants = list(participants)

    def observe(self, partials):
        for c, part in zip(self.participants, partials):
            self.transcript.log(BN_STATS, c, SERVER, {"stats": np.asarray(part)})
        total = np.sum(partials, axis=0)
        for c in self.participants:
            self.transcript.log(BN_STATS, SERVER, c, {"stats": total})


@dataclass
class RoundLog:
    epoch: int
    mode: str
    sls_length: int = 0
    steps: int = 0
    dropped: int = 0
    updates: int = 0
    messages: dict = field(default_factory=dict)
    bytes: dict = field(default_factory=dict)
    model_transfers: int = 0
    accuracy: float | None = None


class Server:
    """Schedule owner and coordinator; holds no plaintext labels."""

    def __init__(self, model, params, plan, pool, network, lr=0.05, seed=0, policy="uniform"):
        self.model = model
        self.global_params = params
        self.plan = plan
        self.initial_pool = pool
        self.network = network
        self.lr = lr
        self.seed = seed
        self.policy = policy if isinstance(policy, SelectionPolicy) else SelectionPolicy(policy, seed)
        self.schedule = None
        self.pool = None
        self.queue = deque()
        self.round_log = []
        self.epoch = 0
        self.on_step = None

    @property
    def transcript(self) -> Transcript:
        return self.network.transcript

    @property
    def clients(self) -> dict:
        return self.network.clients

    def _begin_epoch(self, mode):
        self.schedule = build_sls(self.plan, seed=self.seed * 1_000_003 + self.epoch)
        self.pool = self.initial_pool.copy()
        self.queue = deque()
        for cid in sorted(self.clients):
            self.clients[cid].start_epoch(self.epoch)
        return RoundLog(self.epoch, mode, sls_length=len(self.schedule)), self.transcript.mark()

    def _end_epoch(self, entry, mark):
        for cid in sorted(self.clients):
            self.network.send(MODEL_BROADCAST, SERVER, cid, params=self.global_params)
        msgs = self.transcript.since(mark)
        entry.messages = dict(sorted(self.transcript.counts_by_kind(msgs).items()))
        entry.bytes = dict(sorted(self.transcript.bytes_by_kind(msgs).items()))
        entry.model_transfers = self.transcript.model_transfers(msgs)
        self.round_log.append(entry)
        self.epoch += 1
        return entry

    def _servable(self, items, entry):
        """Drop placeholders nobody can serve any more (and their pending copies)."""
        kept = []
        for p in items:
            if self.pool.holders(p):
                kept.append(p)
                continue
            extra = self.schedule.drop_pending(p)
            entry.dropped += 1 + extra
            log.warning("epoch %d: placeholder %s unservable, dropped %d slot(s)", self.epoch, p, 1 + extra)
        return kept

    def _apply_report(self, msg, assigned):
        not_train = msg.payload["not_train"]
        self.pool.note_exhausted(msg.src, msg.payload["exhaust"])
        failed = list(not_train)
        for p in assigned:
            if p in failed:
                failed.remove(p)
            else:
                self.pool.consume(msg.src, p)
        return list(not_train)

    # -- single-sample relay ------------------------------------------------------

    def run_single_sample_epoch(self, chunk_size=1) -> RoundLog:
        if chunk_size < 1:
            raise ConfigurationError("chunk_size must be >= 1")
        if self.model.has_bn:
            raise ConfigurationError("batch-norm models cannot train one sample at a time")
        entry, mark = self._begin_epoch("single")
        net, model_at = self.network, SERVER
        while self.schedule.remaining or self.queue:
            while len(self.queue) < 2 and self.schedule.remaining:
                chunk = self._servable(self.schedule.pop_front(chunk_size), entry)
                if chunk:
                    self.queue.extend(group_runs(chunk, select_single_sample(chunk, self.pool, self.policy)))
            if not self.queue:
                break
            task = self.queue.popleft()
            task.next_hop = self.queue[0].client if self.queue else SERVER
            params = self.global_params if model_at == SERVER else None
            if model_at not in (SERVER, task.client):
                raise ProtocolOrderError(f"model is at {model_at!r}, task is for {task.client!r}")
            net.send(TASK_ASSIGN, SERVER, task.client, placeholders=list(task.placeholders),
                     next_hop=task.next_hop, params=params)
            model_at = task.next_hop
            for msg in net.drain():
                if msg.kind == MODEL_RELAY:
                    self.global_params = msg.payload["params"]
                elif msg.kind == NOT_TRAIN_REPORT:
                    not_train = self._apply_report(msg, task.placeholders)
                    entry.steps += len(task.placeholders) - len(not_train)
                    self.schedule.reinsert_random(not_train)
            entry.updates += 1
        return self._end_epoch(entry, mark)

    # -- batch aggregation --------------------------------------------------------

    def _lockstep_bn(self, participants):
        """Run participants' forward/backward in lockstep through shared BN sums."""
        net = self.network
        parts = [self.clients[c].local_batch() for c in participants]
        reducer = TranscriptReducer(self.transcript, participants)
        _, grads, stats = self.model.loss_and_grads_parts(self.global_params, parts, bn=reducer)
        for c, g in zip(participants, grads):
            self.clients[c].return_grads(g, net)
        return stats

    def run_batch_epoch(self, batch_size=32) -> RoundLog:
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        entry, mark = self._begin_epoch("batch")
        net = self.network
        synced = {}
        version = 0
        max_attempts = max(1, len(self.clients))
        while self.schedule.remaining:
            batch = self._servable(self.schedule.pop_front(batch_size), entry)
            if not batch:
                continue
            pending = list(zip(batch, select_batch(batch, self.pool, self.policy)))
            trained, participants, attempts = 0, set(), 0
            while pending:
                by_client = {}
                for p, c in pending:
                    by_client.setdefault(c, []).append(p)
                failed = []
                for c in sorted(by_client):
                    ps = by_client[c]
                    params = self.global_params if synced.get(c) != version else None
                    net.send(TRAIN_REQUEST, SERVER, c, placeholders=ps, params=params)
                    synced[c] = version
                    for msg in net.drain(NOT_TRAIN_REPORT):
                        not_train = self._apply_report(msg, ps)
                        ok = len(ps) - len(not_train)
                        if ok:
                            participants.add(c)
                            trained += ok
                        failed += not_train
                attempts += 1
                failed = self._servable(failed, entry)
                if not failed:
                    break
                if attempts >= max_attempts:
                    entry.dropped += len(failed)
                    log.warning("epoch %d: %d slot(s) dropped after %d attempts", self.epoch, len(failed), attempts)
                    break
                pending = list(zip(failed, select_batch(failed, self.pool, self.policy)))
            if not trained:
                continue
            order = sorted(participants)
            if self.model.has_bn and trained < 2:
                entry.dropped += trained
                for c in order:
                    self.clients[c].batch_rows = []
                log.warning("epoch %d: batch-norm batch of one sample skipped", self.epoch)
                continue
            if self.model.has_bn:
                for c in order:
                    net.send(TRAIN_SIGNAL, SERVER, c, lockstep=True)
                stats = self._lockstep_bn(order)
            else:
                stats = None
                for c in order:
                    net.send(TRAIN_SIGNAL, SERVER, c)
            returned = {m.src: m.payload["grads"] for m in net.drain(GRAD_RETURN)}
            total = sum_gradients([returned[c] for c in order], self.global_params)
            if total.num_terms != trained:
                raise ProtocolOrderError(f"{total.num_terms} gradient terms for {trained} trained slots")
            new = sgd_step(self.global_params, total, self.lr, total.num_terms)
            if stats:
                new = self.model.update_running_stats(new, stats)
            self.global_params = new
            version += 1
            entry.steps += trained
            entry.updates += 1
            if self.on_step is not None:
                self.on_step(self.global_params)
            net.drain()
        return self._end_epoch(entry, mark)


def run_single_sample_epoch(server, clients=None, chunk_size=1, policy=None) -> Server:
    if policy is not None:
        server.policy = policy
    server.run_single_sample_epoch(chunk_size)
    return server


def run_batch_epoch(server, clients=None, batch_size=32, policy=None) -> Server:
    if policy is not None:
        server.policy = policy
    server.run_batch_epoch(batch_size)
    return server


def evaluate_shards(model, params, test_shards) -> float:
    """Mean over shards of per-shard top-1 accuracy; empty shards are skipped."""
    accs = []
    for test in test_shards:
        if test is None or len(test.y) == 0:
            log.warning("client %s has an empty test split; excluded", getattr(test, "client_id", "?"))
            continue
        accs.append(float(np.mean(model.predict(params, test.X) == test.y)))
    if not accs:
        raise ConfigurationError("no client has a test split")
    return float(np.mean(accs))


def evaluate(model, params, clients) -> float:
    """Mean over clients of per-client top-1 accuracy on their held-out split."""
    return evaluate_shards(model, params, [c.test for c in clients])


def build_federation(model, train_shards, test_shards=None, *, lr=0.05, seed=0, policy="uniform",
                     backend=None, freq_mode="uniform", freq=None, cap=None, init_seed=None,
                     num_classes=None, transcript=None):
    """Run the masked-label protocol and wire up a server with its clients.

    Returns ``(server, protocol_result)``. The protocol messages are the
    first entries of the transcript.
    """
    transcript = transcript if transcript is not None else Transcript()
    backend = backend if backend is not None else MockAdditiveBackend(seed)
    holders = [LabelHolder(s.client_id, s.label_counts, backend, seed) for s in train_shards]
    proto = MaskedLabelProtocol(backend.evaluator(), transcript, known_classes=num_classes, seed=seed)
    result = proto.run(holders)
    plan = FrequencyPlan.from_counts(result.global_counts.counts, freq_mode, freq, cap)
    if policy == "weighted":
        pool = ClientPool.from_counts(disclose_counts(holders, transcript))
    else:
        pool = ClientPool.from_holdings(result.holdings)
    tests = test_shards or [None] * len(train_shards)
    clients = {
        s.client_id: Client(s.client_id, model, s, t, result.client_maps[s.client_id], lr, seed)
        for s, t in zip(train_shards, tests)
    }
    params = model.init_params(seed if init_seed is None else init_seed)
    server = Server(model, params, plan, pool, Network(clients, transcript), lr, seed, policy)
    return server, result

