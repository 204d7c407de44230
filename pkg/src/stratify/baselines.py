"""Reference federated baselines on the same model and data plumbing.

FedAvg, FedProx, SCAFFOLD (option II control variates) and sequential
federated learning. Every round logs its model traffic to a transcript so
the baselines can be compared on communication as well as accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .model import GradientSum, ModelParams, SumReducer
from .network import MODEL_BROADCAST, MODEL_RELAY, MODEL_UPLOAD, SERVER, Transcript

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "sfl")


@dataclass
class BaselineConfig:
    algorithm: str = "fedavg"
    local_epochs: int = 1
    local_batch: int = 32
    lr: float = 0.05
    prox_mu: float = 0.0
    seed: int = 0

    def validate(self) -> "BaselineConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown baseline {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.local_batch < 1:
            raise ConfigurationError("local_batch must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.prox_mu < 0:
            raise ConfigurationError("prox_mu must be >= 0")
        return self


@dataclass
class ControlVariates:
    """Server variate ``c`` and one variate per client, all shaped like the params."""

    server: list
    clients: dict

    @classmethod
    def zeros(cls, params: ModelParams, client_ids) -> "ControlVariates":
        return cls([np.zeros_like(t) for t in params.tensors],
                   {cid: [np.zeros_like(t) for t in params.tensors] for cid in client_ids})


def _batch_grad(model, params, X, y):
    """Mean-loss gradient of one local minibatch, plus BN stats when present."""
    if model.has_bn:
        _, grads, stats = model.loss_and_grads_parts(params, [(X, y)], bn=SumReducer())
        return grads[0], stats
    return model.grad_summed(params, X, y), None


def local_train(model, params, shard, cfg, round_idx=0, anchor=None, prox_mu=0.0, correction=None):
    """Minibatch SGD over ``shard`` for ``cfg.local_epochs`` epochs.

    The shuffle depends only on the seed, round and local epoch, so clients
    holding identical data follow identical trajectories. ``anchor`` and
    ``prox_mu`` add the proximal pull ``prox_mu * (theta - anchor)``;
    ``correction`` is a per-tensor term added to every step's gradient.
    Returns ``(params, steps)``.
    """
    n = len(shard.y)
    params = params.copy()
    steps = 0
    if n == 0:
        return params, 0
    for epoch in range(cfg.local_epochs):
        rng = np.random.default_rng([cfg.seed, 5, round_idx, epoch])
        order = rng.permutation(n)
        for start in range(0, n, cfg.local_batch):
            rows = order[start:start + cfg.local_batch]
            if model.has_bn and len(rows) < 2:
                continue
            g, stats = _batch_grad(model, params, shard.X[rows], shard.y[rows])
            new = []
            for i, (t, gi) in enumerate(zip(params.tensors, g.grads)):
                d = gi / len(rows)
                if prox_mu and anchor is not None:
                    d = d + prox_mu * (t - anchor.tensors[i])
                if correction is not None:
                    d = d + correction[i]
                new.append(t - cfg.lr * d)
            params = ModelParams(new, params.buffers)
            if stats:
                params = model.update_running_stats(params, stats)
            steps += 1
    return params, steps


def prox_gradient(model, params, anchor, X, y, prox_mu) -> GradientSum:
    """Gradient of ``mean loss + prox_mu/2 * ||theta - anchor||^2``."""
    g, _ = _batch_grad(model, params, X, y)
    return GradientSum([gi / len(y) + prox_mu * (t - a)
                        for gi, t, a in zip(g.grads, params.tensors, anchor.tensors)], len(y))


def prox_objective(model, params, anchor, X, y, prox_mu) -> float:
    bn = SumReducer() if model.has_bn else None
    loss, _ = model.forward_loss(params, X, y, bn=bn)
    sq = sum(float(np.sum((t - a) ** 2)) for t, a in zip(params.tensors, anchor.tensors))
    return loss / len(y) + 0.5 * prox_mu * sq


def weighted_average(results, weights) -> ModelParams:
    """Average tensors and buffers with ``weights`` (normalized here), in list order."""
    w = np.asarray(weights, dtype=float)
    if len(results) == 0 or w.sum() <= 0:
        raise ConfigurationError("need at least one participant with data")
    w = w / w.sum()
    tensors = [sum(wi * r.tensors[k] for wi, r in zip(w, results)) for k in range(len(results[0].tensors))]
    buffers = [sum(wi * r.buffers[k] for wi, r in zip(w, results)) for k in range(len(results[0].buffers))]
    return ModelParams(tensors, buffers)


def _broadcast(transcript, cid, params):
    if transcript is not None:
        transcript.log(MODEL_BROADCAST, SERVER, cid, {"params": params})


def _upload(transcript, cid, params, **extra):
    if transcript is not None:
        transcript.log(MODEL_UPLOAD, cid, SERVER, {"params": params, **extra})


def fedavg_round(global_params, shards, cfg, *, model, round_idx=0, transcript=None) -> ModelParams:
    """One round: every client trains from the global model; sample-weighted average."""
    cfg.validate()
    if not shards:
        raise ConfigurationError("fedavg needs at least one client")
    mu = cfg.prox_mu if cfg.algorithm == "fedprox" else 0.0
    results, sizes = [], []
    for s in shards:
        _broadcast(transcript, s.client_id, global_params)
        local, _ = local_train(model, global_params, s, cfg, round_idx, anchor=global_params, prox_mu=mu)
        _upload(transcript, s.client_id, local)
        results.append(local)
        sizes.append(len(s.y))
    return weighted_average(results, sizes)


def fedprox_local(shard, global_params, cfg, *, model, round_idx=0) -> ModelParams:
    """Local training with the proximal term against ``global_params``."""
    cfg.validate()
    local, _ = local_train(model, global_params, shard, cfg, round_idx, anchor=global_params, prox_mu=cfg.prox_mu)
    return local


def fedprox_round(global_params, shards, cfg, *, model, round_idx=0, transcript=None) -> ModelParams:
    if cfg.algorithm != "fedprox":
        cfg = BaselineConfig("fedprox", cfg.local_epochs, cfg.local_batch, cfg.lr, cfg.prox_mu, cfg.seed)
    return fedavg_round(global_params, shards, cfg, model=model, round_idx=round_idx, transcript=transcript)


def scaffold_round(global_params, shards, variates, cfg, *, model, round_idx=0, transcript=None):
    """SCAFFOLD round with option-II variate updates.

    Local steps use ``g - c_i + c``. Afterwards
    ``c_i' = c_i - c + (theta_global - theta_local) / (K * lr)``. The server
    adds the mean parameter delta (unit global step) and the mean variate
    delta over all clients. Returns ``(params, variates)``.
    """
    cfg.validate()
    if not shards:
        raise ConfigurationError("scaffold needs at least one client")
    c = variates.server
    deltas_x, deltas_c = [], []
    new_clients = dict(variates.clients)
    for s in shards:
        ci = variates.clients[s.client_id]
        _broadcast(transcript, s.client_id, global_params)
        correction = [cc - cic for cc, cic in zip(c, ci)]
        local, steps = local_train(model, global_params, s, cfg, round_idx, correction=correction)
        if steps == 0:
            raise ConfigurationError(f"client {s.client_id} took no local steps (K*lr = 0)")
        scale = 1.0 / (steps * cfg.lr)
        ci_new = [cic - cc + scale * (g - l) for cic, cc, g, l in zip(ci, c, global_params.tensors, local.tensors)]
        deltas_x.append(local)
        deltas_c.append([a - b for a, b in zip(ci_new, ci)])
        new_clients[s.client_id] = ci_new
        _upload(transcript, s.client_id, local, control=ci_new)
    n = len(shards)
    params = weighted_average(deltas_x, [1.0] * n)
    total = len(variates.clients)
    server = [cc + sum(d[k] for d in deltas_c) / total for k, cc in enumerate(c)]
    return params, ControlVariates(server, new_clients)


def sfl_order(shards, seed, round_idx) -> list:
    rng = np.random.default_rng([seed, 6, round_idx])
    return [shards[int(i)] for i in rng.permutation(len(shards))]


def sfl_pass(global_params, client_order, cfg, *, model, round_idx=0, transcript=None) -> ModelParams:
    """Train on each client in turn, handing the model directly to the next one."""
    cfg.validate()
    if not client_order:
        raise ConfigurationError("sfl needs at least one client")
    params = global_params
    prev = SERVER
    for s in client_order:
        if prev == SERVER:
            _broadcast(transcript, s.client_id, params)
        elif transcript is not None:
            transcript.log(MODEL_RELAY, prev, s.client_id, {"params": params})
        params, _ = local_train(model, params, s, cfg, round_idx)
        prev = s.client_id
    _upload(transcript, prev, params)
    return params


class BaselineRunner:
    """Round loop for one baseline; keeps SCAFFOLD state between rounds."""

    def __init__(self, model, shards, cfg, params, transcript=None):
        self.model = model
        self.shards = list(shards)
        self.cfg = cfg.validate()
        self.params = params
        self.transcript = transcript if transcript is not None else Transcript()
        self.round = 0
        self.variates = ControlVariates.zeros(params, [s.client_id for s in self.shards])

    def step(self) -> ModelParams:
        cfg, kw = self.cfg, dict(model=self.model, round_idx=self.round, transcript=self.transcript)
        if cfg.algorithm in ("fedavg", "fedprox"):
            self.params = fedavg_round(self.params, self.shards, cfg, **kw)
        elif cfg.algorithm == "scaffold":
            self.params, self.variates = scaffold_round(self.params, self.shards, self.variates, cfg, **kw)
        else:
            order = sfl_order(self.shards, cfg.seed, self.round)
            self.params = sfl_pass(self.params, order, cfg, **kw)
        self.round += 1
        return self.params
