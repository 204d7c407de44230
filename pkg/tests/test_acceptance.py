"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers. A failing criterion fails its test; tolerances are not relaxed.
"""

import json
import math
import time
from collections import Counter
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import (
    central_bn,
    central_bn_backward,
    centralized_minibatch_sgd,
    centralized_per_sample_sgd,
    extraction_rows,
    schedule_gradient_variance,
)
from stratify.baselines import BaselineConfig, BaselineRunner
from stratify.data import ClientShard, load_digits_dataset
from stratify.experiment import CommCostModel, ExperimentConfig, csv_text, run_experiment
from stratify.model import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Network,
    SumReducer,
    bn_backward_distributed,
    bn_forward_distributed,
    mlp,
)
from stratify.network import Transcript
from stratify.orchestrator import build_federation
from stratify.privacy import LabelHolder, MaskedLabelProtocol, MockAdditiveBackend, scan_server_visible
from stratify.schedule import FrequencyPlan, build_sls, multiset


def report(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@lru_cache(maxsize=None)
def digits():
    return load_digits_dataset()


def whole_dataset_shard():
    ds = digits()
    return ClientShard(0, np.arange(len(ds.y)), ds.X, ds.y)


# -- scenario shared by criteria 6, 8, 9 and 10 ------------------------------------------

SCENARIO_EPOCHS = 15
RUN_SETTINGS = {
    "stratify-batch": {"lr": 0.5, "batch_size": 32},
    "stratify-single": {"lr": 0.05, "chunk_size": 1},
    # FedAvg/SFL: 10 local epochs of batch 64 per round
    "fedavg": {"lr": 0.1, "local_epochs": 10, "local_batch": 64},
    "sfl": {"lr": 0.1, "local_epochs": 10, "local_batch": 64},
}


def scenario_config(algorithm, kind, epochs=SCENARIO_EPOCHS, c_update=1.0):
    part = {"kind": kind, "num_clients": 10}
    if kind == "classes_per_client":
        part["classes_per_client"] = 1
    train = {"algorithm": algorithm, "epochs": epochs, **RUN_SETTINGS[algorithm]}
    return ExperimentConfig.from_dict({
        "seed": 0, "c_update": c_update, "dataset": {"name": "digits", "test_fraction": 0.2},
        "partition": part, "model": {"arch": "mlp", "hidden": 32}, "train": train,
    })


LOGGED_RUNS = {}


@lru_cache(maxsize=None)
def scenario_run(algorithm, kind):
    rec = run_experiment(scenario_config(algorithm, kind), dataset=digits())
    LOGGED_RUNS[(algorithm, kind)] = rec
    return rec


# -- 1, 2: oracle equivalence ------------------------------------------------------------


def test_criterion_1_batch_oracle(capsys):
    t0 = time.perf_counter()
    shard = whole_dataset_shard()
    model = mlp(shard.X.shape[1:], 10, hidden=32)
    lr, batch, want = 0.5, 16, 200
    server, _ = build_federation(model, [shard], lr=lr, seed=0)
    got = []
    server.on_step = got.append
    p0 = server.global_params
    while len(got) < want:
        server.run_batch_epoch(batch)
    client = server.clients[0]
    ref, params = [], p0
    for epoch in range(server.epoch):
        rows = extraction_rows(server, client, epoch)
        steps = math.ceil(len(rows) / batch)
        ref += centralized_minibatch_sgd(model, params, shard.X, shard.y, rows, batch, lr, steps)
        params = ref[-1]
    diff = max(a.max_abs_diff(b) for a, b in zip(got[:want], ref[:want]))
    elapsed = time.perf_counter() - t0
    report(capsys, 1, len(ref) >= want and diff < 1e-9 and elapsed < 30,
           f"{want} steps, max diff {diff:.2e}, {elapsed:.1f}s")


def test_criterion_2_single_sample_oracle(capsys):
    t0 = time.perf_counter()
    shard = whole_dataset_shard()
    model = mlp(shard.X.shape[1:], 10, hidden=32)
    lr, want = 0.05, 200
    server, _ = build_federation(model, [shard], lr=lr, seed=0)
    client = server.clients[0]
    got = []
    client.on_step = got.append
    p0 = server.global_params
    server.run_single_sample_epoch(chunk_size=3)
    rows = extraction_rows(server, client, 0)
    ref = centralized_per_sample_sgd(model, p0, shard.X, shard.y, rows, lr, want)
    diff = max(a.max_abs_diff(b) for a, b in zip(got[:want], ref))
    final = centralized_per_sample_sgd(model, p0, shard.X, shard.y, rows, lr, len(rows))[-1]
    diff = max(diff, server.global_params.max_abs_diff(final))
    elapsed = time.perf_counter() - t0
    report(capsys, 2, len(got) >= want and diff < 1e-9 and elapsed < 30,
           f"{want} steps checked of {len(got)}, max diff {diff:.2e}, {elapsed:.1f}s")


# -- 3: distributed batch norm -----------------------------------------------------------


def random_split(rng, n):
    parts = int(rng.integers(1, 6))
    cuts = np.sort(rng.integers(0, n + 1, size=parts - 1))
    return np.split(np.arange(n), cuts)


def test_criterion_3_distributed_bn(capsys):
    rng = np.random.default_rng(2024)
    worst_fwd = worst_bwd = worst_fd = worst_zero = 0.0
    smooth_bn_nets = (
        Network([Dense(5), BatchNorm(), Dense(4)], (6,), 4),
        Network([Conv2D(3, 3), BatchNorm(), Flatten(), Dense(4)], (2, 5, 5), 4),
    )
    for trial in range(100):
        shape = (64, 5) if trial % 2 == 0 else (64, 3, 4, 4)
        x = rng.normal(loc=rng.normal(), scale=rng.uniform(0.5, 3), size=shape)
        channels = shape[1]
        gamma, beta = rng.normal(size=channels), rng.normal(size=channels)
        dy = rng.normal(size=shape)
        idx = random_split(rng, 64)
        outs, _, cache = bn_forward_distributed([x[i] for i in idx], gamma, beta, SumReducer())
        dx, dg, db = bn_backward_distributed([dy[i] for i in idx], cache, SumReducer())
        y_ref, _, _ = central_bn(x, gamma, beta)
        dx_ref, dg_ref, db_ref = central_bn_backward(dy, x, gamma)
        worst_fwd = max(worst_fwd, np.max(np.abs(np.concatenate(outs) - y_ref)))
        worst_bwd = max(worst_bwd, np.max(np.abs(np.concatenate(dx) - dx_ref)),
                        np.max(np.abs(np.sum(dg, axis=0) - dg_ref)), np.max(np.abs(np.sum(db, axis=0) - db_ref)))

        # every parameter gradient of a smooth BN network (no ReLU kinks) against finite differences
        model = smooth_bn_nets[trial % 2]
        X = rng.normal(size=(64,) + model.input_shape)
        y = rng.integers(0, 4, size=64)
        params = model.init_params(trial)
        params = params.with_flat(params.flat() + rng.normal(scale=0.1, size=params.param_count))
        parts = [(X[i], y[i]) for i in idx]
        _, grads, _ = model.loss_and_grads_parts(params, parts, bn=SumReducer())
        flat = sum(g.flat() for g in grads)
        vec, h = params.flat(), 1e-5

        def loss(v):
            return model.loss_and_grads_parts(params.with_flat(v), parts, bn=SumReducer())[0]

        coords = bn_param_coordinates(model, params)
        offsets = np.cumsum([0] + [t.size for t in params.tensors])
        weights = np.concatenate([np.arange(offsets[i], offsets[i + 1])
                                  for i, t in enumerate(params.tensors) if t.ndim >= 2])
        coords += list(rng.choice(weights, size=6, replace=False))
        # the bias feeding batch-norm is cancelled by the mean subtraction
        worst_zero = max(worst_zero, np.max(np.abs(flat[offsets[1]:offsets[2]])))
        for k in coords:
            e = np.zeros_like(vec)
            e[k] = h
            fd = (loss(vec + e) - loss(vec - e)) / (2 * h)
            rel = abs(flat[k] - fd) / max(abs(flat[k]), abs(fd), 1e-6)
            worst_fd = max(worst_fd, rel)
    ok = worst_fwd < 1e-8 and worst_bwd < 1e-8 and worst_fd < 1e-4 and worst_zero < 1e-10
    report(capsys, 3, ok, f"100 splits; forward {worst_fwd:.1e}, backward {worst_bwd:.1e}, FD rel {worst_fd:.1e}, "
                          f"pre-BN bias grad {worst_zero:.1e}")


def bn_param_coordinates(model, params):
    """Flat indices of every batch-norm gamma and beta entry."""
    offsets = np.cumsum([0] + [t.size for t in params.tensors])
    out = []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            sl = model._param_slices[idx]
            for t in range(*sl.indices(len(params.tensors))):
                out += list(range(offsets[t], offsets[t + 1]))
    assert out
    return out


# -- 4: masked-label protocol ------------------------------------------------------------


def test_criterion_4_privacy_protocol(capsys):
    failures, leaks, checked = 0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng([seed, 404])
        n_clients = int(rng.integers(1, 21))
        n_classes = int(rng.integers(1, 101))
        clients = []
        for _ in range(n_clients):
            k = int(rng.integers(1, n_classes + 1))
            labels = rng.choice(n_classes, size=k, replace=False)
            clients.append({int(lab): int(rng.integers(1, 60)) for lab in labels})
        backend = MockAdditiveBackend(seed)
        holders = [LabelHolder(cid, c, backend, seed) for cid, c in enumerate(clients)]
        transcript = Transcript()
        result = MaskedLabelProtocol(backend.evaluator(), transcript, seed=seed).run(holders)
        plain = Counter()
        for c in clients:
            plain.update(c)
        label_of = {}
        for h in holders:
            for p, lab in h.placeholder_map.items():
                if label_of.setdefault(p, lab) != lab:
                    failures += 1
        counts = {label_of[p]: result.global_counts[p] for p in result.global_counts.counts}
        if counts != dict(plain) or not result.placeholder_map.is_bijection():
            failures += 1
        if len(set(label_of.values())) != len(label_of):
            failures += 1
        leaks += len(scan_server_visible(transcript, set(plain)))
        checked += len(transcript)
    report(capsys, 4, failures == 0 and leaks == 0,
           f"100 scenarios, {failures} count/bijection failures, {leaks} label values in {checked} messages")


# -- 5: schedule statistics ----------------------------------------------------------------


def test_criterion_5_schedule_statistics(capsys):
    rng = np.random.default_rng(5)
    exact = True
    for seed in range(50):
        counts = {f"p{i}": int(c) for i, c in enumerate(rng.integers(1, 40, size=int(rng.integers(1, 12))))}
        plan = FrequencyPlan.from_counts(counts)
        seen = multiset(build_sls(plan, seed).entries)
        exact &= set(seen.values()) == {min(counts.values())} and set(seen) == set(counts)
    sls_var, iid_var = schedule_gradient_variance(trials=2000)
    report(capsys, 5, exact and sls_var <= iid_var,
           f"equal counts {exact}; variance SLS {sls_var:.4f} <= i.i.d. {iid_var:.4f} over 2000 trials")


# -- 6: non-IID reproduction ---------------------------------------------------------------


def test_criterion_6_non_iid_gap(capsys):
    t0 = time.perf_counter()
    best = {(a, k): scenario_run(a, k).best_top1
            for a in ("fedavg", "stratify-batch", "stratify-single") for k in ("iid", "classes_per_client")}
    fedavg_gap = best[("fedavg", "iid")] - best[("fedavg", "classes_per_client")]
    gaps = {a: best[(a, "iid")] - best[(a, "classes_per_client")] for a in ("stratify-batch", "stratify-single")}
    elapsed = time.perf_counter() - t0
    ok = fedavg_gap >= 0.20 and min(abs(g) for g in gaps.values()) <= 0.02 and elapsed < 600
    detail = (f"FedAvg IID {best[('fedavg', 'iid')]:.4f} vs #C=1 {best[('fedavg', 'classes_per_client')]:.4f}"
              f" (gap {100 * fedavg_gap:.1f} pts); "
              + "; ".join(f"{a} gap {100 * g:.2f} pts" for a, g in gaps.items())
              + f"; {elapsed:.0f}s")
    report(capsys, 6, ok, detail)


# -- 7: chunk-size ablation -----------------------------------------------------------------


def test_criterion_7_chunk_ablation(capsys):
    t0 = time.perf_counter()
    transfers = {}
    for chunk in (1, 5):
        cfg = ExperimentConfig.from_dict({
            "seed": 0, "dataset": {"name": "digits"},
            "partition": {"kind": "dirichlet", "num_clients": 10, "beta": 0.5},
            "model": {"arch": "mlp", "hidden": 32},
            "train": {"algorithm": "stratify-single", "epochs": 3, "lr": 0.05, "chunk_size": chunk},
        })
        rec = run_experiment(cfg, dataset=digits())
        LOGGED_RUNS[("chunk", chunk)] = rec
        transfers[chunk] = rec.transfers
    reduction = 1 - transfers[5] / transfers[1]
    elapsed = time.perf_counter() - t0
    report(capsys, 7, 0.30 <= reduction <= 0.40 and elapsed < 120,
           f"transfers {transfers[1]} -> {transfers[5]}, reduction {100 * reduction:.1f}% "
           f"(target 30-40%), {elapsed:.1f}s")


# -- 8: communication identity -------------------------------------------------------------


def test_criterion_8_comm_identity(capsys, tmp_path):
    runs = dict(LOGGED_RUNS)
    if not runs:
        runs[("stratify-batch", "iid")] = scenario_run("stratify-batch", "iid")
    runs[("fedavg", "short")] = run_experiment(scenario_config("fedavg", "iid", epochs=2), dataset=digits())
    bad = []
    for key, rec in runs.items():
        path = tmp_path / "t.ndjson"
        rec.transcript.export(path)
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        for c in ("1.0", "0.125", "2.7"):
            cost = CommCostModel.from_transcript(records, rec.num_clients, rec.rounds, float(c),
                                                 since=rec.transcript_start)
            transfers_csv = sum(e.transfers for e in rec.epochs)
            f_freq = Fraction(transfers_csv, rec.num_clients * rec.rounds)
            if cost.total != rec.rounds * Fraction(c) * f_freq:
                bad.append((key, c))
    report(capsys, 8, not bad, f"{len(runs)} logged runs x 3 C_update values, {len(bad)} mismatches")


# -- 9: baseline sanity -----------------------------------------------------------------------


def test_criterion_9_baselines(capsys):
    ds = digits()
    rows = np.arange(0, len(ds.y), 6)
    base = ClientShard(0, rows, ds.X[rows], ds.y[rows])
    twins = [ClientShard(i, base.indices, base.X, base.y) for i in range(5)]
    model = mlp(ds.input_shape, 10, hidden=16)
    p0 = model.init_params(0)

    def run(algo, mu=0.0):
        r = BaselineRunner(model, twins, BaselineConfig(algo, local_epochs=2, local_batch=16, lr=0.1, prox_mu=mu), p0)
        for _ in range(3):
            r.step()
        return r.params

    fedavg = run("fedavg")
    prox_diff = run("fedprox", 0.0).max_abs_diff(fedavg)
    scaffold_diff = run("scaffold").max_abs_diff(fedavg)
    sfl = scenario_run("sfl", "classes_per_client").best_top1
    strat = max(scenario_run(a, "classes_per_client").best_top1 for a in ("stratify-batch", "stratify-single"))
    ok = prox_diff < 1e-9 and scaffold_diff < 1e-9 and sfl < strat
    report(capsys, 9, ok, f"FedProx(0) diff {prox_diff:.1e}, SCAFFOLD diff {scaffold_diff:.1e}; "
                          f"#C=1 SFL {sfl:.4f} < Stratify {strat:.4f}")


# -- 10: determinism --------------------------------------------------------------------------


def test_criterion_10_determinism(capsys):
    identical = []
    for algo in ("stratify-batch", "stratify-single", "fedavg", "sfl"):
        cfg = scenario_config(algo, "classes_per_client", epochs=3)
        a = csv_text(run_experiment(cfg, dataset=digits())).encode("utf-8")
        b = csv_text(run_experiment(cfg, dataset=load_digits_dataset())).encode("utf-8")
        identical.append(a == b)
    first = csv_text(scenario_run("stratify-batch", "classes_per_client")).encode()
    again = csv_text(run_experiment(scenario_config("stratify-batch", "classes_per_client"), dataset=digits()))
    identical.append(first == again.encode())
    report(capsys, 10, all(identical), f"{sum(identical)}/{len(identical)} repeated runs byte-identical")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
