"""Experiment configuration, the run loop, metrics and communication accounting.

A configuration is a TOML document with one table per concern::

    seed = 0
    c_update = 1.0

    [dataset]
    name = "digits"          # digits | synthetic | idx | csv
    test_fraction = 0.2

    [partition]
    kind = "classes_per_client"
    num_clients = 10
    classes_per_client = 1

    [model]
    arch = "mlp"
    hidden = 32

    [train]
    algorithm = "stratify-batch"
    epochs = 15
    lr = 0.5
    batch_size = 32

Any value can be overridden with a dotted key, for example
``train.lr=0.1``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .baselines import ALGORITHMS as BASELINES, BaselineConfig, BaselineRunner
from .data import (
    PartitionSpec,
    load_csv,
    load_digits_dataset,
    load_idx_images,
    make_synthetic,
    partition,
    train_test_split_shard,
)
from .exceptions import ConfigurationError
from .model import build_model
from .network import Transcript
from .orchestrator import build_federation, evaluate, evaluate_shards
from .privacy import MockAdditiveBackend, NoisyBackend

log = logging.getLogger(__name__)

STRATIFY = ("stratify-single", "stratify-batch")
ALGORITHMS = STRATIFY + BASELINES
CSV_COLUMNS = ("epoch", "top1", "transfers", "bytes")


@dataclass
class DatasetConfig:
    name: str = "digits"
    test_fraction: float = 0.2
    num_classes: int = 10
    samples_per_class: int = 100
    num_domains: int = 1
    dim: int = 8
    path: str | None = None
    labels_path: str | None = None


@dataclass
class PartitionConfig:
    kind: str = "iid"
    num_clients: int = 10
    classes_per_client: int | None = None
    domains_per_client: int | None = None
    beta: float = 0.5


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: int = 32
    bn: bool = False
    channels: list = field(default_factory=lambda: [8, 16])


@dataclass
class TrainConfig:
    algorithm: str = "stratify-batch"
    epochs: int = 10
    lr: float = 0.5
    chunk_size: int = 1
    batch_size: int = 32
    policy: str = "uniform"
    freq_mode: str = "uniform"
    freq: int | None = None
    cap: int | None = None
    backend: str = "mock"
    noise: float = 1e-3
    local_epochs: int = 1
    local_batch: int = 32
    prox_mu: float = 0.0


SECTIONS = {"dataset": DatasetConfig, "partition": PartitionConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    c_update: float = 1.0
    name: str = ""

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        data = dict(data)
        kwargs = {}
        for key, section in SECTIONS.items():
            raw = data.pop(key, {}) or {}
            if not isinstance(raw, dict):
                raise ConfigurationError(f"[{key}] must be a table")
            known = {f.name for f in dataclasses.fields(section)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigurationError(f"unknown key(s) in [{key}]: {', '.join(sorted(unknown))}")
            kwargs[key] = section(**raw)
        data.pop("sweep", None)
        top = {f.name for f in dataclasses.fields(cls)} - set(SECTIONS)
        unknown = set(data) - top
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
        return cls(**kwargs, **data)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_toml(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section.key`` (or top-level ``key``) values replaced."""
        data = self.to_dict()
        for key, value in dotted.items():
            set_dotted(data, key, value)
        return ExperimentConfig.from_dict(data)

    def validate(self) -> "ExperimentConfig":
        t = self.train
        if t.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {t.algorithm!r}; expected one of {ALGORITHMS}")
        if t.epochs < 1:
            raise ConfigurationError("epoch budget must be >= 1")
        if t.chunk_size < 1:
            raise ConfigurationError("chunk_size must be >= 1")
        if t.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not t.lr > 0:
            raise ConfigurationError("lr must be positive")
        if t.policy not in ("uniform", "weighted"):
            raise ConfigurationError(f"unknown selection policy {t.policy!r}")
        if t.backend not in ("mock", "noisy"):
            raise ConfigurationError(f"unknown backend {t.backend!r}")
        if t.algorithm == "stratify-single" and self.model.bn:
            raise ConfigurationError("batch-norm models cannot be trained with stratify-single")
        if not 0 < self.dataset.test_fraction < 1:
            raise ConfigurationError("test_fraction must be in (0, 1)")
        if self.c_update < 0:
            raise ConfigurationError("c_update must be >= 0")
        if t.algorithm in BASELINES:
            self.baseline_config().validate()
        return self

    def baseline_config(self) -> BaselineConfig:
        t = self.train
        return BaselineConfig(t.algorithm, t.local_epochs, t.local_batch, t.lr, t.prox_mu, self.seed)

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(p.kind, p.num_clients, self.seed, p.classes_per_client, p.domains_per_client, p.beta)


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML in {path}: {exc}") from None


def parse_value(text):
    """Interpret an override value the way TOML would, falling back to a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(data, key, value) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{key!r} does not name a config table")
    node[parts[-1]] = value


# -- metrics ------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    top1: float
    transfers: int
    bytes: int


@dataclass
class MetricsRecord:
    algorithm: str
    num_clients: int
    c_update: float = 1.0
    epochs: list = field(default_factory=list)
    shard_digests: list = field(default_factory=list)
    messages: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    transcript_start: int = 0
    transcript: Transcript | None = field(default=None, repr=False, compare=False)

    def add(self, epoch, top1, transfers, nbytes) -> None:
        if self.epochs and epoch <= self.epochs[-1].epoch:
            raise ConfigurationError("epoch indices must increase")
        self.epochs.append(EpochMetrics(int(epoch), float(top1), int(transfers), int(nbytes)))

    @property
    def rounds(self) -> int:
        return len(self.epochs)

    @property
    def best_top1(self) -> float:
        return max((e.top1 for e in self.epochs), default=float("nan"))

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch of the first maximum, matching how ``E#`` is reported."""
        if not self.epochs:
            return None
        best = self.best_top1
        return next(e.epoch for e in self.epochs if e.top1 == best)

    @property
    def transfers(self) -> int:
        return sum(e.transfers for e in self.epochs)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.epochs)

    def summary(self) -> dict:
        cost = CommCostModel.from_record(self)
        return {
            "algorithm": self.algorithm,
            "num_clients": self.num_clients,
            "rounds": self.rounds,
            "best_top1": self.best_top1,
            "best_epoch": self.best_epoch,
            "transfers": self.transfers,
            "bytes": self.total_bytes,
            "f_freq": str(cost.f_freq),
            "c_update": self.c_update,
            "T": float(cost.total),
            "transcript_start": self.transcript_start,
            "messages": self.messages,
            "shard_digests": self.shard_digests,
        }


@dataclass
class CommCostModel:
    """``T = R * C_update * f_freq`` with ``f_freq`` measured, never configured."""

    c_update: Fraction
    rounds: int
    f_freq: Fraction

    @classmethod
    def from_counts(cls, transfers, num_clients, rounds, c_update) -> "CommCostModel":
        if rounds == 0:
            return cls(Fraction(str(c_update)), 0, Fraction(0))
        return cls(Fraction(str(c_update)), int(rounds), Fraction(int(transfers), int(num_clients) * int(rounds)))

    @classmethod
    def from_record(cls, record: MetricsRecord) -> "CommCostModel":
        return cls.from_counts(record.transfers, record.num_clients, record.rounds, record.c_update)

    @classmethod
    def from_transcript(cls, records, num_clients, rounds, c_update, since=0) -> "CommCostModel":
        """Count model-carrying entries in an exported transcript from ``since`` on."""
        transfers = sum(1 for r in records if r["timestamp"] >= since and r["model"])
        return cls.from_counts(transfers, num_clients, rounds, c_update)

    @property
    def total(self) -> Fraction:
        return self.rounds * self.c_update * self.f_freq


def comm_cost(record, model=None) -> float:
    """Communication time ``R * C_update * f_freq`` for a finished run, in seconds."""
    if model is None:
        model = CommCostModel.from_record(record)
    return float(model.total)


def emit_csv(record, path) -> Path:
    """Write one row per epoch (``epoch,top1,transfers,bytes``), UTF-8 with LF endings."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text(record))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write metrics CSV: {exc.strerror}", str(path)) from None
    return path


def csv_text(record) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in record.epochs:
        w.writerow([e.epoch, repr(e.top1), e.transfers, e.bytes])
    return buf.getvalue()


def read_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochMetrics(int(r["epoch"]), float(r["top1"]), int(r["transfers"]), int(r["bytes"])) for r in rows]


# -- running ------------------------------------------------------------------------


def load_dataset(cfg: DatasetConfig, seed=0):
    if cfg.name == "digits":
        return load_digits_dataset()
    if cfg.name == "synthetic":
        return make_synthetic(cfg.num_classes, cfg.samples_per_class, cfg.num_domains, seed, dim=cfg.dim)
    if cfg.name == "idx":
        if not cfg.path or not cfg.labels_path:
            raise ConfigurationError("idx dataset needs path and labels_path")
        return load_idx_images(cfg.path, cfg.labels_path, cfg.num_classes)
    if cfg.name == "csv":
        if not cfg.path:
            raise ConfigurationError("csv dataset needs path")
        return load_csv(cfg.path, cfg.num_classes)
    raise ConfigurationError(f"unknown dataset {cfg.name!r}")


def prepare_shards(config: ExperimentConfig, dataset=None):
    """Partition and split; returns ``(dataset, train_shards, test_shards)``."""
    dataset = dataset if dataset is not None else load_dataset(config.dataset, config.seed)
    shards = partition(dataset, config.partition_spec())
    pairs = [train_test_split_shard(s, config.dataset.test_fraction, config.seed) for s in shards]
    return dataset, [p[0] for p in pairs], [p[1] for p in pairs]


def _model_kwargs(config):
    m = config.model
    if m.arch == "mlp":
        return {"hidden": m.hidden, "bn": m.bn}
    if m.arch == "cnn":
        return {"hidden": m.hidden, "bn": m.bn, "channels": tuple(m.channels)}
    if m.bn:
        raise ConfigurationError(f"architecture {m.arch!r} has no batch-norm variant")
    return {}


def run_experiment(config: ExperimentConfig, dataset=None, on_epoch=None) -> MetricsRecord:
    """Train the configured algorithm for the epoch budget, evaluating after each epoch."""
    config.validate()
    t0 = time.perf_counter()
    dataset, train, test = prepare_shards(config, dataset)
    model = build_model(config.model.arch, dataset.input_shape, dataset.num_classes, **_model_kwargs(config))
    t = config.train
    transcript = Transcript()
    record = MetricsRecord(t.algorithm, len(train), config.c_update,
                           shard_digests=[s.digest() for s in train], transcript=transcript)
    if t.algorithm in STRATIFY:
        backend = MockAdditiveBackend(config.seed) if t.backend == "mock" else NoisyBackend(config.seed, t.noise)
        server, _ = build_federation(model, train, test, lr=t.lr, seed=config.seed, policy=t.policy,
                                     backend=backend, freq_mode=t.freq_mode, freq=t.freq, cap=t.cap,
                                     num_classes=dataset.num_classes, transcript=transcript)
        record.transcript_start = transcript.mark()
        for epoch in range(1, t.epochs + 1):
            if t.algorithm == "stratify-single":
                entry = server.run_single_sample_epoch(t.chunk_size)
            else:
                entry = server.run_batch_epoch(t.batch_size)
            acc = evaluate(model, server.global_params, server.clients.values())
            entry.accuracy = acc
            record.add(epoch, acc, entry.model_transfers, sum(entry.bytes.values()))
            if on_epoch is not None:
                on_epoch(record.epochs[-1])
    else:
        runner = BaselineRunner(model, train, config.baseline_config(), model.init_params(config.seed), transcript)
        for epoch in range(1, t.epochs + 1):
            mark = transcript.mark()
            runner.step()
            msgs = transcript.since(mark)
            acc = evaluate_shards(model, runner.params, test)
            record.add(epoch, acc, transcript.model_transfers(msgs), sum(m.nbytes for m in msgs))
            if on_epoch is not None:
                on_epoch(record.epochs[-1])
    record.messages = dict(sorted(transcript.counts_by_kind().items()))
    record.wall_clock = time.perf_counter() - t0
    return record


def write_outputs(record, out_dir, name="run", transcript=True) -> dict:
    """Metrics CSV, a JSON summary and (optionally) the NDJSON transcript."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": emit_csv(record, out / f"{name}.csv")}
    summary = record.summary()
    paths["summary"] = out / f"{name}.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if transcript and record.transcript is not None:
        paths["transcript"] = out / f"{name}.transcript.ndjson"
        record.transcript.export(paths["transcript"])
    return paths


# -- sweeps -------------------------------------------------------------------------


def expand_sweep(base: ExperimentConfig, grid) -> list:
    """Cartesian product of ``{dotted key: [values]}``; returns ``(name, config)`` pairs."""
    if not grid:
        return [(base.name or "run", base)]
    keys = sorted(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        name = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in overrides.items())
        out.append((name, base.override(**copy.deepcopy(overrides))))
    return out


def check_shared_shards(records) -> None:
    """Runs sharing dataset, partition and seed must have consumed identical shard bytes."""
    groups = {}
    for key, rec in records:
        groups.setdefault(key, []).append(rec)
    for key, recs in groups.items():
        first = recs[0].shard_digests
        for r in recs[1:]:
            if r.shard_digests != first:
                raise ConfigurationError(f"shard digests differ within comparison group {key}")


def comparison_key(config: ExperimentConfig) -> str:
    return json.dumps([dataclasses.asdict(config.dataset), dataclasses.asdict(config.partition), config.seed],
                      sort_keys=True)


def run_sweep(base: ExperimentConfig, grid, out_dir, transcript=False) -> list:
    runs = expand_sweep(base, grid)
    for _, cfg in runs:
        cfg.validate()
    results = []
    for name, cfg in runs:
        log.info("running %s", name)
        rec = run_experiment(cfg)
        write_outputs(rec, out_dir, name, transcript=transcript)
        results.append((name, cfg, rec))
    check_shared_shards([(comparison_key(cfg), rec) for _, cfg, rec in results])
    write_summary_csv([(name, rec) for name, _, rec in results], Path(out_dir) / "summary.csv")
    return results


SUMMARY_COLUMNS = ("name", "algorithm", "rounds", "best_top1", "best_epoch", "transfers", "bytes", "f_freq", "T")


def write_summary_csv(named_records, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for name, rec in named_records:
            s = rec.summary()
            w.writerow([name, s["algorithm"], s["rounds"], repr(s["best_top1"]), s["best_epoch"],
                        s["transfers"], s["bytes"], s["f_freq"], repr(s["T"])])
    return path
