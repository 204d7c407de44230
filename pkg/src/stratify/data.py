"""Datasets, file loaders and non-IID client partitioners."""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, FormatError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PARTITION_KINDS = ("iid", "classes_per_client", "domains_per_client", "dirichlet")


@dataclass
class Sample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    domains: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) == 0:
            raise ConfigurationError("dataset is empty")
        if len(self.X) != len(self.y):
            raise ConfigurationError("features and labels differ in length")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ConfigurationError("label outside [0, num_classes)")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)
            if len(self.domains) != len(self.y):
                raise ConfigurationError("domain tags differ in length from labels")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    @property
    def input_shape(self):
        return self.X.shape[1:]

    @property
    def num_domains(self) -> int:
        return 0 if self.domains is None else int(self.domains.max()) + 1


@dataclass
class PartitionSpec:
    kind: str = "iid"
    num_clients: int = 10
    seed: int = 0
    classes_per_client: int | None = None
    domains_per_client: int | None = None
    beta: float = 0.5
    max_retries: int = 100

    def validate(self, dataset: Dataset) -> None:
        if self.kind not in PARTITION_KINDS:
            raise PartitionError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if self.kind == "classes_per_client":
            c = self.classes_per_client
            if c is None or not 1 <= c <= dataset.num_classes:
                raise PartitionError(f"classes_per_client must be in [1, {dataset.num_classes}]")
            if c * self.num_clients < dataset.num_classes:
                raise PartitionError(
                    f"{self.num_clients} clients x {c} classes leaves some of "
                    f"{dataset.num_classes} labels unassigned")
        elif self.kind == "domains_per_client":
            d, nd = self.domains_per_client, dataset.num_domains
            if nd == 0:
                raise PartitionError("dataset carries no domain tags")
            if d is None or not 1 <= d <= nd:
                raise PartitionError(f"domains_per_client must be in [1, {nd}]")
            if d * self.num_clients < nd:
                raise PartitionError("some domains would be unassigned")
        elif self.kind == "dirichlet" and not self.beta > 0:
            raise PartitionError("dirichlet beta must be > 0")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    domains: np.ndarray | None = None

    @property
    def label_counts(self) -> dict:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(lab): int(c) for lab, c in zip(labels, counts)}

    def __len__(self):
        return len(self.y)

    def digest(self) -> str:
        """SHA-256 over indices, features and labels (fair-comparison check)."""
        h = hashlib.sha256()
        for a in (self.indices.astype("<i8"), self.X.astype("<f8"), self.y.astype("<i8")):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _make_shard(dataset, client_id, idx):
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    domains = None if dataset.domains is None else dataset.domains[idx]
    return ClientShard(client_id, idx, dataset.X[idx], dataset.y[idx], domains)


def _split_equally(indices, holders, rng, out):
    """Shuffle ``indices`` and deal them into near-equal parts for ``holders``."""
    perm = rng.permutation(indices)
    offset = int(rng.integers(len(holders))) if len(holders) > 1 else 0
    holders = list(holders[offset:]) + list(holders[:offset])
    for holder, part in zip(holders, np.array_split(perm, len(holders))):
        out[holder].extend(part.tolist())


def dirichlet_assign(labels, num_clients, beta, rng):
    """Label-wise Dirichlet split.

    For each label a proportion vector over clients is drawn from
    ``Dirichlet(beta)``; the label's shuffled samples are cut at the cumulative
    proportions. Returns ``(per-client index lists, proportions[K, N])``.
    """
    classes = np.unique(labels)
    props = np.zeros((int(labels.max()) + 1, num_clients))
    out = [[] for _ in range(num_clients)]
    for lab in classes:
        idx = rng.permutation(np.flatnonzero(labels == lab))
        p = rng.dirichlet(np.full(num_clients, beta))
        props[lab] = p
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for c, part in enumerate(np.split(idx, cuts)):
            out[c].extend(part.tolist())
    return out, props


def partition(dataset: Dataset, spec: PartitionSpec) -> list:
    """Split ``dataset`` into disjoint client shards according to ``spec``."""
    spec.validate(dataset)
    rng = np.random.default_rng(spec.seed)
    n, K = spec.num_clients, dataset.num_classes
    buckets = [[] for _ in range(n)]
    if spec.kind == "iid":
        clients = list(range(n))
        for lab in range(K):
            idx = np.flatnonzero(dataset.y == lab)
            if len(idx):
                _split_equally(idx, clients, rng, buckets)
    elif spec.kind == "classes_per_client":
        c = spec.classes_per_client
        relabel = rng.permutation(K)
        holders = {lab: [] for lab in range(K)}
        for client in range(n):
            for j in range(c):
                holders[int(relabel[(client * c + j) % K])].append(client)
        for lab in range(K):
            idx = np.flatnonzero(dataset.y == lab)
            if len(idx) and holders[lab]:
                _split_equally(idx, holders[lab], rng, buckets)
    elif spec.kind == "domains_per_client":
        d, nd = spec.domains_per_client, dataset.num_domains
        holders = {dom: [] for dom in range(nd)}
        for client in range(n):
            for j in range(d):
                holders[(client * d + j) % nd].append(client)
        for dom in range(nd):
            idx = np.flatnonzero(dataset.domains == dom)
            if len(idx):
                _split_equally(idx, holders[dom], rng, buckets)
    else:
        for _ in range(spec.max_retries):
            buckets, _props = dirichlet_assign(dataset.y, n, spec.beta, rng)
            if all(buckets):
                break
        else:
            raise PartitionError(
                f"dirichlet({spec.beta}) left an empty shard after {spec.max_retries} draws")
    return [_make_shard(dataset, i, b) for i, b in enumerate(buckets)]


def train_test_split_shard(shard: ClientShard, test_fraction=0.2, seed=0):
    """Per-label held-out split of one shard; returns ``(train, test)``.

    Each label keeps at least one training sample.
    """
    if not 0 <= test_fraction < 1:
        raise ConfigurationError("test_fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, shard.client_id])
    train_pos, test_pos = [], []
    for lab in np.unique(shard.y):
        pos = rng.permutation(np.flatnonzero(shard.y == lab))
        n_test = min(int(round(test_fraction * len(pos))), len(pos) - 1)
        test_pos.extend(pos[:n_test].tolist())
        train_pos.extend(pos[n_test:].tolist())

    def take(pos):
        pos = np.sort(np.asarray(pos, dtype=np.int64))
        dom = None if shard.domains is None else shard.domains[pos]
        return ClientShard(shard.client_id, shard.indices[pos], shard.X[pos], shard.y[pos], dom)

    return take(train_pos), take(test_pos)


# -- generators and loaders --------------------------------------------------------


def _rotation(dim, angle):
    r = np.eye(dim)
    if dim >= 2:
        c, s = np.cos(angle), np.sin(angle)
        r[:2, :2] = [[c, -s], [s, c]]
    return r


def make_synthetic(num_classes, samples_per_class, num_domains=1, seed=0, dim=8,
                   class_sep=3.0, shift=2.0, rotation=0.6) -> Dataset:
    """Gaussian class blobs with per-domain affine feature skew.

    Domain ``k`` maps features through ``x -> R_k x + s_k``; domain 0 is the
    identity, ``R_k`` rotates the first two axes by ``k * rotation`` and
    ``s_k`` is ``k * shift`` times a fixed random unit vector. Samples of
    each class are dealt round-robin over domains.
    """
    for name, v in (("num_classes", num_classes), ("samples_per_class", samples_per_class),
                    ("num_domains", num_domains), ("dim", dim)):
        if v < 1:
            raise ConfigurationError(f"{name} must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=class_sep, size=(num_classes, dim))
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    rotations = [_rotation(dim, k * rotation) for k in range(num_domains)]
    shifts = [k * shift * direction for k in range(num_domains)]
    X, y, dom = [], [], []
    for lab in range(num_classes):
        base = means[lab] + rng.normal(size=(samples_per_class, dim))
        d = np.arange(samples_per_class) % num_domains
        for k in range(num_domains):
            rows = base[d == k]
            X.append(rows @ rotations[k].T + shifts[k])
            y.append(np.full(len(rows), lab))
            dom.append(np.full(len(rows), k))
    return Dataset(np.concatenate(X), np.concatenate(y), num_classes, np.concatenate(dom),
                   meta={"class_means": means, "domain_rotations": rotations, "domain_shifts": shifts})


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten digits set bundled with scikit-learn, as ``(n, 1, 8, 8)`` in [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return Dataset(d.images[:, None, :, :] / 16.0, d.target, 10)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Read an unsigned-byte IDX file (big-endian header)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError("file shorter than IDX magic", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError("truncated IDX dimension header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) < start + n:
        raise FormatError(f"truncated IDX payload: need {n} bytes", len(data))
    if len(data) > start + n:
        raise FormatError("trailing bytes after IDX payload", start + n)
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=start).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx_images(images_path, labels_path, num_classes=10) -> Dataset:
    """MNIST-style image/label IDX pair as ``(n, 1, H, W)`` scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    return Dataset(images[:, None, :, :] / 255.0, labels.astype(np.int64), num_classes)


def load_csv(path, num_classes=None) -> Dataset:
    """Tabular CSV with a header row; the final column is the integer label."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError("CSV needs a header and at least one row")
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise FormatError(f"non-numeric CSV value: {exc}") from None
    y = values[:, -1].astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    return Dataset(values[:, :-1], y, num_classes, meta={"columns": rows[0]})
