"""Masked-label protocol: encrypted label discovery, placeholder mapping and counts.

The server only ever handles ciphertexts and opaque placeholders. Equality
of two encrypted labels is tested by homomorphic subtraction followed by a
client-side decryption that reports only "zero / non-zero". Global counts
per placeholder are homomorphic sums that a client decrypts as totals.

Backends implement ``encrypt``, ``add``, ``subtract`` and ``decrypt``; the
server is handed :meth:`evaluator` which exposes only the arithmetic.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BackendPrecisionError, ConfigurationError, ProtocolIntegrityError
from .network import (
    COUNT_REPORT,
    DECRYPT_REPLY,
    DECRYPT_REQUEST,
    LABEL_RECORD,
    MODEL_KEYS,
    PLACEHOLDER_ASSIGN,
    SERVER,
    Transcript,
)
from .schedule import new_placeholders

ZERO_THRESHOLD = 0.5

_PRIME = (1 << 127) - 1
_SCALE = 1 << 20


@dataclass(frozen=True)
class Ciphertext:
    """Opaque ciphertext; the wire form is a 4-byte little-endian length then the body."""

    body: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<I", len(self.body)) + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        (n,) = struct.unpack_from("<I", data, 0)
        if len(data) != 4 + n:
            raise ValueError("ciphertext length field does not match payload")
        return cls(bytes(data[4:]))


class Evaluator:
    """Server-side handle: ciphertext arithmetic without decryption."""

    def __init__(self, backend):
        self._add = backend.add
        self._sub = backend.subtract
        self.tolerance = backend.tolerance

    def add(self, a, b):
        return self._add(a, b)

    def subtract(self, a, b):
        return self._sub(a, b)


class MockAdditiveBackend:
    """Exact additive scheme for tests. Not secure.

    A value ``v`` is fixed-point encoded as ``a = round(v * 2**20) mod P`` and
    stored as ``(a*k1 + r, r*k2) mod P`` with fresh random ``r``; both
    components add componentwise, and the key ``(k1, k2)`` inverts them.
    """

    tolerance = 0.0

    def __init__(self, seed=0):
        rng = np.random.default_rng([seed, 7])
        self._k1 = int(rng.integers(2, 2**62)) % _PRIME
        self._k2 = int(rng.integers(2, 2**62)) % _PRIME
        self._k1_inv = pow(self._k1, -1, _PRIME)
        self._k2_inv = pow(self._k2, -1, _PRIME)
        self._rng = rng

    @staticmethod
    def _pack(c1, c2):
        return Ciphertext(c1.to_bytes(16, "little") + c2.to_bytes(16, "little"))

    @staticmethod
    def _unpack(ct):
        return int.from_bytes(ct.body[:16], "little"), int.from_bytes(ct.body[16:], "little")

    def encrypt(self, value) -> Ciphertext:
        a = int(round(float(value) * _SCALE)) % _PRIME
        r = (int(self._rng.integers(0, 2**62)) << 62 | int(self._rng.integers(0, 2**62))) % _PRIME
        return self._pack((a * self._k1 + r) % _PRIME, (r * self._k2) % _PRIME)

    def add(self, x, y) -> Ciphertext:
        (a1, a2), (b1, b2) = self._unpack(x), self._unpack(y)
        return self._pack((a1 + b1) % _PRIME, (a2 + b2) % _PRIME)

    def subtract(self, x, y) -> Ciphertext:
        (a1, a2), (b1, b2) = self._unpack(x), self._unpack(y)
        return self._pack((a1 - b1) % _PRIME, (a2 - b2) % _PRIME)

    def decrypt(self, ct) -> float:
        c1, c2 = self._unpack(ct)
        r = (c2 * self._k2_inv) % _PRIME
        a = ((c1 - r) * self._k1_inv) % _PRIME
        if a > _PRIME // 2:
            a -= _PRIME
        return a / _SCALE

    def evaluator(self) -> Evaluator:
        return Evaluator(self)


class NoisyBackend(MockAdditiveBackend):
    """Approximate arithmetic stand-in: decryption adds bounded noise.

    Mimics the rounding behaviour of approximate schemes; noise is uniform in
    ``[-noise, noise]`` and ``tolerance`` is the bound callers may assume.
    """

    def __init__(self, seed=0, noise=1e-3):
        super().__init__(seed)
        self.noise = float(noise)
        self.tolerance = float(noise)
        self._noise_rng = np.random.default_rng([seed, 8])

    def decrypt(self, ct) -> float:
        return super().decrypt(ct) + float(self._noise_rng.uniform(-self.noise, self.noise))


@dataclass
class MaskedLabelRecord:
    client: object
    pairs: list


@dataclass
class PlaceholderMap:
    entries: list

    @property
    def placeholders(self) -> list:
        return [p for _, p in self.entries]

    def is_bijection(self) -> bool:
        ps = self.placeholders
        refs = [id(ct) for ct, _ in self.entries]
        return len(set(ps)) == len(ps) and len(set(refs)) == len(refs)


@dataclass
class GlobalCounts:
    counts: dict
    holders: dict = field(default_factory=dict)

    def __getitem__(self, p):
        return self.counts[p]


class LabelHolder:
    """Client side of the protocol: owns plaintext labels and the decryption key."""

    def __init__(self, client_id, label_counts, backend, seed=0):
        self.client_id = client_id
        self.label_counts = {int(k): int(v) for k, v in label_counts.items() if v > 0}
        self.backend = backend
        self._rng = np.random.default_rng([seed, 9, zlib.crc32(str(client_id).encode())])
        self._order = []
        self.placeholder_map = {}

    def make_record(self) -> MaskedLabelRecord:
        labels = list(self.label_counts)
        self._order = [labels[i] for i in self._rng.permutation(len(labels))]
        pairs = [(self.backend.encrypt(lab), self.backend.encrypt(self.label_counts[lab]))
                 for lab in self._order]
        return MaskedLabelRecord(self.client_id, pairs)

    def zero_flags(self, ciphertexts) -> list:
        return [bool(abs(self.backend.decrypt(ct)) < ZERO_THRESHOLD) for ct in ciphertexts]

    def decrypt_totals(self, ciphertexts) -> list:
        return [float(self.backend.decrypt(ct)) for ct in ciphertexts]

    def accept_placeholders(self, placeholders) -> dict:
        if len(placeholders) != len(self._order):
            raise ProtocolIntegrityError("placeholder assignment does not match record")
        self.placeholder_map = dict(zip(placeholders, self._order))
        return self.placeholder_map

    def placeholder_counts(self) -> dict:
        return {p: self.label_counts[lab] for p, lab in self.placeholder_map.items()}


@dataclass
class ProtocolResult:
    placeholder_map: PlaceholderMap
    holdings: dict
    global_counts: GlobalCounts
    client_maps: dict


class MaskedLabelProtocol:
    """Server-side coordinator; talks to :class:`LabelHolder` objects via a transcript."""

    def __init__(self, evaluator, transcript=None, known_classes=None, seed=0):
        if evaluator.tolerance >= ZERO_THRESHOLD:
            raise ConfigurationError(
                f"backend tolerance {evaluator.tolerance} >= {ZERO_THRESHOLD}: equality test unsound")
        self.ev = evaluator
        self.transcript = transcript if transcript is not None else Transcript()
        self.known_classes = known_classes
        self.seed = seed
        self.unique = []
        self.placeholder_map = None
        self.assignment = {}

    def _ask_zero(self, holder, diffs):
        self.transcript.log(DECRYPT_REQUEST, SERVER, holder.client_id, {"ciphertexts": diffs})
        flags = holder.zero_flags(diffs)
        self.transcript.log(DECRYPT_REPLY, holder.client_id, SERVER, {"is_zero": flags})
        return flags

    def collect_records(self, holders) -> list:
        records = []
        for h in holders:
            rec = h.make_record()
            self.transcript.log(LABEL_RECORD, h.client_id, SERVER,
                                {"ciphertexts": [ct for pair in rec.pairs for ct in pair]})
            records.append(rec)
        return records

    def discover_unique_labels(self, records, holders) -> list:
        """Initialized from the first record; later labels appended iff no difference decrypts to 0."""
        if not records:
            raise ConfigurationError("need at least one masked label record")
        by_id = {h.client_id: h for h in holders}
        self.unique = [lab for lab, _ in records[0].pairs]
        for rec in records[1:]:
            if self.known_classes is not None and len(self.unique) >= self.known_classes:
                break
            for enc_label, _ in rec.pairs:
                diffs = [self.ev.subtract(enc_label, u) for u in self.unique]
                if not any(self._ask_zero(by_id[rec.client], diffs)):
                    self.unique.append(enc_label)
        rng = np.random.default_rng([self.seed, 10])
        self.placeholder_map = PlaceholderMap(list(zip(self.unique, new_placeholders(len(self.unique), rng))))
        return self.unique

    def map_client_labels(self, record, holder) -> list:
        """Placeholder per pair of ``record``; the plaintext map stays with ``holder``."""
        if self.placeholder_map is None:
            raise ProtocolIntegrityError("unique labels not discovered yet")
        assigned = []
        for enc_label, _ in record.pairs:
            diffs = [self.ev.subtract(enc_label, u) for u, _ in self.placeholder_map.entries]
            flags = self._ask_zero(holder, diffs)
            hits = [i for i, f in enumerate(flags) if f]
            if len(hits) != 1:
                raise ProtocolIntegrityError(
                    f"client {record.client} label matched {len(hits)} unique entries")
            assigned.append(self.placeholder_map.entries[hits[0]][1])
        self.transcript.log(PLACEHOLDER_ASSIGN, SERVER, holder.client_id, {"placeholders": assigned})
        holder.accept_placeholders(assigned)
        self.assignment[record.client] = assigned
        return assigned

    def aggregate_global_counts(self, records, decryptor) -> GlobalCounts:
        """Homomorphic per-placeholder sums, decrypted only as totals."""
        if not self.assignment:
            raise ProtocolIntegrityError("client labels not mapped yet")
        sums, holders = {}, {}
        for rec in sorted(records, key=lambda r: r.client):
            for (_, enc_count), p in zip(rec.pairs, self.assignment[rec.client]):
                sums[p] = enc_count if p not in sums else self.ev.add(sums[p], enc_count)
                holders.setdefault(p, []).append(rec.client)
        order = [p for p in self.placeholder_map.placeholders if p in sums]
        cts = [sums[p] for p in order]
        self.transcript.log(DECRYPT_REQUEST, SERVER, decryptor.client_id, {"ciphertexts": cts})
        totals = decryptor.decrypt_totals(cts)
        self.transcript.log(DECRYPT_REPLY, decryptor.client_id, SERVER, {"totals": totals})
        counts = {}
        for p, t in zip(order, totals):
            n = int(round(t))
            if abs(t - n) > self.ev.tolerance + 1e-9:
                raise BackendPrecisionError(f"total for {p} off integer by {abs(t - n):.3g}")
            counts[p] = n
        return GlobalCounts(counts, holders)

    def run(self, holders) -> ProtocolResult:
        holders = sorted(holders, key=lambda h: h.client_id)
        records = self.collect_records(holders)
        self.discover_unique_labels(records, holders)
        for rec, h in zip(records, holders):
            self.map_client_labels(rec, h)
        totals = self.aggregate_global_counts(records, holders[0])
        holdings = {cid: list(ps) for cid, ps in self.assignment.items()}
        return ProtocolResult(self.placeholder_map, holdings, totals,
                              {h.client_id: dict(h.placeholder_map) for h in holders})

    def snapshot(self) -> dict:
        """Everything the server holds after the protocol (for leak scans)."""
        return {"unique": list(self.unique),
                "placeholders": [] if self.placeholder_map is None else self.placeholder_map.placeholders,
                "assignment": {str(k): list(v) for k, v in self.assignment.items()}}


def disclose_counts(holders, transcript) -> dict:
    """Per-placeholder counts reported by each client (weighted selection only)."""
    out = {}
    for h in sorted(holders, key=lambda h: h.client_id):
        counts = h.placeholder_counts()
        transcript.log(COUNT_REPORT, h.client_id, SERVER, {"counts": counts})
        out[h.client_id] = counts
    return out


def discover_unique_labels(records, backend, holders, known_classes=None, transcript=None):
    proto = MaskedLabelProtocol(backend.evaluator(), transcript, known_classes)
    return proto.discover_unique_labels(records, holders)


def find_values(obj, values, exempt_keys=MODEL_KEYS, path="") -> list:
    """Paths inside ``obj`` whose scalar equals one of ``values``.

    Booleans, bytes and ciphertexts are opaque; dict keys listed in
    ``exempt_keys`` are skipped.
    """
    hits = []
    values = set(values)
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k in exempt_keys:
                continue
            hits += find_values(k, values, exempt_keys, f"{path}<key>")
            hits += find_values(v, values, exempt_keys, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            hits += find_values(v, values, exempt_keys, f"{path}[{i}]")
    elif isinstance(obj, np.ndarray):
        hits += [f"{path}[array]"] if np.isin(obj, list(values)).any() else []
    elif isinstance(obj, (bool, bytes, Ciphertext)) or obj is None:
        pass
    elif isinstance(obj, (int, float, np.integer, np.floating)):
        if obj in values:
            hits.append(path)
    elif isinstance(obj, str):
        if obj in {str(v) for v in values}:
            hits.append(path)
    return hits


NON_LABEL_KEYS = MODEL_KEYS + ("stats", "totals", "counts", "next_hop")


def scan_server_visible(transcript, values, exempt_keys=NON_LABEL_KEYS) -> list:
    """Leaks of ``values`` in payloads the server sends or receives.

    Fields that by construction hold tensors, count magnitudes or routing
    addresses rather than labels are skipped.
    """
    hits = []
    for m in transcript:
        if m.src == SERVER or m.dst == SERVER:
            hits += [f"#{m.timestamp} {m.kind}{h}" for h in find_values(m.payload, values, exempt_keys)]
    return hits
