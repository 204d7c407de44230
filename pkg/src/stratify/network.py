"""Simulated message layer and the transcript of every delivered message."""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

SERVER = "server"

TASK_ASSIGN = "TaskAssign"
MODEL_RELAY = "ModelRelay"
NEXT_CLIENT_SIGNAL = "NextClientSignal"
TRAIN_REQUEST = "TrainRequest"
TRAIN_SIGNAL = "TrainSignal"
GRAD_RETURN = "GradReturn"
NOT_TRAIN_REPORT = "NotTrainReport"
MODEL_BROADCAST = "ModelBroadcast"
MODEL_UPLOAD = "ModelUpload"
BN_STATS = "BnStats"
LABEL_RECORD = "LabelRecord"
DECRYPT_REQUEST = "DecryptRequest"
DECRYPT_REPLY = "DecryptReply"
PLACEHOLDER_ASSIGN = "PlaceholderAssign"
COUNT_REPORT = "CountReport"

MODEL_KEYS = ("params", "grads")


def payload_nbytes(value) -> int:
    """Deterministic wire size of a payload value."""
    if value is None:
        return 0
    if hasattr(value, "nbytes") and not isinstance(value, np.ndarray):
        return int(value.nbytes)
    if hasattr(value, "grads"):
        return 8 + sum(8 * g.size for g in value.grads)
    if isinstance(value, np.ndarray):
        return 8 * value.size
    if isinstance(value, (bytes, bytearray)):
        return 4 + len(value)
    if isinstance(value, str):
        return 4 + len(value.encode("utf-8"))
    if isinstance(value, bool):
        return 1
    if isinstance(value, (int, float, np.integer, np.floating)):
        return 8
    if hasattr(value, "to_bytes") and callable(value.to_bytes):
        return len(value.to_bytes())
    if isinstance(value, dict):
        return 4 + sum(payload_nbytes(k) + payload_nbytes(v) for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return 4 + sum(payload_nbytes(v) for v in value)
    raise TypeError(f"cannot size payload value of type {type(value).__name__}")


@dataclass
class Message:
    kind: str
    src: object
    dst: object
    payload: dict = field(default_factory=dict)
    nbytes: int = 0
    timestamp: int = 0

    @property
    def carries_model(self) -> bool:
        return any(self.payload.get(k) is not None for k in MODEL_KEYS)

    def record(self) -> dict:
        return {"timestamp": self.timestamp, "kind": self.kind, "src": self.src,
                "dst": self.dst, "bytes": self.nbytes, "model": self.carries_model}


class Transcript:
    """Append-only log of messages with a logical clock."""

    def __init__(self):
        self.messages = []

    def __len__(self):
        return len(self.messages)

    def __iter__(self):
        return iter(self.messages)

    def log(self, kind, src, dst, payload=None) -> Message:
        payload = payload or {}
        # top-level field names are schema, not wire data
        size = sum(payload_nbytes(v) for v in payload.values())
        msg = Message(kind, src, dst, payload, size, len(self.messages))
        self.messages.append(msg)
        return msg

    def mark(self) -> int:
        return len(self.messages)

    def since(self, mark) -> list:
        return self.messages[mark:]

    def counts_by_kind(self, messages=None) -> Counter:
        return Counter(m.kind for m in (self.messages if messages is None else messages))

    def bytes_by_kind(self, messages=None) -> Counter:
        out = Counter()
        for m in (self.messages if messages is None else messages):
            out[m.kind] += m.nbytes
        return out

    def model_transfers(self, messages=None) -> int:
        return sum(1 for m in (self.messages if messages is None else messages) if m.carries_model)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(m.record(), sort_keys=True) + "\n" for m in self.messages)

    def export(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_ndjson())

    @staticmethod
    def read_ndjson(path) -> list:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class Network:
    """Synchronous FIFO delivery between the server and client endpoints.

    Every send is logged. Messages for clients are handed to
    ``client.on_message(msg, network)`` immediately; messages for the server
    are queued in :attr:`server_inbox` for the server loop to consume.
    """

    def __init__(self, clients=None, transcript=None):
        self.clients = dict(clients or {})
        self.transcript = transcript if transcript is not None else Transcript()
        self.server_inbox = deque()
        self._pending = deque()
        self._delivering = False

    def send(self, kind, src, dst, **payload) -> Message:
        msg = self.transcript.log(kind, src, dst, payload)
        self._pending.append(msg)
        if not self._delivering:
            self._delivering = True
            try:
                while self._pending:
                    m = self._pending.popleft()
                    if m.dst == SERVER:
                        self.server_inbox.append(m)
                    else:
                        try:
                            client = self.clients[m.dst]
                        except KeyError:
                            raise RuntimeError(f"message to unknown endpoint {m.dst!r}") from None
                        client.on_message(m, self)
            finally:
                self._delivering = False
        return msg

    def drain(self, kind=None) -> list:
        """Pop inbox messages (optionally only one kind, in arrival order)."""
        if kind is None:
            out = list(self.server_inbox)
            self.server_inbox.clear()
            return out
        keep, out = deque(), []
        for m in self.server_inbox:
            (out if m.kind == kind else keep).append(m)
        self.server_inbox = keep
        return out
