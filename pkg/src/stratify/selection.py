"""Label-aware client selection over per-placeholder availability pools."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, UnservablePlaceholderError
from .network import SERVER  # noqa: F401


class ClientPool:
    """Which clients can still serve each placeholder.

    ``remaining_counts`` is only present when per-client counts were disclosed
    (weighted selection). A membership-only pool cannot reveal magnitudes, so
    uniform selection structurally never sees them.
    """

    def __init__(self, avail, remaining_counts=None):
        self.avail = {p: set(cs) for p, cs in avail.items()}
        self.remaining_counts = None if remaining_counts is None else dict(remaining_counts)
        if self.remaining_counts is not None:
            self._sync_from_counts()

    @classmethod
    def from_holdings(cls, holdings) -> "ClientPool":
        """``holdings`` maps client id -> iterable of placeholders it holds."""
        avail = {}
        for client, ps in holdings.items():
            for p in ps:
                avail.setdefault(p, set()).add(client)
        return cls(avail)

    @classmethod
    def from_counts(cls, counts) -> "ClientPool":
        """``counts`` maps client id -> {placeholder: count}."""
        remaining = {(c, p): int(n) for c, per in counts.items() for p, n in per.items()}
        avail = {}
        for (c, p), n in remaining.items():
            avail.setdefault(p, set())
            if n > 0:
                avail[p].add(c)
        return cls(avail, remaining)

    def _sync_from_counts(self):
        for (c, p), n in self.remaining_counts.items():
            if n <= 0:
                self.avail.get(p, set()).discard(c)

    @property
    def has_counts(self) -> bool:
        return self.remaining_counts is not None

    @property
    def placeholders(self):
        return list(self.avail)

    def holders(self, p) -> list:
        return sorted(self.avail.get(p, ()))

    def counts_for(self, p) -> dict:
        if self.remaining_counts is None:
            raise ConfigurationError("pool carries no per-client counts (membership only)")
        return {c: self.remaining_counts.get((c, p), 0) for c in self.holders(p)}

    def consume(self, client, p, n=1) -> None:
        """Record ``n`` successful extractions (only tracked when counts are known)."""
        if self.remaining_counts is None:
            return
        key = (client, p)
        left = self.remaining_counts.get(key, 0) - n
        self.remaining_counts[key] = max(left, 0)
        if left <= 0:
            self.avail.get(p, set()).discard(client)

    def note_exhausted(self, client, placeholders) -> "ClientPool":
        for p in placeholders:
            self.avail.get(p, set()).discard(client)
            if self.remaining_counts is not None and (client, p) in self.remaining_counts:
                self.remaining_counts[(client, p)] = 0
        return self

    def copy(self) -> "ClientPool":
        return ClientPool({p: set(cs) for p, cs in self.avail.items()},
                          None if self.remaining_counts is None else dict(self.remaining_counts))

    def check_invariant(self) -> bool:
        """``client in avail[p]`` iff its remaining count for ``p`` is positive."""
        if self.remaining_counts is None:
            return True
        for (c, p), n in self.remaining_counts.items():
            if (c in self.avail.get(p, ())) != (n > 0):
                return False
        return all((c, p) in self.remaining_counts for p, cs in self.avail.items() for c in cs)


@dataclass
class SelectionPolicy:
    kind: str = "uniform"
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("uniform", "weighted"):
            raise ConfigurationError(f"unknown selection policy {self.kind!r}")
        if self.rng is None:
            self.rng = np.random.default_rng([self.seed, 2])

    def _weights(self, pool, p, candidates):
        counts = pool.counts_for(p)
        w = np.array([counts.get(c, 0) for c in candidates], dtype=float)
        if w.sum() <= 0:
            return None
        return w / w.sum()

    def choose_one(self, candidates, pool, p):
        if len(candidates) == 1:
            return candidates[0]
        if self.kind == "weighted":
            probs = self._weights(pool, p, candidates)
            return candidates[int(self.rng.choice(len(candidates), p=probs))]
        return candidates[int(self.rng.integers(len(candidates)))]

    def draw(self, candidates, pool, p, n):
        """``n`` clients for ``p``; without replacement unless ``n`` exceeds the pool."""
        probs = self._weights(pool, p, candidates) if self.kind == "weighted" else None
        replace = n > len(candidates)
        idx = self.rng.choice(len(candidates), size=n, replace=replace, p=probs)
        return [candidates[int(i)] for i in idx]


@dataclass
class TrainingTask:
    client: object
    placeholders: list
    next_hop: object = None


def _holder_sets(items, pool):
    sets = {}
    for p in items:
        if p not in sets:
            sets[p] = set(pool.holders(p))
            if not sets[p]:
                raise UnservablePlaceholderError(p)
    return sets


def select_single_sample(chunk, pool, policy) -> list:
    """Assign one client per chunk position, maximizing consecutive runs.

    Walking left to right, every client able to serve the current position
    is scored by how many following positions it can also serve without a
    gap; a maximizer is picked (ties by ``policy``) and takes the whole run.
    """
    chunk = list(chunk)
    sets = _holder_sets(chunk, pool)
    out = [None] * len(chunk)
    i = 0
    while i < len(chunk):
        candidates = sorted(sets[chunk[i]])
        lengths = {}
        for c in candidates:
            j = i + 1
            while j < len(chunk) and c in sets[chunk[j]]:
                j += 1
            lengths[c] = j - i - 1
        best = max(lengths.values())
        chosen = policy.choose_one([c for c in candidates if lengths[c] == best], pool, chunk[i])
        out[i:i + best + 1] = [chosen] * (best + 1)
        i += best + 1
    return out


def select_batch(batch, pool, policy) -> list:
    """Per distinct placeholder, draw as many clients as it occurs in ``batch``."""
    batch = list(batch)
    sets = _holder_sets(batch, pool)
    queues = {}
    for p in dict.fromkeys(batch):
        n_p = batch.count(p)
        queues[p] = policy.draw(sorted(sets[p]), pool, p, n_p)
    return [queues[p].pop(0) for p in batch]


def note_exhausted(pool, client, placeholders) -> ClientPool:
    return pool.note_exhausted(client, placeholders)


def group_runs(chunk, assignment) -> list:
    """Split a chunk into tasks of maximal consecutive same-client positions."""
    tasks = []
    for p, c in zip(chunk, assignment):
        if tasks and tasks[-1].client == c:
            tasks[-1].placeholders.append(p)
        else:
            tasks.append(TrainingTask(c, [p]))
    return tasks


def is_run_maximal(chunk, assignment, pool) -> bool:
    """No run could be extended by one position while its client serves it."""
    runs = group_runs(chunk, assignment)
    pos = 0
    for task in runs:
        end = pos + len(task.placeholders)
        if end < len(chunk) and task.client in pool.avail.get(chunk[end], ()):
            return False
        pos = end
    return True
