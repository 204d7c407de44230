"""Stratified label schedules over opaque placeholders.

A schedule is the shuffled multiset in which every placeholder appears as
many times as its frequency plan says. Training pops entries from the front;
entries a client could not serve are reinserted at random unconsumed
positions.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import PlanError


def new_placeholders(n, rng) -> list:
    """``n`` distinct random tokens; they carry no information about labels."""
    out, seen = [], set()
    while len(out) < n:
        token = "p" + format(int(rng.integers(0, 2**40)), "010x")
        if token not in seen:
            seen.add(token)
            out.append(token)
    return out


@dataclass
class FrequencyPlan:
    freqs: dict
    mode: str = "uniform"

    def __post_init__(self):
        if not self.freqs:
            raise PlanError("frequency plan is empty")
        for p, f in self.freqs.items():
            if int(f) != f or f <= 0:
                raise PlanError(f"frequency for {p!r} must be a positive integer, got {f}")

    @classmethod
    def uniform(cls, placeholders, f) -> "FrequencyPlan":
        return cls({p: int(f) for p in placeholders}, "uniform")

    @classmethod
    def capped_proportional(cls, counts, cap) -> "FrequencyPlan":
        if cap < 1:
            raise PlanError("cap must be >= 1")
        return cls({p: min(int(n), int(cap)) for p, n in counts.items()}, "capped_proportional")

    @classmethod
    def from_counts(cls, counts, mode="uniform", f=None, cap=None) -> "FrequencyPlan":
        """Plan from global label counts.

        ``uniform`` defaults to the smallest global count so no label is
        scheduled more often than it can be served without repetition.
        """
        if mode == "uniform":
            return cls.uniform(counts, f if f is not None else min(counts.values()))
        if mode == "capped_proportional":
            if cap is None:
                raise PlanError("capped_proportional needs a cap")
            return cls.capped_proportional(counts, cap)
        raise PlanError(f"unknown frequency mode {mode!r}")

    @property
    def total(self) -> int:
        return sum(self.freqs.values())


def label_probability(plan: FrequencyPlan, placeholder) -> float:
    """Share of the schedule taken by ``placeholder``: ``f_p / sum(f)``."""
    try:
        f = plan.freqs[placeholder]
    except KeyError:
        raise KeyError(f"placeholder {placeholder!r} not in plan") from None
    return f / plan.total


def fisher_yates(items, rng) -> list:
    """In-order Fisher-Yates: for i = n-1..1 swap i with j ~ U{0..i}."""
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        items[i], items[j] = items[j], items[i]
    return items


@dataclass
class Schedule:
    entries: list
    cursor: int = 0
    seed: int = 0
    reinserted: int = 0
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            # separate stream from the construction shuffle
            self._rng = np.random.default_rng([self.seed, 1])

    def __len__(self):
        return len(self.entries)

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.cursor

    @property
    def consumed(self) -> list:
        return self.entries[:self.cursor]

    @property
    def pending(self) -> list:
        return self.entries[self.cursor:]

    def labels(self) -> list:
        """Unique placeholders in first-appearance order."""
        return list(dict.fromkeys(self.entries))

    def pop_front(self, k) -> list:
        if k < 1:
            raise ValueError("k must be >= 1")
        out = self.entries[self.cursor:self.cursor + k]
        self.cursor += len(out)
        return out

    def reinsert_random(self, placeholders, rng=None) -> "Schedule":
        """Insert each placeholder at a uniform gap among the unconsumed entries.

        With ``r`` entries remaining there are ``r + 1`` gaps. The consumed
        prefix is never touched.
        """
        rng = self._rng if rng is None else rng
        for p in placeholders:
            pos = self.cursor + int(rng.integers(0, self.remaining + 1))
            self.entries.insert(pos, p)
            self.reinserted += 1
        return self

    def drop_pending(self, placeholder) -> int:
        """Remove every unconsumed copy of ``placeholder``; returns how many."""
        before = len(self.entries)
        self.entries = self.consumed + [e for e in self.pending if e != placeholder]
        return before - len(self.entries)

    def dumps(self) -> str:
        """Line format: a ``# cursor=<n> seed=<s>`` header then one id per line."""
        lines = [f"# cursor={self.cursor} seed={self.seed}"] + [str(e) for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text) -> "Schedule":
        lines = text.splitlines()
        cursor, seed = 0, 0
        if lines and lines[0].startswith("#"):
            fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
            cursor, seed = int(fields.get("cursor", 0)), int(fields.get("seed", 0))
            lines = lines[1:]
        entries = [ln for ln in lines if ln]
        if not 0 <= cursor <= len(entries):
            raise PlanError(f"cursor {cursor} outside schedule of length {len(entries)}")
        return cls(entries, cursor, seed)


def build_sls(plan: FrequencyPlan, seed=0) -> Schedule:
    """Repeat each placeholder ``f_p`` times and Fisher-Yates shuffle with ``seed``."""
    items = [p for p, f in plan.freqs.items() for _ in range(int(f))]
    rng = np.random.default_rng([seed, 0])
    return Schedule(fisher_yates(items, rng), 0, seed)


def pop_front(schedule: Schedule, k) -> list:
    return schedule.pop_front(k)


def reinsert_random(schedule: Schedule, placeholders, seed=None) -> Schedule:
    rng = None if seed is None else np.random.default_rng(seed)
    return schedule.reinsert_random(placeholders, rng)


def multiset(items) -> Counter:
    return Counter(items)
