"""Timestamped action streams and the JSONL format they are stored in."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ParseError


@dataclass(frozen=True)
class ActionTrace:
    times_ms: tuple
    actions: tuple

    def __post_init__(self):
        if len(self.times_ms) != len(self.actions):
            raise InvalidArgument("times and actions must have equal length")
        if any(b < a for a, b in zip(self.times_ms, self.times_ms[1:])):
            raise InvalidArgument("trace timestamps must be non-decreasing")

    @classmethod
    def from_actions(cls, actions, interval_ms=0.0):
        actions = tuple(actions)
        return cls(tuple(i * interval_ms for i in range(len(actions))), actions)

    def __len__(self):
        return len(self.actions)

    @property
    def alphabet(self):
        return tuple(sorted(set(self.actions)))

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"t_ms": float(t), "action": a}) + "\n"
            for t, a in zip(self.times_ms, self.actions)
        )

    @classmethod
    def from_jsonl(cls, text: str):
        times, actions = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad trace record: {exc.msg}", lineno, exc.colno) from None
            if not isinstance(rec, dict) or set(rec) != {"t_ms", "action"}:
                raise ParseError("trace records need exactly the keys 't_ms' and 'action'", lineno, 1)
            times.append(float(rec["t_ms"]))
            actions.append(str(rec["action"]))
        return cls(tuple(times), tuple(actions))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


def persistence_actions(alphabet, length, q, rng):
    """Markov stream that switches to a different symbol with probability ``q``."""
    alphabet = list(alphabet)
    m = len(alphabet)
    current = int(rng.integers(m))
    switches = rng.random(length) < q
    offsets = rng.integers(1, m, size=length) if m > 1 else np.zeros(length, dtype=int)
    out = []
    for i in range(length):
        if i > 0 and switches[i] and m > 1:
            current = (current + int(offsets[i])) % m
        out.append(alphabet[current])
    return out


def generate(alphabet, length, model="persistence", q=0.07, seed=0, interval_ms=38.0,
             script=None) -> ActionTrace:
    alphabet = [str(a) for a in alphabet]
    if length < 1:
        raise InvalidArgument("trace length must be >= 1")
    if not alphabet:
        raise InvalidArgument("alphabet must not be empty")
    rng = np.random.default_rng(seed)
    if model == "persistence":
        if not 0.0 <= q <= 1.0:
            raise InvalidArgument(f"switch probability must be in [0, 1], got {q}")
        actions = persistence_actions(alphabet, length, q, rng)
    elif model == "uniform":
        actions = [alphabet[i] for i in rng.integers(len(alphabet), size=length)]
    elif model == "scripted":
        if not script:
            raise InvalidArgument("scripted traces need a non-empty script")
        actions = [str(script[i % len(script)]) for i in range(length)]
    else:
        raise InvalidArgument(f"unknown trace model {model!r}")
    return ActionTrace.from_actions(actions, interval_ms)
