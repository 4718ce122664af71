"""Speculative action prefetching.

A predictor guesses the next action; the frame for the guess is generated
ahead of time. A hit is shown after ``t_overhead_ms``; a miss flushes the
speculative frame and pays the full pipeline latency on top.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import simulator
from .errors import InsufficientData, InvalidArgument
from .trace import ActionTrace

__all__ = [
    "ActionTrace", "PredictorKind", "SpecConfig", "MarkovPredictor", "predict",
    "amortized_latency", "hit_rate", "hit_flags", "speculative_run", "SpecReport",
]

DEFAULT_T_OVERHEAD_MS = 0.1


class PredictorKind(str, Enum):
    MARKOV = "markov_k"
    BERNOULLI = "scripted_bernoulli"
    ORACLE = "oracle"
    ANTI_ORACLE = "anti_oracle"


@dataclass(frozen=True)
class SpecConfig:
    predictor: PredictorKind = PredictorKind.MARKOV
    k: int = 1
    p: float = 0.93
    t_overhead_ms: float = DEFAULT_T_OVERHEAD_MS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predictor", PredictorKind(self.predictor))
        if self.t_overhead_ms < 0:
            raise InvalidArgument("t_overhead_ms must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgument(f"hit probability must be in [0, 1], got {self.p}")
        if self.k < 1:
            raise InvalidArgument("Markov order k must be >= 1")

    @classmethod
    def parse(cls, text, **kwargs):
        """Build from a CLI token: ``markov:K``, ``bernoulli:P``, ``oracle``, ``anti-oracle``."""
        name, _, arg = text.partition(":")
        name = name.strip().lower().replace("-", "_")
        if name in ("markov", "markov_k"):
            return cls(PredictorKind.MARKOV, k=int(arg or 1), **kwargs)
        if name in ("bernoulli", "scripted_bernoulli"):
            return cls(PredictorKind.BERNOULLI, p=float(arg or 0.93), **kwargs)
        if name == "oracle":
            return cls(PredictorKind.ORACLE, **kwargs)
        if name == "anti_oracle":
            return cls(PredictorKind.ANTI_ORACLE, **kwargs)
        raise InvalidArgument(f"unknown predictor {text!r}")


class MarkovPredictor:
    """Order-k frequency predictor, updated online.

    Predicts the most frequent continuation of the last ``k`` actions seen so
    far. Unseen contexts repeat the last action; an empty history yields the
    first alphabet token. Count ties resolve to the smallest token.
    """

    def __init__(self, k=1, alphabet=()):
        if k < 1:
            raise InvalidArgument("Markov order k must be >= 1")
        self.k = k
        self.alphabet = tuple(sorted(alphabet))
        self.counts = defaultdict(Counter)
        self.history = []

    def predict(self):
        if not self.history:
            return self.alphabet[0] if self.alphabet else None
        if len(self.history) >= self.k:
            seen = self.counts.get(tuple(self.history[-self.k:]))
            if seen:
                best = max(seen.values())
                return min(tok for tok, c in seen.items() if c == best)
        return self.history[-1]

    def observe(self, action):
        if len(self.history) >= self.k:
            self.counts[tuple(self.history[-self.k:])][action] += 1
        self.history.append(action)


def predict(history, k=1, alphabet=()):
    """Stateless form of :class:`MarkovPredictor` over a full history."""
    model = MarkovPredictor(k, alphabet)
    for action in history:
        model.observe(action)
    return model.predict()


def amortized_latency(p_hit, t_sys_ms, t_overhead_ms=DEFAULT_T_OVERHEAD_MS) -> float:
    if not 0.0 <= p_hit <= 1.0:
        raise InvalidArgument(f"p_hit must be in [0, 1], got {p_hit}")
    if t_sys_ms < 0 or t_overhead_ms < 0:
        raise InvalidArgument("durations must be >= 0")
    return p_hit * t_overhead_ms + (1.0 - p_hit) * (t_sys_ms + t_overhead_ms)


def hit_flags(config: SpecConfig, actions, alphabet=None) -> np.ndarray:
    """Per-frame hit flags; frame ``i`` is predicted from ``actions[:i]``."""
    n = len(actions)
    kind = config.predictor
    if kind is PredictorKind.ORACLE:
        return np.ones(n, dtype=bool)
    if kind is PredictorKind.ANTI_ORACLE:
        return np.zeros(n, dtype=bool)
    if kind is PredictorKind.BERNOULLI:
        return np.random.default_rng(config.seed).random(n) < config.p
    model = MarkovPredictor(config.k, alphabet if alphabet is not None else set(actions))
    flags = np.empty(n, dtype=bool)
    for i, action in enumerate(actions):
        flags[i] = model.predict() == action
        model.observe(action)
    return flags


def hit_rate(config: SpecConfig, trace) -> float:
    actions = trace.actions if isinstance(trace, ActionTrace) else tuple(trace)
    if len(actions) < 2:
        raise InsufficientData("hit rate needs a trace of at least two actions")
    return float(hit_flags(config, actions)[1:].mean())


@dataclass
class SpecReport:
    sim: Optional[simulator.SimReport]
    hits: np.ndarray
    latencies_ms: np.ndarray
    t_overhead_ms: float

    @property
    def hit_rate(self):
        return float(self.hits.mean())

    @property
    def mean_latency_ms(self):
        return math.fsum(self.latencies_ms.tolist()) / len(self.latencies_ms)

    @property
    def p99_latency_ms(self):
        return float(np.percentile(self.latencies_ms, 99))

    def summary(self):
        out = {
            "frames": int(len(self.hits)),
            "hit_rate": self.hit_rate,
            "t_overhead_ms": self.t_overhead_ms,
            "mean_effective_latency_ms": self.mean_latency_ms,
            "p50_effective_latency_ms": float(np.percentile(self.latencies_ms, 50)),
            "p99_effective_latency_ms": self.p99_latency_ms,
            "max_effective_latency_ms": float(self.latencies_ms.max()),
        }
        if self.sim is not None:
            out["pipeline"] = self.sim.summary()
        return out


def speculative_run(sim_config: Optional[simulator.SimConfig], spec: SpecConfig,
                    trace: ActionTrace, t_sys_ms: Optional[float] = None,
                    frames: Optional[int] = None) -> SpecReport:
    """Effective per-frame latency under speculation.

    With ``t_sys_ms`` given, every miss costs that constant; otherwise the
    pipeline is simulated and each miss costs its frame's end-to-end latency.
    Speculative work is assumed to run in slack, so throughput is unchanged.
    """
    actions = tuple(trace.actions)
    if frames is not None:
        if not actions:
            raise InvalidArgument("cannot extend an empty trace")
        actions = tuple(actions[i % len(actions)] for i in range(frames))
    if not actions:
        raise InsufficientData("speculative run needs at least one frame")
    hits = hit_flags(spec, actions, alphabet=set(trace.actions))

    sim_report = None
    if t_sys_ms is None:
        if sim_config is None:
            raise InvalidArgument("either t_sys_ms or a simulator config is required")
        sim_trace = ActionTrace.from_actions(actions)
        cfg = replace(sim_config, input_trace=sim_trace, horizon_frames=len(actions))
        sim_report = simulator.run(cfg)
        t_sys = np.array([r.latency_ms for r in sim_report.records])
        for record, hit in zip(sim_report.records, hits):
            record.speculative_hit = bool(hit)
    else:
        if t_sys_ms < 0:
            raise InvalidArgument("t_sys_ms must be >= 0")
        t_sys = np.full(len(actions), float(t_sys_ms))
    latencies = np.where(hits, spec.t_overhead_ms, t_sys + spec.t_overhead_ms)
    return SpecReport(sim_report, hits, latencies, spec.t_overhead_ms)
