"""Latent extrapolation with action-divergence gating.

While the action embedding stays within ``tau`` of the previous one the next
latent is extrapolated along the last motion vector instead of running the
world model; otherwise a full inference runs and the motion vector is
refreshed. Synthetic dynamics oracles stand in for the world model.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidArgument, InvalidState, UnknownAction


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    v: Optional[np.ndarray] = None
    t: int = 0  # frames produced so far; 0 means z is the seed latent

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 1:
            raise InvalidState("latent must be a 1-D vector")
        object.__setattr__(self, "z", z)
        if self.v is not None:
            v = np.asarray(self.v, dtype=float)
            if v.shape != z.shape:
                raise InvalidState(f"motion vector shape {v.shape} does not match latent {z.shape}")
            object.__setattr__(self, "v", v)


class DynamicsKind(str, Enum):
    CONSTANT_VELOCITY = "constant_velocity"
    LINEAR = "linear"
    SCRIPTED = "scripted"


@dataclass
class DynamicsOracle:
    """Ground-truth latent transition ``z_t = f(z_{t-1}, a_t)``.

    ``constant_velocity`` adds ``velocity`` (one vector, or a dict per action);
    ``linear`` applies ``A z + B e(a)``; ``scripted`` returns ``states[t]``.
    """

    kind: DynamicsKind
    velocity: object = None
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = DynamicsKind(self.kind)
        if self.kind is DynamicsKind.CONSTANT_VELOCITY and self.velocity is None:
            raise InvalidArgument("constant_velocity dynamics need a velocity")
        if self.kind is DynamicsKind.LINEAR and (self.A is None or self.B is None):
            raise InvalidArgument("linear dynamics need A and B")
        if self.kind is DynamicsKind.SCRIPTED and self.states is None:
            raise InvalidArgument("scripted dynamics need a state table")

    def __call__(self, z, action, t, embedding):
        if self.kind is DynamicsKind.CONSTANT_VELOCITY:
            vel = self.velocity[action] if isinstance(self.velocity, dict) else self.velocity
            return z + np.asarray(vel, dtype=float)
        if self.kind is DynamicsKind.LINEAR:
            return np.asarray(self.A) @ z + np.asarray(self.B) @ embedding.vector(action)
        return np.asarray(self.states[t], dtype=float)


class Embedding:
    """Action token -> vector lookup."""

    def __init__(self, table):
        self.table = {a: np.asarray(v, dtype=float) for a, v in dict(table).items()}
        if not self.table:
            raise InvalidArgument("embedding table is empty")
        for a, v in self.table.items():
            if not np.all(np.isfinite(v)):
                raise InvalidArgument(f"embedding for {a!r} is not finite")

    @classmethod
    def one_hot(cls, alphabet):
        alphabet = sorted(alphabet)
        eye = np.eye(len(alphabet))
        return cls({a: eye[i] for i, a in enumerate(alphabet)})

    def vector(self, action):
        try:
            return self.table[action]
        except KeyError:
            raise UnknownAction(f"action {action!r} has no embedding") from None

    def min_pairwise_distance(self):
        vecs = list(self.table.values())
        if len(vecs) < 2:
            return math.inf
        return min(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(vecs, 2))

    def auto_tau(self):
        """Half the closest pair distance: any change then exceeds tau."""
        d = self.min_pairwise_distance()
        if not math.isfinite(d):
            raise InvalidArgument("auto tau needs at least two embedded actions")
        return d / 2.0


@dataclass
class ExtrapConfig:
    embedding: Embedding
    dynamics: DynamicsOracle
    tau: Optional[float] = None  # None -> half the minimum pairwise embedding distance
    lam: float = 1.0
    update_v_on_hit: bool = False

    def __post_init__(self):
        if self.tau is None:
            self.tau = self.embedding.auto_tau()
        if self.tau < 0:
            raise InvalidArgument("tau must be >= 0")
        if not 0.0 < self.lam <= 2.0:
            raise InvalidArgument(f"lambda must be in (0, 2], got {self.lam}")

    @property
    def min_pairwise_distance(self):
        return self.embedding.min_pairwise_distance()


def action_divergence(a_t, a_prev, embedding: Embedding) -> float:
    return float(np.linalg.norm(embedding.vector(a_t) - embedding.vector(a_prev)))


HIT, MISS = "Hit", "Miss"


def step(state: LatentState, a_t, a_prev, config: ExtrapConfig):
    """One frame of the gated policy. Returns ``(new_state, decision, z_t)``."""
    emb = config.embedding
    delta = math.inf if a_prev is None else action_divergence(a_t, a_prev, emb)
    if delta < config.tau and state.v is not None:
        z = state.z + config.lam * state.v
        v = z - state.z if config.update_v_on_hit else state.v
        return LatentState(z, v, state.t + 1), HIT, z
    emb.vector(a_t)  # unknown tokens fail here even on the first frame
    z = np.asarray(config.dynamics(state.z, a_t, state.t, emb), dtype=float)
    if z.shape != state.z.shape:
        raise InvalidState(f"dynamics returned shape {z.shape}, expected {state.z.shape}")
    # The seed latent is not a generated frame, so the first inference has no motion.
    v = z - state.z if state.t > 0 else None
    return LatentState(z, v, state.t + 1), MISS, z


@dataclass
class ExtrapResult:
    trajectory: np.ndarray  # (frames, dim)
    reference: np.ndarray  # oracle run on every frame
    decisions: list
    errors: np.ndarray

    @property
    def hits(self):
        return sum(d == HIT for d in self.decisions)

    @property
    def skip_rate(self):
        return self.hits / len(self.decisions)

    @property
    def skip_mask(self):
        return tuple(d == HIT for d in self.decisions)


def run_trace(z0, actions, config: ExtrapConfig) -> ExtrapResult:
    actions = list(actions)
    if not actions:
        raise InvalidArgument("trace must not be empty")
    state = LatentState(z0)
    ref = state.z
    traj, refs, decisions = [], [], []
    prev = None
    for t, a in enumerate(actions):
        state, decision, z = step(state, a, prev, config)
        ref = np.asarray(config.dynamics(ref, a, t, config.embedding), dtype=float)
        traj.append(z)
        refs.append(ref)
        decisions.append(decision)
        prev = a
    traj, refs = np.array(traj), np.array(refs)
    return ExtrapResult(traj, refs, decisions, np.linalg.norm(traj - refs, axis=1))


def throughput_with_skip(t_dit_interval_ms, t_vae_ms, n_vae, skip_rate) -> float:
    """Frames/s when a fraction of frames bypasses the DiT but still decodes."""
    if not 0.0 <= skip_rate < 1.0:
        raise InvalidArgument(f"skip_rate must be in [0, 1), got {skip_rate}")
    if n_vae < 1:
        raise InvalidArgument("n_vae must be >= 1")
    interval = max((1.0 - skip_rate) * t_dit_interval_ms, t_vae_ms / n_vae)
    return 1000.0 / interval


def random_velocity_oracle(alphabet, dim, seed=0, scale=1.0) -> DynamicsOracle:
    rng = np.random.default_rng(seed)
    return DynamicsOracle(
        DynamicsKind.CONSTANT_VELOCITY,
        velocity={a: scale * rng.standard_normal(dim) for a in sorted(alphabet)},
    )


def random_linear_oracle(alphabet, dim, seed=0, radius=0.999, rotation=0.002) -> DynamicsOracle:
    """Random smooth linear dynamics: a small rotation scaled by ``radius``.

    ``A`` stays close to the identity, as consecutive latents of a smooth video
    do. Over a run of ``m`` hits the deviation from the action's fixed point
    grows by ``A (I + m (A - I))``, so a generic stable ``A`` (or a fast
    rotation) makes extrapolated runs diverge.
    """
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    k = (m - m.T) / 2
    k *= rotation / max(np.linalg.norm(k, 2), 1e-12)
    eye = np.eye(dim)
    A = radius * np.linalg.solve(eye - k, eye + k)  # Cayley transform: orthogonal
    B = rng.standard_normal((dim, len(set(alphabet))))
    return DynamicsOracle(DynamicsKind.LINEAR, A=A, B=B)
