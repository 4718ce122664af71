"""Closed-form stage latency and throughput models.

The world-model (DiT) stage is compute bound and runs sequence parallel over
``n_d`` devices; the decoder (VAE) stage is memory bound and runs over ``n_v``
devices. All durations are milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FitError, InvalidArgument

MS_PER_S = 1000.0
# Bottleneck is reported as "Balanced" when the two stage times are this close.
BALANCE_TOL_MS = 1.0


@dataclass(frozen=True)
class HardwareProfile:
    pi_peak: float  # FLOP/s, FP16-equivalent
    bw_hbm: float  # bytes/s per device
    b_link: float  # bytes/s per link
    s_sram: float  # bytes
    eta_util: float = 1.0
    eta_eff: float = 1.0

    def __post_init__(self):
        for name in ("pi_peak", "bw_hbm", "b_link", "s_sram", "eta_util", "eta_eff"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidArgument(f"hardware.{name} must be a positive number, got {value!r}")
        if self.eta_util > 1 or self.eta_eff > 1:
            raise InvalidArgument("hardware utilization factors must be <= 1")


@dataclass(frozen=True)
class WorkloadProfile:
    w_dit: float = 0.0  # FLOPs per frame per denoise pass
    d_attn: float = 0.0  # bytes exchanged by the attention all-to-all
    m_vae: float = 0.0  # decoder read+write bytes per frame
    h_heads: int = 1
    alpha_ms: Optional[float] = None
    beta_ms: Optional[float] = None
    profiled_dit: dict = field(default_factory=dict)  # n_d -> ms
    t_vae_single_ms: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.h_heads, int) or self.h_heads < 1:
            raise InvalidArgument(f"workload.h_heads must be an integer >= 1, got {self.h_heads!r}")
        for name in ("w_dit", "d_attn", "m_vae"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"workload.{name} must be >= 0")
        for name in ("alpha_ms", "beta_ms", "t_vae_single_ms"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise InvalidArgument(f"workload.{name} must be >= 0")
        # JSON object keys arrive as strings.
        object.__setattr__(
            self, "profiled_dit", {int(k): float(v) for k, v in dict(self.profiled_dit).items()}
        )


class DitMode(str, Enum):
    ANALYTIC = "analytic"
    PROFILED = "profiled"


class VaeMode(str, Enum):
    ANALYTIC = "analytic"
    PROFILED_INTERVAL = "profiled_interval"


class VaeDispatch(str, Enum):
    ROUND_ROBIN = "round_robin"
    SPATIAL = "spatial"


class Bottleneck(str, Enum):
    DIT_COMPUTE = "DiT-Compute"
    DIT_COMM = "DiT-Comm"
    VAE_MEMORY = "VAE-Memory"
    BALANCED = "Balanced"


TABLE_LABELS = {
    Bottleneck.DIT_COMPUTE: "DiT (Compute)",
    Bottleneck.DIT_COMM: "DiT (Comm.)",
    Bottleneck.VAE_MEMORY: "VAE (Memory)",
    Bottleneck.BALANCED: "Balanced",
}


@dataclass(frozen=True)
class Modes:
    dit: DitMode = DitMode.PROFILED
    vae: VaeMode = VaeMode.PROFILED_INTERVAL
    dispatch: VaeDispatch = VaeDispatch.ROUND_ROBIN

    @classmethod
    def from_name(cls, name):
        """``"profiled"`` or ``"analytic"`` selects both stages at once."""
        if name == "profiled":
            return cls(DitMode.PROFILED, VaeMode.PROFILED_INTERVAL)
        if name == "analytic":
            return cls(DitMode.ANALYTIC, VaeMode.ANALYTIC)
        raise InvalidArgument(f"unknown mode {name!r}; expected 'profiled' or 'analytic'")


def _check_devices(n, name="n_d"):
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgument(f"{name} must be an integer >= 1, got {n!r}")


def t_comp(hw: HardwareProfile, wl: WorkloadProfile, n_d: int) -> float:
    _check_devices(n_d)
    return wl.w_dit / (n_d * hw.pi_peak * hw.eta_util) * MS_PER_S


def t_comm(hw: HardwareProfile, wl: WorkloadProfile, n_d: int) -> float:
    """Ring all-to-all: 2(n-1)/n of the exchanged volume crosses each link."""
    _check_devices(n_d)
    return 2.0 * (n_d - 1) / n_d * wl.d_attn / hw.b_link * MS_PER_S


def dit_terms(wl: WorkloadProfile, n_d: int) -> tuple[float, float]:
    """(compute, communication) parts of the analytic DiT step time."""
    _check_devices(n_d)
    if wl.alpha_ms is None or wl.beta_ms is None:
        raise ConfigurationError("analytic DiT mode requires workload.alpha_ms and workload.beta_ms")
    return wl.alpha_ms / n_d, wl.beta_ms * (n_d - 1) / n_d


def t_dit(wl: WorkloadProfile, n_d: int, mode=DitMode.ANALYTIC) -> float:
    mode = DitMode(mode)
    _check_devices(n_d)
    if mode is DitMode.PROFILED:
        try:
            return wl.profiled_dit[n_d]
        except KeyError:
            raise ConfigurationError(
                f"no profiled DiT time for n_d={n_d} (have {sorted(wl.profiled_dit)})"
            ) from None
    compute, comm = dit_terms(wl, n_d)
    return compute + comm


def t_vae(wl: WorkloadProfile, hw: Optional[HardwareProfile], n_v: int,
          mode=VaeMode.PROFILED_INTERVAL) -> float:
    """Per-frame output interval of the decode stage with ``n_v`` workers."""
    mode = VaeMode(mode)
    _check_devices(n_v, "n_v")
    if mode is VaeMode.PROFILED_INTERVAL:
        if wl.t_vae_single_ms is None:
            raise ConfigurationError("profiled_interval VAE mode requires workload.t_vae_single_ms")
        return wl.t_vae_single_ms / n_v
    if hw is None:
        raise ConfigurationError("analytic VAE mode requires a hardware profile")
    return wl.m_vae / (n_v * hw.bw_hbm * hw.eta_eff) * MS_PER_S


def t_vae_latency(wl, hw, n_v, mode=VaeMode.PROFILED_INTERVAL,
                  dispatch=VaeDispatch.ROUND_ROBIN) -> float:
    """Single-frame decode latency.

    Round-robin dispatch gives each frame one whole worker, so the latency is
    the single-device time; spatial splitting divides it like the interval.
    """
    interval = t_vae(wl, hw, n_v, mode)
    if VaeDispatch(dispatch) is VaeDispatch.SPATIAL:
        return interval
    return interval * n_v


@dataclass(frozen=True)
class FpsResult:
    fps: float
    bottleneck: Bottleneck
    t_dit_ms: float
    t_vae_ms: float

    @property
    def interval_ms(self):
        return max(self.t_dit_ms, self.t_vae_ms)

    @property
    def table_label(self):
        return TABLE_LABELS[self.bottleneck]


def _dit_flavor(hw, wl, n_d) -> Bottleneck:
    if wl.alpha_ms is not None and wl.beta_ms is not None:
        compute, comm = dit_terms(wl, n_d)
    elif hw is not None and (wl.w_dit > 0 or wl.d_attn > 0):
        compute, comm = t_comp(hw, wl, n_d), t_comm(hw, wl, n_d)
    else:
        return Bottleneck.DIT_COMPUTE
    return Bottleneck.DIT_COMM if comm > compute else Bottleneck.DIT_COMPUTE


def classify(hw, wl, n_d, dit_ms, vae_ms) -> Bottleneck:
    if abs(dit_ms - vae_ms) < BALANCE_TOL_MS:
        return Bottleneck.BALANCED
    if vae_ms > dit_ms:
        return Bottleneck.VAE_MEMORY
    return _dit_flavor(hw, wl, n_d)


def fps(wl: WorkloadProfile, hw: Optional[HardwareProfile], n_d: int, n_v: int,
        modes: Modes = Modes()) -> FpsResult:
    dit_ms = t_dit(wl, n_d, modes.dit)
    vae_ms = t_vae(wl, hw, n_v, modes.vae)
    slowest = max(dit_ms, vae_ms)
    if slowest <= 0:
        raise ConfigurationError("both stage times are zero; throughput is unbounded")
    return FpsResult(
        fps=MS_PER_S / slowest,
        bottleneck=classify(hw, wl, n_d, dit_ms, vae_ms),
        t_dit_ms=dit_ms,
        t_vae_ms=vae_ms,
    )


@dataclass(frozen=True)
class AlphaBetaFit:
    alpha_ms: float
    beta_ms: float
    residuals: tuple  # measured - fitted, one per sample
    samples: tuple

    def predict(self, n_d):
        return self.alpha_ms / n_d + self.beta_ms * (n_d - 1) / n_d


def fit_alpha_beta(samples) -> AlphaBetaFit:
    """Least-squares fit of ``t(n) = alpha/n + beta*(n-1)/n`` to profiled samples.

    Residuals are reported per sample rather than hidden: profiled step times
    do not have to follow the two-term model.
    """
    samples = tuple((int(n), float(t)) for n, t in samples)
    if len(samples) < 2:
        raise FitError("need at least two samples to fit alpha and beta")
    n = np.array([s[0] for s in samples], dtype=float)
    if np.any(n < 1):
        raise FitError("device counts must be >= 1")
    t = np.array([s[1] for s in samples])
    design = np.column_stack([1.0 / n, (n - 1.0) / n])
    if np.linalg.matrix_rank(design) < 2:
        raise FitError("rank-deficient fit: samples need at least two distinct device counts")
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    residuals = t - design @ coef
    return AlphaBetaFit(float(coef[0]), float(coef[1]), tuple(float(r) for r in residuals), samples)
