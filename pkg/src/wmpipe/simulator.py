"""Discrete-event model of the two-stage asynchronous pipeline.

The DiT group is a single server: sequence parallelism synchronises all of
its devices every step, so intra-step communication lives inside
``t_dit_ms``. Finished latents go to decode worker ``frame_id % n_vae``; if
that worker is still busy the DiT group holds the latent and does not start
the next frame (blocking dispatch).

Times are integer nanoseconds, which makes every run bit-reproducible.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InsufficientData, InvalidConfig
from .perfmodel import VaeDispatch
from .trace import ActionTrace

NS_PER_MS = 1_000_000


def _ns(ms):
    return int(round(ms * NS_PER_MS))


def _ms(ns):
    return ns / NS_PER_MS


class InputMode(str, Enum):
    SATURATED = "saturated"
    TIMED = "timed"


@dataclass
class SimConfig:
    n_dit: int
    n_vae: int
    t_dit_ms: float
    t_vae_ms: float
    vae_mode: VaeDispatch = VaeDispatch.ROUND_ROBIN
    transfer_overhead_ms: float = 0.0
    horizon_frames: Optional[int] = None
    horizon_ms: Optional[float] = None
    input_trace: Optional[ActionTrace] = None
    input_mode: InputMode = InputMode.SATURATED
    # Extrapolation policy: frames flagged True bypass the DiT stage.
    skip_mask: Optional[tuple] = None
    t_extrap_ms: float = 0.0
    warmup_frames: Optional[int] = None

    def __post_init__(self):
        self.vae_mode = VaeDispatch(self.vae_mode)
        self.input_mode = InputMode(self.input_mode)
        if self.n_dit < 1 or self.n_vae < 1:
            raise InvalidConfig("n_dit and n_vae must be >= 1")
        for name in ("t_dit_ms", "t_vae_ms", "transfer_overhead_ms", "t_extrap_ms"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.horizon_frames is not None and self.horizon_frames < 0:
            raise InvalidConfig("horizon_frames must be >= 0")
        if self.horizon_ms is not None and self.horizon_ms <= 0:
            raise InvalidConfig("horizon_ms must be > 0")
        if self.input_mode is InputMode.TIMED and self.input_trace is None:
            raise InvalidConfig("timed input mode needs an input trace")

    @property
    def warmup(self):
        return self.n_vae if self.warmup_frames is None else self.warmup_frames

    def frame_limit(self):
        limits = []
        if self.horizon_frames is not None:
            limits.append(self.horizon_frames)
        if self.input_trace is not None:
            limits.append(len(self.input_trace))
        if not limits:
            if self.horizon_ms is None:
                raise InvalidConfig("no input trace and no horizon given")
            return None
        return min(limits)


@dataclass(slots=True)
class FrameRecord:
    frame_id: int
    action: Optional[str]
    t_input: float
    t_dit_start: Optional[float]
    t_dit_end: Optional[float]
    t_decode_start: float
    t_decode_end: float
    t_display: float
    vae_worker: int  # -1 when a spatial split uses every worker
    skipped: bool = False
    speculative_hit: Optional[bool] = None

    @property
    def latency_ms(self):
        return self.t_display - self.t_input


@dataclass
class SimReport:
    n_vae: int
    warmup: int
    records: list
    fps: Optional[float]
    effective_interval_ms: Optional[float]
    mean_latency_ms: Optional[float]
    p50_latency_ms: Optional[float]
    p99_latency_ms: Optional[float]
    dit_utilization: float
    worker_utilization: list
    transfer_overhead_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """JSON-ready aggregate view (records excluded)."""
        return {
            "frames": len(self.records),
            "warmup_frames": self.warmup,
            "fps": self.fps,
            "effective_interval_ms": self.effective_interval_ms,
            "mean_latency_ms": self.mean_latency_ms,
            "p50_latency_ms": self.p50_latency_ms,
            "p99_latency_ms": self.p99_latency_ms,
            "dit_utilization": self.dit_utilization,
            "worker_utilization": list(self.worker_utilization),
            "skipped_frames": sum(r.skipped for r in self.records),
            **self.extra,
        }


def _skip_flags(config, n_frames):
    if config.skip_mask is None:
        return None
    mask = tuple(bool(x) for x in config.skip_mask)
    if n_frames is not None and len(mask) < n_frames:
        raise InvalidConfig(f"skip_mask covers {len(mask)} frames, need {n_frames}")
    return mask


def run(config: SimConfig) -> SimReport:
    n_frames = config.frame_limit()
    skip = _skip_flags(config, n_frames)
    trace = config.input_trace
    timed = config.input_mode is InputMode.TIMED
    n_v = config.n_vae
    spatial = config.vae_mode is VaeDispatch.SPATIAL

    t_dit = _ns(config.t_dit_ms)
    t_extrap = _ns(config.t_extrap_ms)
    t_dec = _ns(config.t_vae_ms / n_v) if spatial else _ns(config.t_vae_ms)
    t_xfer = _ns(config.transfer_overhead_ms)
    horizon_ns = None if config.horizon_ms is None else _ns(config.horizon_ms)
    arrivals = [_ns(t) for t in trace.times_ms] if (timed and trace is not None) else None

    # The DiT is one FIFO server that keeps a finished latent until its decode
    # worker frees up, so frames can be advanced in order: each start waits for
    # the previous hand-off, each hand-off waits for the worker's last decode.
    t_input, dit_start, dit_end, dec_start, dec_end, worker_of = [], [], [], [], [], []
    worker_free = [0] * n_v
    dit_busy_ns = 0
    handoff = 0  # time the DiT last released a latent
    i = 0
    while n_frames is None or i < n_frames:
        if arrivals is not None:
            if i >= len(arrivals):
                break
            arrive = arrivals[i]
            if horizon_ns is not None and arrive >= horizon_ns:
                break
            start = max(handoff, arrive)
        else:
            if horizon_ns is not None and handoff >= horizon_ns:
                break
            start = arrive = handoff
        skipped = skip is not None and i < len(skip) and skip[i]
        end = start + (t_extrap if skipped else t_dit)
        if not skipped:
            dit_busy_ns += t_dit
        if spatial:
            k = -1
            handoff = max(end, max(worker_free))
        else:
            k = i % n_v
            handoff = max(end, worker_free[k])
        done = handoff + t_xfer + t_dec
        if spatial:
            worker_free = [done] * n_v
        else:
            worker_free[k] = done
        t_input.append(arrive)
        dit_start.append(start)
        dit_end.append(end)
        dec_start.append(handoff + t_xfer)
        dec_end.append(done)
        worker_of.append(k)
        i += 1
    worker_busy_ns = [t_dec * (len(dec_end) if spatial else len(range(w, len(dec_end), n_v)))
                      for w in range(n_v)]

    actions = trace.actions if trace is not None else [None] * len(dit_start)
    flags = [skip is not None and i < len(skip) and skip[i] for i in range(len(dit_start))]
    ms = [(np.array(col, dtype=np.int64) / NS_PER_MS).tolist()
          for col in (t_input, dit_start, dit_end, dec_start, dec_end)]
    records = [
        FrameRecord(i, a, ti, None if sk else ds, None if sk else de, cs, ce, ce, w, sk)
        for i, (a, sk, ti, ds, de, cs, ce, w) in enumerate(zip(actions, flags, *ms, worker_of))
    ]
    return _report(config, records, dit_busy_ns, worker_busy_ns,
                   records[-1].t_decode_end if records else 0.0)


def _report(config, records, dit_busy_ns, worker_busy_ns, makespan_ms):
    warmup = min(config.warmup, len(records))
    steady = records[warmup:]
    fps = interval = mean = p50 = p99 = None
    if len(records) >= max(2 * config.n_vae, 2) and steady:
        origin = records[warmup - 1].t_display if warmup > 0 else records[0].t_input
        elapsed = steady[-1].t_display - origin
        if elapsed > 0:
            fps = 1000.0 * len(steady) / elapsed
            interval = elapsed / len(steady)
        lat = np.array([r.latency_ms for r in steady])
        mean = float(lat.mean())
        p50, p99 = (float(x) for x in np.percentile(lat, [50, 99]))
    span = makespan_ms if makespan_ms > 0 else 1.0
    return SimReport(
        n_vae=config.n_vae,
        warmup=warmup,
        records=records,
        fps=fps,
        effective_interval_ms=interval,
        mean_latency_ms=mean,
        p50_latency_ms=p50,
        p99_latency_ms=p99,
        dit_utilization=min(1.0, _ms(dit_busy_ns) / span),
        worker_utilization=[min(1.0, _ms(b) / span) for b in worker_busy_ns],
        transfer_overhead_ms=config.transfer_overhead_ms,
    )


def steady_state_fps(report: SimReport) -> float:
    if len(report.records) < 2 * report.n_vae or report.fps is None:
        raise InsufficientData(
            f"steady-state throughput needs >= {2 * report.n_vae} frames, got {len(report.records)}"
        )
    return report.fps


GANTT_COLUMNS = ("frame_id", "stage", "worker", "start_ms", "end_ms")


def gantt_rows(report: SimReport):
    rows = []
    for r in report.records:
        if r.skipped:
            rows.append((r.frame_id, "extrapolate", "host", r.t_input, r.t_decode_start - report.transfer_overhead_ms))
        else:
            rows.append((r.frame_id, "dit", "dit", r.t_dit_start, r.t_dit_end))
        worker = "all" if r.vae_worker < 0 else f"vae{r.vae_worker}"
        if report.transfer_overhead_ms > 0:
            rows.append((r.frame_id, "transfer", worker,
                         r.t_decode_start - report.transfer_overhead_ms, r.t_decode_start))
        rows.append((r.frame_id, "decode", worker, r.t_decode_start, r.t_decode_end))
    rows.sort(key=lambda row: (row[3], row[0]))
    return rows


def gantt_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GANTT_COLUMNS)
    for frame_id, stage, worker, start, end in gantt_rows(report):
        writer.writerow((frame_id, stage, worker, f"{start:.6f}", f"{end:.6f}"))
    return buf.getvalue()


def gantt_export(report: SimReport, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, gantt_csv(report))
