"""Config and trace ingestion, report emission and the ablation ladder."""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from collections import Counter
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import allocator, extrapolation, perfmodel, simulator, speculation
from .errors import ConfigurationError, InvalidArgument, ParseError, SchemaError
from .perfmodel import HardwareProfile, Modes, WorkloadProfile


# -- files ------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ParseError(f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_json(text: str):
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None


def read_json(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from None
    return parse_json(text)


# -- strict schema helpers --------------------------------------------------

_NUMBER = (int, float)


def _check_type(value, kind, path):
    if kind == "number":
        ok = isinstance(value, _NUMBER) and not isinstance(value, bool)
    elif kind == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == "str":
        ok = isinstance(value, str)
    elif kind == "dict":
        ok = isinstance(value, dict)
    elif kind == "list":
        ok = isinstance(value, list)
    elif kind == "bool":
        ok = isinstance(value, bool)
    else:
        ok = True
    if not ok:
        raise SchemaError(f"expected {kind}, got {type(value).__name__}", path)


def _section(data, path, required, optional=None):
    """Validate a JSON object against ``{field: kind}`` maps; unknown keys are errors."""
    optional = optional or {}
    if not isinstance(data, dict):
        raise SchemaError("expected an object", path)
    unknown = sorted(set(data) - set(required) - set(optional))
    if unknown:
        raise SchemaError(f"unknown field {unknown[0]!r}", f"{path}.{unknown[0]}" if path else unknown[0])
    for name, kind in required.items():
        sub = f"{path}.{name}" if path else name
        if name not in data:
            raise SchemaError("missing required field", sub)
        _check_type(data[name], kind, sub)
    for name, kind in optional.items():
        if name in data and data[name] is not None:
            _check_type(data[name], kind, f"{path}.{name}" if path else name)
    return data


HARDWARE_FIELDS = {"pi_peak": "number", "bw_hbm": "number", "b_link": "number", "s_sram": "number",
                   "eta_util": "number", "eta_eff": "number"}
WORKLOAD_REQUIRED = {"h_heads": "int"}
WORKLOAD_OPTIONAL = {"w_dit": "number", "d_attn": "number", "m_vae": "number", "alpha_ms": "number",
                     "beta_ms": "number", "profiled_dit": "dict", "t_vae_single_ms": "number"}


def hardware_from_dict(data, path="hardware") -> HardwareProfile:
    _section(data, path, HARDWARE_FIELDS)
    try:
        return HardwareProfile(**data)
    except InvalidArgument as exc:
        raise SchemaError(str(exc), path) from None


def workload_from_dict(data, path="workload") -> WorkloadProfile:
    _section(data, path, WORKLOAD_REQUIRED, WORKLOAD_OPTIONAL)
    for key, value in (data.get("profiled_dit") or {}).items():
        if not key.isdigit() or isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise SchemaError("profiled_dit maps device counts to milliseconds", f"{path}.profiled_dit.{key}")
    try:
        return WorkloadProfile(**{k: v for k, v in data.items() if v is not None})
    except InvalidArgument as exc:
        raise SchemaError(str(exc), path) from None


def hardware_to_dict(hw):
    return asdict(hw)


def workload_to_dict(wl):
    out = asdict(wl)
    out["profiled_dit"] = {str(k): v for k, v in sorted(wl.profiled_dit.items())}
    return out


def load_profile(path):
    """``{"hardware": {...}, "workload": {...}}`` -> (HardwareProfile, WorkloadProfile)."""
    data = _section(read_json(path), "", {"hardware": "dict", "workload": "dict"})
    return hardware_from_dict(data["hardware"]), workload_from_dict(data["workload"])


# -- scenario ---------------------------------------------------------------

STAGES = ("fusion", "ulysses", "ratio", "extrapolation", "speculation")


@dataclass(frozen=True)
class FusionCalibration:
    t_dit_single_ms: float
    t_vae_fused_ms: float
    t_vae_baseline_ms: Optional[float] = None


@dataclass(frozen=True)
class ExtrapolationStage:
    skip_rate: float
    tau: Optional[float] = None
    lam: float = 1.0


@dataclass(frozen=True)
class SpeculationStage:
    p_hit: float
    t_sys_ms: float
    t_overhead_ms: float = speculation.DEFAULT_T_OVERHEAD_MS


@dataclass(frozen=True)
class ScenarioConfig:
    hardware: HardwareProfile
    workload: WorkloadProfile
    baseline_latency_ms: Optional[float] = None
    stages: tuple = ()
    n_total: int = 8
    min_dit: int = allocator.DEFAULT_MIN_DIT
    mode: str = "profiled"
    heuristic_split: Optional[tuple] = None
    allocation: Optional[tuple] = None  # None -> optimise
    fusion_calibration: Optional[FusionCalibration] = None
    extrapolation: Optional[ExtrapolationStage] = None
    speculation: Optional[SpeculationStage] = None
    trace: Optional[str] = None
    outputs: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "hardware": hardware_to_dict(self.hardware),
            "workload": workload_to_dict(self.workload),
            "stages": list(self.stages),
            "n_total": self.n_total,
            "min_dit": self.min_dit,
            "mode": self.mode,
            "outputs": dict(self.outputs),
        }
        for name in ("baseline_latency_ms", "trace"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        for name in ("heuristic_split", "allocation"):
            if getattr(self, name) is not None:
                out[name] = list(getattr(self, name))
        for name in ("fusion_calibration", "extrapolation", "speculation"):
            if getattr(self, name) is not None:
                out[name] = asdict(getattr(self, name))
        return out


def _stage_section(cls, data, path):
    required = {f.name: "number" for f in fields(cls) if f.default is MISSING}
    optional = {f.name: "number" for f in fields(cls) if f.default is not MISSING}
    _section(data, path, required, optional)
    return cls(**data)


def _split(value, path):
    if value is None:
        return None
    if (not isinstance(value, list) or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value)):
        raise SchemaError("expected [n_dit, n_vae] with positive integers", path)
    return tuple(value)


def scenario_from_dict(data, base_dir=".") -> ScenarioConfig:
    _section(
        data, "",
        {"hardware": "dict", "workload": "dict"},
        {"baseline_latency_ms": "number", "stages": "list", "n_total": "int", "min_dit": "int",
         "mode": "str", "heuristic_split": "list", "allocation": "list",
         "fusion_calibration": "dict", "extrapolation": "dict", "speculation": "dict",
         "trace": "str", "outputs": "dict"},
    )
    stages = tuple(data.get("stages") or ())
    for i, s in enumerate(stages):
        if s not in STAGES:
            raise SchemaError(f"unknown stage {s!r}; expected one of {list(STAGES)}", f"stages[{i}]")
    if stages != STAGES[:len(stages)]:
        raise SchemaError(f"stages must be a prefix of the ladder {list(STAGES)}", "stages")
    cfg = ScenarioConfig(
        hardware=hardware_from_dict(data["hardware"]),
        workload=workload_from_dict(data["workload"]),
        baseline_latency_ms=data.get("baseline_latency_ms"),
        stages=stages,
        n_total=data.get("n_total", 8),
        min_dit=data.get("min_dit", allocator.DEFAULT_MIN_DIT),
        mode=data.get("mode", "profiled"),
        heuristic_split=_split(data.get("heuristic_split"), "heuristic_split"),
        allocation=_split(data.get("allocation"), "allocation"),
        fusion_calibration=(None if data.get("fusion_calibration") is None else
                            _stage_section(FusionCalibration, data["fusion_calibration"], "fusion_calibration")),
        extrapolation=(None if data.get("extrapolation") is None else
                       _stage_section(ExtrapolationStage, data["extrapolation"], "extrapolation")),
        speculation=(None if data.get("speculation") is None else
                     _stage_section(SpeculationStage, data["speculation"], "speculation")),
        trace=data.get("trace"),
        outputs=dict(data.get("outputs") or {}),
    )
    if cfg.mode not in ("profiled", "analytic"):
        raise SchemaError("expected 'profiled' or 'analytic'", "mode")
    for name, value in cfg.outputs.items():
        if not isinstance(value, str):
            raise SchemaError("output paths must be strings", f"outputs.{name}")
    if cfg.trace is not None and not os.path.exists(os.path.join(base_dir, cfg.trace)):
        raise SchemaError(f"trace file {cfg.trace!r} does not exist", "trace")
    return cfg


def load_scenario(path) -> ScenarioConfig:
    return scenario_from_dict(read_json(path), os.path.dirname(os.path.abspath(path)))


def write_scenario(cfg: ScenarioConfig, path) -> None:
    atomic_write_text(path, dump_json(cfg.to_dict()))


# -- ablation ---------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    stage: str
    label: str
    architecture: str
    metric_ms: float
    metric_kind: str  # latency | interval | effective_latency
    fps: float
    speedup: float
    sim_fps: Optional[float] = None


@dataclass
class AblationReport:
    rows: list

    @property
    def final_latency_ms(self):
        last = self.rows[-1]
        return last.metric_ms if last.metric_kind == "effective_latency" else None

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "final_effective_latency_ms": self.final_latency_ms}


def _require(cfg, needs):
    missing = []
    for path in needs:
        obj = cfg
        for part in path.split("."):
            obj = getattr(obj, part, None) if obj is not None else None
        if obj is None:
            missing.append(path)
    if missing:
        raise ConfigurationError("missing calibration constants: " + ", ".join(missing))


def _evenly_spaced_skips(n, rate):
    """Deterministic mask with ``floor((i+1)*rate)`` skips among the first ``i+1`` frames."""
    idx = np.arange(1, n + 1)
    counts = np.floor(idx * rate + 1e-12)
    return tuple(bool(x) for x in np.diff(np.concatenate([[0], counts])) > 0)


def _sim_fps(n_dit, n_vae, t_dit_ms, t_vae_ms, frames, skip_rate=0.0):
    mask = _evenly_spaced_skips(frames, skip_rate) if skip_rate > 0 else None
    cfg = simulator.SimConfig(n_dit, n_vae, t_dit_ms, t_vae_ms, horizon_frames=frames, skip_mask=mask)
    return simulator.steady_state_fps(simulator.run(cfg))


def run_ablation(cfg: ScenarioConfig, sim_frames: int = 2000) -> AblationReport:
    """Step-wise optimisation ladder; every number comes from the owning module."""
    needs = ["baseline_latency_ms"]
    stages = cfg.stages
    if "fusion" in stages:
        needs += ["fusion_calibration.t_dit_single_ms", "fusion_calibration.t_vae_fused_ms"]
    if "ulysses" in stages:
        needs += ["heuristic_split"]
    if "extrapolation" in stages:
        needs += ["extrapolation.skip_rate"]
    if "speculation" in stages:
        needs += ["speculation.p_hit", "speculation.t_sys_ms"]
    _require(cfg, needs)

    rows = []
    base_fps = 1000.0 / cfg.baseline_latency_ms
    rows.append(AblationRow("baseline", "Baseline (Sequential)", "Single Card",
                            cfg.baseline_latency_ms, "latency", base_fps, 1.0))

    def add(stage, label, arch, metric, kind, fps, sim_fps=None):
        rows.append(AblationRow(stage, label, arch, metric, kind, fps, fps / base_fps, sim_fps))

    wl, hw = cfg.workload, cfg.hardware
    modes = Modes.from_name(cfg.mode)
    if "fusion" in stages:
        fc = cfg.fusion_calibration
        seq = fc.t_dit_single_ms + fc.t_vae_fused_ms
        add("fusion", "+ Operator Fusion", "Single Card", seq, "latency", 1000.0 / seq)
        wl = replace(wl, t_vae_single_ms=fc.t_vae_fused_ms)
    if "ulysses" in stages:
        n_d, n_v = cfg.heuristic_split
        r = perfmodel.fps(wl, hw, n_d, n_v, modes)
        add("ulysses", f"+ Ulysses ({n_d}:{n_v})", f"{n_d} DiT + {n_v} VAE", r.interval_ms, "interval",
            r.fps, _sim_fps(n_d, n_v, r.t_dit_ms, r.t_vae_ms * n_v, sim_frames))
    plan = None
    if "ratio" in stages:
        if cfg.allocation is not None:
            n_d, n_v = cfg.allocation
            r = perfmodel.fps(wl, hw, n_d, n_v, modes)
            plan = allocator.AllocationPlan(n_d, n_v, r.fps, r.bottleneck, (n_d,))
        else:
            plan = allocator.optimize(hw, wl, cfg.n_total, cfg.min_dit, modes)
        t_dit = perfmodel.t_dit(wl, plan.n_dit, modes.dit)
        t_vae_single = perfmodel.t_vae(wl, hw, 1, modes.vae)
        add("ratio", f"+ Optimized Ratio ({plan.n_dit}:{plan.n_vae})", f"{plan.n_dit} DiT + {plan.n_vae} VAE",
            max(t_dit, t_vae_single / plan.n_vae), "interval", plan.predicted_fps,
            _sim_fps(plan.n_dit, plan.n_vae, t_dit, t_vae_single, sim_frames))
    if "extrapolation" in stages:
        skip = cfg.extrapolation.skip_rate
        fps = extrapolation.throughput_with_skip(t_dit, t_vae_single, plan.n_vae, skip)
        add("extrapolation", "+ Extrapolation", f"{plan.n_dit} DiT + {plan.n_vae} VAE", 1000.0 / fps,
            "interval", fps, _sim_fps(plan.n_dit, plan.n_vae, t_dit, t_vae_single, sim_frames, skip))
    if "speculation" in stages:
        sc = cfg.speculation
        lat = speculation.amortized_latency(sc.p_hit, sc.t_sys_ms, sc.t_overhead_ms)
        prev = rows[-1]
        add("speculation", f"+ Speculative ({sc.p_hit:.0%} hit)", prev.architecture, lat,
            "effective_latency", prev.fps)
    return AblationReport(rows)


# -- plot data --------------------------------------------------------------

WATERFALL_COLUMNS = ("stage", "label", "architecture", "metric_ms", "metric_kind", "fps", "speedup", "sim_fps")


def _csv(header, rows) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x, digits=6):
    return "" if x is None else f"{x:.{digits}f}"


def waterfall_csv(report: AblationReport) -> str:
    return _csv(WATERFALL_COLUMNS, [
        (r.stage, r.label, r.architecture, _fmt(r.metric_ms), r.metric_kind, _fmt(r.fps),
         _fmt(r.speedup), _fmt(r.sim_fps)) for r in report.rows
    ])


def latency_histogram(latencies_ms, decimals=3):
    counts = Counter(round(float(x), decimals) for x in latencies_ms)
    return sorted(counts.items())


def latency_hist_csv(latencies_ms) -> str:
    return _csv(("latency_ms", "count"), [(f"{v:.3f}", c) for v, c in latency_histogram(latencies_ms)])


def export_plotdata(report, kind: str, path) -> None:
    if kind == "waterfall":
        if not isinstance(report, AblationReport):
            raise InvalidArgument("waterfall export needs an ablation report")
        text = waterfall_csv(report)
    elif kind == "gantt":
        if not isinstance(report, simulator.SimReport):
            raise InvalidArgument("gantt export needs a simulation report")
        text = simulator.gantt_csv(report)
    elif kind == "latency_hist":
        if isinstance(report, speculation.SpecReport):
            text = latency_hist_csv(report.latencies_ms)
        elif isinstance(report, simulator.SimReport):
            text = latency_hist_csv([r.latency_ms for r in report.records[report.warmup:]])
        else:
            raise InvalidArgument("latency_hist export needs a speculation or simulation report")
    else:
        raise InvalidArgument(f"unknown plot kind {kind!r}")
    atomic_write_text(path, text)
