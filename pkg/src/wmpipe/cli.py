"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 infeasible, 4 failed check.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import allocator, extrapolation, perfmodel, simulator, speculation
from . import io as wio
from . import trace as wtrace
from .errors import ConfigurationError, EquivalenceFailure, WmPipeError
from .memcost import (
    FusionPlan, OpGraph, baseline_cost, check_equivalence, fused_cost, group_report, plan_fusion,
    plan_horizontal_fusion,
)
from .memcost.planner import horizontal_sets

EXIT_CHECK_FAILED = 4


class CheckFailed(WmPipeError):
    exit_code = EXIT_CHECK_FAILED


def _out(args, path):
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(args.out_dir, path)


def _emit(args, payload, csv_text=None):
    if args.format == "csv" and csv_text is not None:
        sys.stdout.write(csv_text)
    else:
        sys.stdout.write(wio.dump_json(payload))


def _csv_text(header, rows):
    return wio._csv(header, rows)


# -- allocate / calibrate ---------------------------------------------------

def cmd_allocate(args):
    hw, wl = wio.load_profile(args.profile)
    modes = perfmodel.Modes.from_name(args.mode)
    rows = allocator.sweep(hw, wl, args.devices, args.min_dit, modes)
    plan = allocator.optimize(hw, wl, args.devices, args.min_dit, modes)
    table = allocator.sweep_csv(rows)
    if args.out:
        wio.atomic_write_text(_out(args, args.out), table)
    payload = {
        "plan": {
            "n_dit": plan.n_dit,
            "n_vae": plan.n_vae,
            "predicted_fps": plan.predicted_fps,
            "bottleneck": plan.bottleneck.value,
            "feasible_set": list(plan.feasible_set),
        },
    }
    if args.sweep:
        payload["sweep"] = [r.as_csv_row() for r in rows]
    if args.report:
        wio.atomic_write_text(_out(args, args.report), wio.dump_json(payload))
    _emit(args, payload, table if args.sweep else None)


def _parse_samples(args):
    samples = []
    if args.samples:
        for item in args.samples.split(","):
            n, _, t = item.partition(":")
            samples.append((int(n), float(t)))
    if args.samples_file:
        data = wio.read_json(args.samples_file)
        if isinstance(data, dict):
            samples.extend((int(k), float(v)) for k, v in data.items())
        else:
            samples.extend((int(n), float(t)) for n, t in data)
    if not samples:
        raise ConfigurationError("no samples given (use --samples or --samples-file)")
    return samples


def cmd_calibrate(args):
    fit = perfmodel.fit_alpha_beta(_parse_samples(args))
    payload = {
        "alpha_ms": fit.alpha_ms,
        "beta_ms": fit.beta_ms,
        "samples": [
            {"n_d": n, "measured_ms": t, "fitted_ms": fit.predict(n), "residual_ms": r}
            for (n, t), r in zip(fit.samples, fit.residuals)
        ],
    }
    if args.report:
        wio.atomic_write_text(_out(args, args.report), wio.dump_json(payload))
    _emit(args, payload, _csv_text(
        ("n_d", "measured_ms", "fitted_ms", "residual_ms"),
        [(s["n_d"], s["measured_ms"], f"{s['fitted_ms']:.6f}", f"{s['residual_ms']:.6f}")
         for s in payload["samples"]],
    ))


# -- simulate / speculate / extrapolate ---------------------------------------

SIM_REQUIRED = {"n_dit": "int", "n_vae": "int", "t_dit_ms": "number", "t_vae_ms": "number"}
SIM_OPTIONAL = {"vae_mode": "str", "transfer_overhead_ms": "number", "horizon_frames": "int",
                "horizon_ms": "number", "input_mode": "str", "t_extrap_ms": "number",
                "warmup_frames": "int", "skip_rate": "number"}


def load_sim_config(path, trace=None, seed=0) -> simulator.SimConfig:
    data = wio._section(wio.read_json(path), "", SIM_REQUIRED, SIM_OPTIONAL)
    data = {k: v for k, v in data.items() if v is not None}
    skip_rate = data.pop("skip_rate", None)
    cfg = simulator.SimConfig(input_trace=trace, **data)
    if skip_rate:
        n = cfg.frame_limit()
        if n is None:
            raise ConfigurationError("skip_rate needs a frame horizon or a trace")
        mask = np.random.default_rng(seed).random(n) < skip_rate
        cfg.skip_mask = tuple(bool(x) for x in mask)
    return cfg


def _run_sim(args):
    trace = wtrace.ActionTrace.load(args.trace) if args.trace else None
    return simulator.run(load_sim_config(args.config, trace, args.seed))


def cmd_simulate(args):
    report = _run_sim(args)
    payload = report.summary()
    if args.report:
        wio.atomic_write_text(_out(args, args.report), wio.dump_json(payload))
    if args.gantt:
        simulator.gantt_export(report, _out(args, args.gantt))
    _emit(args, payload)


def _run_spec(args):
    trace = wtrace.ActionTrace.load(args.trace)
    spec = speculation.SpecConfig.parse(args.predictor, t_overhead_ms=args.t_overhead, seed=args.seed)
    sim_cfg = None
    if args.t_sys is None:
        if not args.sim_config:
            raise ConfigurationError("give --t-sys or --sim-config")
        sim_cfg = load_sim_config(args.sim_config, None, args.seed)
    return speculation.speculative_run(sim_cfg, spec, trace, args.t_sys, args.frames)


def cmd_speculate(args):
    report = _run_spec(args)
    payload = report.summary()
    payload["closed_form_latency_ms"] = (
        speculation.amortized_latency(report.hit_rate, args.t_sys, args.t_overhead)
        if args.t_sys is not None else None
    )
    if args.report:
        wio.atomic_write_text(_out(args, args.report), wio.dump_json(payload))
    if args.hist:
        wio.export_plotdata(report, "latency_hist", _out(args, args.hist))
    _emit(args, payload)


def cmd_extrapolate(args):
    trace = wtrace.ActionTrace.load(args.trace)
    alphabet = trace.alphabet
    embedding = extrapolation.Embedding.one_hot(alphabet)
    if args.dynamics == "constvel":
        oracle = extrapolation.random_velocity_oracle(alphabet, args.dim, args.seed)
    else:
        oracle = extrapolation.random_linear_oracle(alphabet, args.dim, args.seed)
    tau = None if args.tau == "auto" else float(args.tau)
    cfg = extrapolation.ExtrapConfig(embedding, oracle, tau, args.lam, args.update_v_on_hit)
    z0 = np.random.default_rng(args.seed).standard_normal(args.dim)
    result = extrapolation.run_trace(z0, trace.actions, cfg)
    payload = {
        "frames": len(result.decisions),
        "hits": result.hits,
        "skip_rate": result.skip_rate,
        "tau": cfg.tau,
        "lambda": cfg.lam,
        "min_pairwise_embedding_distance": cfg.min_pairwise_distance,
        "max_error": float(result.errors.max()),
        "mean_error": float(result.errors.mean()),
        "max_relative_error": float(result.errors.max() / max(abs(result.reference).max(), 1e-300)),
    }
    if args.report:
        wio.atomic_write_text(_out(args, args.report), wio.dump_json(payload))
    if args.errors:
        wio.atomic_write_text(_out(args, args.errors), _csv_text(
            ("frame", "action", "decision", "error"),
            [(i, a, d, f"{e:.12g}") for i, (a, d, e) in
             enumerate(zip(trace.actions, result.decisions, result.errors))],
        ))
    _emit(args, payload)


# -- fuse -------------------------------------------------------------------

def cmd_fuse(args):
    graph = OpGraph.load(args.graph)
    plan = plan_fusion(graph, args.sram)
    base, fused = baseline_cost(graph), fused_cost(graph, plan)
    rows = group_report(graph, plan)
    payload = {
        "baseline": base.to_dict(),
        "fused": fused.to_dict(),
        "activation_transaction_reduction": 1.0 - fused.activation_transactions / base.activation_transactions,
        "byte_reduction": 1.0 - fused.total_bytes / base.total_bytes,
        "groups": len(plan.groups),
        "notes": plan.notes,
        "horizontal": [plan_horizontal_fusion(graph, ids).to_dict() for ids in horizontal_sets(graph)],
    }
    if args.plan:
        wio.atomic_write_text(_out(args, args.plan), wio.dump_json(plan.to_dict()))
    header = tuple(rows[0]) if rows else ()
    table = _csv_text(header, [tuple(r.values()) for r in rows])
    if args.report:
        wio.atomic_write_text(_out(args, args.report), table)
    _emit(args, payload, table)
    if any(n.startswith("infeasible") for n in plan.notes) and args.strict:
        return 3
    return 0


def cmd_fuse_exec(args):
    graph = OpGraph.load(args.graph)
    if args.plan:
        plan = FusionPlan.from_dict(wio.read_json(args.plan))
    else:
        plan = plan_fusion(graph, args.sram)
    try:
        err = check_equivalence(graph, plan, seed=args.seed, rtol=args.rtol if args.check else float("inf"))
        payload = {"max_relative_error": err, "rtol": args.rtol, "passed": err <= args.rtol}
    except EquivalenceFailure as exc:
        payload = {"max_relative_error": exc.worst_error, "rtol": args.rtol, "passed": False,
                   "worst_element": list(exc.worst_index) if exc.worst_index else None}
    _emit(args, payload)
    if args.check and not payload["passed"]:
        return EXIT_CHECK_FAILED
    return 0


# -- ablation / traces / export -----------------------------------------------

def cmd_ablation(args):
    cfg = wio.load_scenario(args.scenario)
    report = wio.run_ablation(cfg, args.sim_frames)
    payload = report.to_dict()
    report_path = args.report or cfg.outputs.get("report")
    waterfall_path = args.waterfall or cfg.outputs.get("waterfall")
    if report_path:
        wio.atomic_write_text(_out(args, report_path), wio.dump_json(payload))
    if waterfall_path:
        wio.export_plotdata(report, "waterfall", _out(args, waterfall_path))
    _emit(args, payload, wio.waterfall_csv(report))
    if args.check:
        base = report.rows[0].fps
        bad = [r.stage for r in report.rows if abs(r.speedup - r.fps / base) > 1e-12]
        # Skipping makes DiT output bursty, so round-robin decode loses a few
        # percent against the average-rate model; only unskipped stages must agree.
        bad += [r.stage for r in report.rows
                if r.stage in ("ulysses", "ratio") and abs(r.sim_fps - r.fps) > 0.01 * r.fps]
        if bad:
            print(f"ablation check failed for stages: {', '.join(bad)}", file=sys.stderr)
            return EXIT_CHECK_FAILED
    return 0


def cmd_gen_trace(args):
    script = args.script.split(",") if args.script else None
    tr = wtrace.generate(args.alphabet.split(","), args.length, args.model, args.q, args.seed,
                         args.interval_ms, script)
    wio.atomic_write_text(_out(args, args.out), tr.to_jsonl())
    switches = sum(a != b for a, b in zip(tr.actions, tr.actions[1:]))
    _emit(args, {"frames": len(tr), "switch_rate": switches / max(1, len(tr) - 1), "path": args.out})


def cmd_export(args):
    if args.kind == "waterfall":
        report = wio.run_ablation(wio.load_scenario(args.scenario), args.sim_frames)
    elif args.kind == "gantt":
        report = _run_sim(args)
    else:
        if args.config:
            report = _run_sim(args)
        else:
            report = _run_spec(args)
    wio.export_plotdata(report, args.kind, _out(args, args.out))
    _emit(args, {"kind": args.kind, "path": args.out})


# -- parser -----------------------------------------------------------------

def build_parser():
    def global_flags(parser, top):
        # Subcommands accept the flags too; SUPPRESS keeps them from resetting the top-level values.
        d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
        parser.add_argument("--seed", type=int, default=d(0))
        parser.add_argument("--out-dir", default=d("."))
        parser.add_argument("--format", choices=("json", "csv"), default=d("json"))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, top=False)

    p = argparse.ArgumentParser(prog="wmpipe", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    global_flags(p, top=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("allocate", cmd_allocate, "choose the DiT/VAE device split")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--devices", type=int, default=8)
    sp.add_argument("--min-dit", type=int, default=allocator.DEFAULT_MIN_DIT)
    sp.add_argument("--mode", choices=("profiled", "analytic"), default="profiled")
    sp.add_argument("--sweep", action="store_true", help="include every feasible split")
    sp.add_argument("--out", help="CSV table of all feasible splits")
    sp.add_argument("--report", help="JSON plan")

    sp = add("calibrate", cmd_calibrate, "fit alpha/beta to profiled DiT step times")
    sp.add_argument("--samples", help="comma list of n_d:ms, e.g. 2:63.8,3:60.1")
    sp.add_argument("--samples-file", help="JSON object {n_d: ms} or list of [n_d, ms]")
    sp.add_argument("--report")

    def sim_args(sp, required=True):
        sp.add_argument("--config", required=required, help="simulator JSON config")
        sp.add_argument("--trace", help="JSONL action trace")

    sp = add("simulate", cmd_simulate, "discrete-event pipeline simulation")
    sim_args(sp)
    sp.add_argument("--report")
    sp.add_argument("--gantt")

    def spec_args(sp, required=True):
        sp.add_argument("--trace", required=required)
        sp.add_argument("--predictor", default="markov:1")
        sp.add_argument("--t-sys", type=float, default=None)
        sp.add_argument("--t-overhead", type=float, default=speculation.DEFAULT_T_OVERHEAD_MS)
        sp.add_argument("--frames", type=int, default=None)
        sp.add_argument("--sim-config", default=None)

    sp = add("speculate", cmd_speculate, "speculative prefetch latency")
    spec_args(sp)
    sp.add_argument("--report")
    sp.add_argument("--hist", help="latency histogram CSV")

    sp = add("extrapolate", cmd_extrapolate, "gated latent extrapolation on synthetic dynamics")
    sp.add_argument("--dynamics", choices=("constvel", "linear"), default="constvel")
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--tau", default="auto")
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--update-v-on-hit", action="store_true")
    sp.add_argument("--report")
    sp.add_argument("--errors", help="per-frame error/decision CSV")

    sp = add("fuse", cmd_fuse, "plan operator fusion and report memory traffic")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--sram", type=int, default=2 * 1024 * 1024)
    sp.add_argument("--plan")
    sp.add_argument("--report")
    sp.add_argument("--strict", action="store_true", help="exit 3 if any node cannot be tiled")

    sp = add("fuse-exec", cmd_fuse_exec, "run fused vs unfused reference execution")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--plan")
    sp.add_argument("--sram", type=int, default=2 * 1024 * 1024)
    sp.add_argument("--rtol", type=float, default=1e-5)
    sp.add_argument("--check", action="store_true")

    sp = add("ablation", cmd_ablation, "step-wise optimisation waterfall")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--report")
    sp.add_argument("--waterfall")
    sp.add_argument("--sim-frames", type=int, default=2000)
    sp.add_argument("--check", action="store_true")

    sp = add("gen-trace", cmd_gen_trace, "generate a synthetic action trace")
    sp.add_argument("--alphabet", default="L,R")
    sp.add_argument("--length", type=int, required=True)
    sp.add_argument("--model", choices=("persistence", "uniform", "scripted"), default="persistence")
    sp.add_argument("--q", type=float, default=0.07)
    sp.add_argument("--interval-ms", type=float, default=38.0)
    sp.add_argument("--script", help="comma list of actions for the scripted model")
    sp.add_argument("--out", required=True)

    sp = add("export", cmd_export, "write plot data (waterfall, gantt, latency_hist)")
    sp.add_argument("--kind", choices=("waterfall", "gantt", "latency_hist"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenario")
    sp.add_argument("--sim-frames", type=int, default=2000)
    sim_args(sp, required=False)
    sp.add_argument("--predictor", default="markov:1")
    sp.add_argument("--t-sys", type=float, default=None)
    sp.add_argument("--t-overhead", type=float, default=speculation.DEFAULT_T_OVERHEAD_MS)
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--sim-config", default=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            if args.kind == "waterfall" and not args.scenario:
                raise ConfigurationError("waterfall export needs --scenario")
            if args.kind == "gantt" and not args.config:
                raise ConfigurationError("gantt export needs --config")
            if args.kind == "latency_hist" and not (args.config or args.trace):
                raise ConfigurationError("latency_hist export needs --config or --trace")
        return args.func(args) or 0
    except WmPipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
