import csv
import json
import os
import subprocess
import sys

import pytest

from wmpipe import cli
from wmpipe.memcost import executor as exe


@pytest.fixture
def run(tmp_path, capsys):
    def _run(*argv):
        code = cli.main(["--out-dir", str(tmp_path), *argv])
        out = capsys.readouterr()
        return code, out.out, out.err
    return _run


def test_allocate_sweep(run, tmp_path, configs_dir):
    code, out, _ = run("allocate", "--profile", f"{configs_dir}/profile.json", "--sweep", "--out", "t.csv")
    assert code == 0
    payload = json.loads(out)
    assert (payload["plan"]["n_dit"], payload["plan"]["n_vae"]) == (5, 3)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [r["fps"] for r in rows] == ["15.7", "16.6", "19.4", "18.3"]
    assert [r["table_label"] for r in rows][2] == "Balanced"


def test_allocate_csv_format(run, configs_dir):
    code, out, _ = run("allocate", "--profile", f"{configs_dir}/profile.json", "--sweep", "--format", "csv")
    assert code == 0 and out.startswith("config,split,dit_ms")


def test_allocate_infeasible_exit_3(run, configs_dir):
    code, _, err = run("allocate", "--profile", f"{configs_dir}/profile.json", "--devices", "2")
    assert code == 3 and "divides" in err


def test_config_error_exit_2(run, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"hardware": {}, "workload": {"h_heads": 30}}')
    code, _, err = run("allocate", "--profile", str(bad))
    assert code == 2 and "hardware" in err
    code, _, _ = run("allocate", "--profile", str(tmp_path / "missing.json"))
    assert code == 2


def test_calibrate(run):
    code, out, _ = run("calibrate", "--samples", "2:63.8,3:60.1")
    res = json.loads(out)
    assert code == 0
    assert res["alpha_ms"] == pytest.approx(74.9) and res["beta_ms"] == pytest.approx(52.7)
    code, _, _ = run("calibrate", "--samples", "2:63.8")
    assert code == 2


def test_simulate(run, tmp_path, configs_dir):
    code, out, _ = run("simulate", "--config", f"{configs_dir}/sim_fig3.json", "--report", "r.json",
                       "--gantt", "g.csv")
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["mean_latency_ms"] == pytest.approx(147.3)
    assert (tmp_path / "g.csv").read_text().startswith("frame_id,stage,worker,start_ms,end_ms\n")


def test_simulate_skip_rate(run, tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n_dit": 5, "n_vae": 3, "t_dit_ms": 51.5, "t_vae_ms": 109.4,
                               "horizon_frames": 3000, "skip_rate": 0.35}))
    code, out, _ = run("simulate", "--config", str(cfg))
    assert code == 0 and json.loads(out)["skipped_frames"] > 900


def test_trace_speculate_extrapolate(run, tmp_path):
    assert run("gen-trace", "--alphabet", "L,R,U,D", "--length", "20000", "--out", "tr.jsonl")[0] == 0
    trace = str(tmp_path / "tr.jsonl")
    code, out, _ = run("speculate", "--trace", trace, "--t-sys", "38", "--hist", "h.csv")
    rep = json.loads(out)
    assert code == 0 and rep["hit_rate"] == pytest.approx(0.93, abs=0.01)
    assert rep["closed_form_latency_ms"] == pytest.approx(rep["mean_effective_latency_ms"])
    code, out, _ = run("extrapolate", "--trace", trace, "--errors", "e.csv")
    rep = json.loads(out)
    assert code == 0 and rep["max_error"] < 1e-6
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == 20000 and rows[0]["decision"] == "Miss"


def test_speculate_needs_latency_source(run, tmp_path):
    run("gen-trace", "--length", "10", "--out", "tr.jsonl")
    code, _, _ = run("speculate", "--trace", str(tmp_path / "tr.jsonl"))
    assert code == 2


def test_fuse_and_exec(run, tmp_path, configs_dir):
    code, out, _ = run("fuse", "--graph", f"{configs_dir}/vae_block.json", "--plan", "p.json",
                       "--report", "f.csv")
    assert code == 0
    rep = json.loads(out)
    assert rep["baseline"]["activation_transactions"] == 8 and rep["fused"]["activation_transactions"] == 2
    code, out, _ = run("fuse-exec", "--graph", f"{configs_dir}/vae_block.json",
                       "--plan", str(tmp_path / "p.json"), "--check")
    assert code == 0 and json.loads(out)["passed"]


def test_fuse_strict_infeasible(run, configs_dir):
    code, _, _ = run("fuse", "--graph", f"{configs_dir}/vae_block.json", "--sram", "64", "--strict")
    assert code == 3


def test_fuse_exec_failure_exit_4(run, configs_dir, monkeypatch):
    real = exe._TiledGroup.global_stats

    def skewed(self):
        real(self)
        self.stats = {k: (m + 0.1, v) for k, (m, v) in self.stats.items()}

    monkeypatch.setattr(exe._TiledGroup, "global_stats", skewed)
    code, out, _ = run("fuse-exec", "--graph", f"{configs_dir}/vae_block.json", "--check")
    assert code == 4 and not json.loads(out)["passed"]


def test_ablation(run, tmp_path, configs_dir):
    code, out, _ = run("ablation", "--scenario", f"{configs_dir}/scenario.json", "--check")
    assert code == 0
    assert json.loads(out)["final_effective_latency_ms"] == pytest.approx(2.76)
    assert (tmp_path / "waterfall.csv").exists() and (tmp_path / "ablation.json").exists()


def test_export(run, tmp_path, configs_dir):
    assert run("export", "--kind", "waterfall", "--scenario", f"{configs_dir}/scenario.json",
               "--out", "w.csv")[0] == 0
    assert len((tmp_path / "w.csv").read_text().splitlines()) == 7
    assert run("export", "--kind", "gantt", "--config", f"{configs_dir}/sim_fig3.json", "--out", "g.csv")[0] == 0
    assert run("export", "--kind", "gantt", "--out", "g.csv")[0] == 2


def test_module_entry_point(configs_dir):
    proc = subprocess.run([sys.executable, "-m", "wmpipe", "allocate", "--profile",
                           os.path.join(configs_dir, "profile.json")], capture_output=True, text=True)
    assert proc.returncode == 0 and '"n_dit": 5' in proc.stdout


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["allocate"])
    assert exc.value.code == 2
