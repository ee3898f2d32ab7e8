import json
import subprocess
import sys

import pytest

from volterra_smp.harness import (ConfigError, read_result_table, resolve_config,
                                  run_experiment, write_results)

SMALL = {
    "grid": {"n_paths": 200, "n_steps": 64},
    "kernel": {"n_nodes": 12},
    "seed": 11,
}


def test_defaults_applied():
    cfg = resolve_config(None)
    assert cfg.kernel["family"] == "fractional"
    assert cfg.grid["n_steps"] == 256
    assert cfg.solver["tol"] == 1e-10
    # every default is materialized in the resolved view
    resolved = cfg.resolved()
    assert set(resolved) == {"kernel", "problem", "grid", "spike", "solver", "seed"}


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown top-level key"):
        resolve_config({"nope": 1})
    with pytest.raises(ConfigError, match="kernel.flavor"):
        resolve_config({"kernel": {"flavor": "x"}})


def test_bad_enum_named():
    with pytest.raises(ConfigError, match="kernel.family"):
        resolve_config({"kernel": {"family": "powerlaw"}})
    with pytest.raises(ConfigError, match="problem.name"):
        resolve_config({"problem": {"name": "mystery"}})


def test_override_reflected_in_resolved(tmp_path):
    cfg = resolve_config({"solver": {"tol": 1e-6}}, seed=99, n_paths=10)
    assert cfg.solver["tol"] == 1e-6
    assert cfg.seed == 99
    assert cfg.grid["n_paths"] == 10


def test_config_file_parse_error(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="parse error"):
        resolve_config(bad)


def test_csv_provenance_roundtrip(tmp_path):
    cfg = resolve_config(SMALL)
    res = run_experiment("kernels", cfg)
    paths = write_results(res, cfg, tmp_path / "out")
    csvs = [p for p in (tmp_path / "out").glob("*.csv")]
    assert csvs
    table = read_result_table(csvs[0])
    assert table.provenance["config_hash"] == cfg.hash()
    assert table.provenance["seed"] == str(cfg.seed)


def test_provenance_verification_fails_without_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="provenance"):
        read_result_table(p)


def test_run_all_deterministic_bytes(tmp_path, monkeypatch):
    cfg = resolve_config(SMALL)
    blobs = []
    for tag, workers in (("a", "1"), ("b", "4")):
        monkeypatch.setenv("VOLTERRA_SMP_THREADS", workers)
        out = tmp_path / tag
        res = run_experiment("all", cfg)
        write_results(res, cfg, out)
        blob = {p.name: p.read_bytes() for p in sorted(out.glob("*"))
                if p.name != "timings.json"}
        blobs.append(blob)
    assert blobs[0].keys() == blobs[1].keys()
    for name in blobs[0]:
        assert blobs[0][name] == blobs[1][name], f"{name} differs across worker counts"


def test_run_all_skips_inapplicable(tmp_path):
    cfg = resolve_config({**SMALL, "problem": {"name": "bilinear_lq"}})
    res = run_experiment("all", cfg)
    assert res["mp-check"].checks[0][0] == "skipped"
    assert res["adjoint"].checks[0][0] == "skipped"
    # spike widths below 4 steps are trimmed; too few remain on this grid
    assert res["rates"].checks[0][0] == "skipped"


def test_delta_config_zero_quadrature_row(tmp_path):
    cfg = resolve_config({**SMALL, "kernel": {"family": "constant", "alpha": 0.0}})
    res = run_experiment("kernels", cfg)["kernels"]
    assert res.passed
    rel = [float(r[3]) for r in res.tables["kernels"].rows]
    assert max(rel) == 0.0


def test_cli_end_to_end(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps(SMALL))
    out = tmp_path / "res"
    proc = subprocess.run(
        [sys.executable, "-m", "volterra_smp.cli", "kernels",
         "--config", str(cfg_file), "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "[PASS]" in proc.stdout
    assert (out / "summary.json").exists()
    assert (out / "resolved_config.json").exists()


def test_cli_rejects_bad_config(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"bogus": 1}))
    proc = subprocess.run(
        [sys.executable, "-m", "volterra_smp.cli", "kernels",
         "--config", str(cfg_file), "--out", str(tmp_path / "res")],
        capture_output=True, text=True)
    assert proc.returncode == 2
    assert "config error" in proc.stderr
