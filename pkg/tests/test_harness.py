import csv
import json
from pathlib import Path

import numpy as np
import pytest

from orthobo.cli import main
from orthobo.engine import RunConfig
from orthobo.errors import MissingRuns
from orthobo.harness import (
    ExperimentSpec,
    aggregate_regret,
    apply_seed_env,
    format_percent,
    replay_run,
    report,
    report_exit_code,
    require_complete,
    run_experiment,
)

FAST = {"budget": 3, "n_init": 5, "mc_samples": 8, "raw_samples": 32, "restarts": 2, "local_budget": 12, "fit_budget": 40}

SPEC_TOML = """
replications = 2
base_seed = 3

[defaults]
budget = 3
n_init = 5
mc_samples = 8
raw_samples = 32
restarts = 2
local_budget = 12
fit_budget = 40

[defaults.ensemble]
models = ["rbf-iso"]
tau = 2.0

[[cells]]
name = "orth"
method = "orth-ei"
objective = "quadratic:2"

[cells.cv]
ridge = 1e-6
"""


def _spec(**kw):
    d = {"replications": 2, "cells": [{"name": "orth", "method": "orth-ei", "objective": "quadratic:2", **FAST}]}
    d.update(kw)
    return ExperimentSpec.from_dict(d)


def test_toml_spec_parsing(tmp_path):
    p = tmp_path / "spec.toml"
    p.write_text(SPEC_TOML)
    spec = ExperimentSpec.from_toml(p)
    assert spec.seeds() == [3, 4]
    cfg = spec.cells[0].config(4)
    assert cfg.models == ("rbf-iso",) and cfg.temperature == 2.0 and cfg.cv.ridge == 1e-6 and cfg.seed == 4


def test_spec_rejects_unknown_keys_and_duplicates():
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"cells": [{"method": "orth-ei", "objective": "levy:2", "bogus": 1}]})
    cell = {"name": "a", "method": "mc-ei", "objective": "levy:2"}
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"cells": [cell, cell]})


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("ORTHOBO_SEED", "11")
    assert apply_seed_env(_spec()).seeds() == [11, 12]


def test_run_experiment_artifacts_and_replay(tmp_path):
    manifest = run_experiment(_spec(), tmp_path)
    traces = sorted((tmp_path / "traces" / "orth").glob("*.json"))
    assert [t.name for t in traces] == ["rep000.json", "rep001.json"]
    rows = list(csv.DictReader(open(tmp_path / "aggregates" / "orth.csv")))
    assert len(rows) == FAST["budget"] + 1
    assert rows[0]["iteration"] == "0" and rows[0]["n_runs"] == "2"
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    run = on_disk["cells"][0]["runs"][1]
    assert run["status"] == "ok" and len(run["step_ms"]) == FAST["budget"]
    assert replay_run(on_disk, "orth", 1).dumps() == traces[1].read_text()


def test_failed_runs_are_recorded(tmp_path, monkeypatch):
    import orthobo.harness as harness

    def broken(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(harness, "run_bo", broken)
    manifest = run_experiment(_spec(), tmp_path)
    runs = manifest["cells"][0]["runs"]
    assert all(r["status"] == "failed" and "disk on fire" in r["error"] for r in runs)
    rep = report(manifest, tmp_path)
    assert len(rep.missing) == 2 and report_exit_code(rep) == 1
    with pytest.raises(MissingRuns):
        require_complete(rep)


def test_constant_curves_have_zero_ci():
    rows = aggregate_regret([np.full(4, 0.5)] * 16)
    assert all(r[1] == 0.5 and r[2] == 0.0 and r[3] == 16 for r in rows)


def test_ci_formula():
    curves = [np.array([float(i)]) for i in range(16)]
    _, mean, ci, n = aggregate_regret(curves)[0]
    assert mean == 7.5 and ci == pytest.approx(1.96 * np.std(np.arange(16), ddof=1) / 4)


def test_percent_formatting():
    from orthobo.diagnostics import percent_change

    assert format_percent(percent_change(2.08e-4, 2.27e-5)) == "(-89.09%)"
    assert format_percent(-89.0817) == "(-89.08%)"


def test_report_tables_and_exit_codes(tmp_path):
    manifest = run_experiment(_spec(), tmp_path)
    rep = report(manifest, tmp_path)
    assert len(rep.regret_rows) == 1 and report_exit_code(rep) == 0
    text = rep.render()
    assert "mean_final_regret" in text and "top1_agreement" in text
    empty = report({"cells": [], "probes": []})
    assert empty.empty and report_exit_code(empty) == 1
    assert "mean_final_regret" in empty.render()
    (tmp_path / manifest["cells"][0]["runs"][0]["path"]).unlink()
    partial = report(manifest, tmp_path)
    assert len(partial.regret_rows) == 1 and report_exit_code(partial) == 2


# --- command line ------------------------------------------------------------------


def test_cli_run_and_report(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text(SPEC_TOML)
    out = tmp_path / "out"
    assert main(["run", str(spec), "--out", str(out), "--mc-samples", "6", "--cv-crossfit"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["cells"][0]["runs"][0]["config"]
    assert cfg["mc_samples"] == 6 and cfg["cv"]["cross_fit"] and cfg["cv"]["ridge"] == 1e-6
    capsys.readouterr()
    assert main(["report", str(out / "manifest.json")]) == 0
    assert "orth" in capsys.readouterr().out


def test_cli_probe(tmp_path, capsys):
    out = tmp_path / "probe"
    code = main(
        ["probe", "--objective", "quadratic:2", "--kernel", "rbf-iso", "--mc-samples", "8",
         "--repeats", "3", "--probes", "6", "--n-init", "8", "--out", str(out)]
    )
    assert code == 0
    rows = list(csv.DictReader(open(out / "probe_values.csv")))
    assert len(rows) == 2 * 6 * 3 and set(rows[0]) == {"probe_id", "repeat_id", "estimator", "value"}
    report_doc = json.loads((out / "probe_report.json").read_text())
    assert report_doc["S"] == 8
    capsys.readouterr()
    assert main(["report", str(out / "manifest.json")]) == 0
    text = capsys.readouterr().out
    assert "Variance reduction" in text and "%)" in text


def test_cli_probe_tpe(tmp_path):
    out = tmp_path / "tpe"
    assert main(["probe", "--objective", "levy:2", "--kernel", "tpe", "--mc-samples", "4",
                 "--repeats", "2", "--probes", "4", "--n-init", "10", "--out", str(out)]) == 0
    est = json.loads((out / "probe_report.json").read_text())["estimators"]
    assert set(est) == {"tpe-mc", "tpe-orth"}


def test_cli_bench(capsys):
    assert main(["bench", "--objective", "quadratic:2", "--mc-samples", "8", "--history", "6"]) == 0
    assert "ratio" in capsys.readouterr().out


def test_cli_rejects_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.toml")):
        spec = ExperimentSpec.from_toml(p)
        assert spec.cells
