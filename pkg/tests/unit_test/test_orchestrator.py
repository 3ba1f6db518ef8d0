import json
import os

import numpy as np
import pandas as pd
import pytest

from src.main import main
from src.orchestrator import Orchestrator, PipelineStage, _run_single, build_manifest, build_scenario, manifest_hash
from src.processors.metrics import rho_from_dumps
from src.processors.sp_precoders import PrecodingScheme
from src.utilities.json_load import load_settings
from src.utilities.scenario_config import parse_config


SMALL = {
    "name": "tiny",
    "topology": {"cell_count": 2, "radius_m": 250.0, "antennas_per_bs": 4, "sp_count": 2, "users_per_sp": 1},
    "channel": {"csi_error_std": 0.1},
    "power": {"p_max_dbm": 39.0, "p_bar_dbm": 37.0},
    "service_providers": {"scheme": ["mrt", "zf"]},
    "algorithm": {"theta": 1e-3, "horizon": 6, "seed": 5},
    "output": {"baseline": True},
}


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"reporting": {"power_prefixes": [1, 5], "log_every": 2}}))
    return str(path)


def test_build_scenario_from_config(config_path):
    config = parse_config(SMALL)
    scenario = build_scenario(config, load_settings(config_path))
    assert scenario.topology.total_users == 4
    assert scenario.sp_config.schemes[1, 1] is PrecodingScheme.ZF
    assert scenario.sp_config.mrt_mask().tolist() == [[True, False], [True, False]]
    np.testing.assert_allclose(scenario.sp_config.powers, config.p_max_w / 2)
    assert scenario.noise_power == pytest.approx(2.39e-15, rel=0.01)
    assert scenario.weighting == "cell"
    assert scenario.log_every == 2


def test_manifest_hash_is_stable_and_seed_sensitive(config_path):
    settings = load_settings(config_path)
    config = parse_config(SMALL)
    first = manifest_hash(build_manifest(config, settings))
    assert first == manifest_hash(build_manifest(parse_config(SMALL), settings))
    assert len(first) == 12
    other = config.with_overrides({"algorithm": {"seed": 6}})
    assert manifest_hash(build_manifest(other, settings)) != first


def test_pipeline_writes_all_outputs(config_path, tmp_path):
    out_dir = tmp_path / "out"
    orchestrator = Orchestrator(config_path, parse_config(SMALL), out_dir=str(out_dir), dump_matrices=True)
    assert orchestrator.run_pipeline()
    assert orchestrator.current_stage == PipelineStage.COMPLETE

    files = orchestrator.output_files
    for path in files.values():
        assert os.path.exists(path)
        assert orchestrator.run_hash in os.path.basename(path)

    trace = pd.read_csv(files["trace"])
    assert len(trace) == 6
    series = pd.read_csv(files["series"])
    assert set(series["approach"]) == {"spatial", "fd"}
    metrics = pd.read_csv(files["metrics"])
    assert metrics.loc[0, "horizon"] == 6
    assert "rate_ratio" in metrics.columns
    assert metrics.loc[0, "bound_violations"] == 0

    with open(files["bounds"], encoding="utf-8") as f:
        assert f.readline().strip() == f"# manifest: {orchestrator.run_hash}"
    bounds = pd.read_csv(files["bounds"], sep="\t", comment="#")
    assert list(bounds.columns) == ["name", "lhs", "rhs", "slack", "status", "violations"]
    assert "FAIL" not in set(bounds["status"])

    state = _read_json(orchestrator.state_path)
    assert state["current_stage"] == "complete"

    assert rho_from_dumps(orchestrator.dump_dir) == pytest.approx(metrics.loc[0, "rho_bar"], rel=1e-9)


def test_reuse_existing_outputs(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"reuse_existing_outputs": True}))
    out_dir = str(tmp_path / "out")
    first = Orchestrator(str(config_path), parse_config(SMALL), out_dir=out_dir)
    assert first.run_pipeline()
    second = Orchestrator(str(config_path), parse_config(SMALL), out_dir=out_dir)
    assert second.run_pipeline()
    assert second.result is None


def test_fd_approach_run(config_path, tmp_path):
    config = parse_config({**SMALL, "output": {"approach": "fd"}})
    orchestrator = Orchestrator(config_path, config, out_dir=str(tmp_path))
    assert orchestrator.run_pipeline()
    trace = pd.read_csv(orchestrator.output_files["trace"])
    assert set(trace["approach"]) == {"fd-sp0", "fd-sp1"}
    assert all(name.startswith("sp") for name in orchestrator.bounds.to_frame()["name"])


def test_failure_reports_stage(config_path, tmp_path):
    config = parse_config(SMALL)
    orchestrator = Orchestrator(config_path, config, out_dir=str(tmp_path))

    def broken():
        raise RuntimeError("solver exploded")

    orchestrator._run_simulation = broken
    assert not orchestrator.run_pipeline()
    assert orchestrator.current_stage == PipelineStage.SIMULATION
    state = _read_json(orchestrator.state_path)
    assert state["current_stage"] == "simulation"


def test_cli_run_and_report(config_path, tmp_path, capsys):
    scenario = tmp_path / "input.json"
    scenario.write_text(json.dumps({**SMALL, "output": {"baseline": False}}))
    out_dir = tmp_path / "cli"
    code = main(["--config", config_path, "run", str(scenario), "--horizon", "4", "--out-dir", str(out_dir)])
    assert code == 0
    reports = [p for p in os.listdir(out_dir) if p.startswith("bounds_")]
    assert len(reports) == 1
    assert main(["report", str(out_dir / reports[0])]) == 0
    printed = capsys.readouterr().out
    assert "queue_bound[c0]" in printed
    assert "0 failing" in printed


def test_cli_missing_scenario(config_path, tmp_path):
    assert main(["--config", config_path, "run", str(tmp_path / "nope.json")]) == 2


def test_sweep_rows_and_state_carry_the_run_hash(config_path, tmp_path):
    out_dir = str(tmp_path / "sweep")
    configs = [parse_config(SMALL), parse_config(SMALL).with_overrides({"algorithm": {"seed": 9}})]
    summaries = [_run_single(config_path, c, out_dir) for c in configs]
    hashes = [s["run_hash"] for s in summaries]
    assert len(set(hashes)) == 2
    for summary, config in zip(summaries, configs):
        assert summary["status"] == "ok"
        assert summary["run_hash"] == manifest_hash(build_manifest(config, load_settings(config_path)))
        assert summary["run_hash"] in os.path.basename(summary["state_file"])
        # Both runs share the directory and keep their own state.
        state = _read_json(summary["state_file"])
        assert state["run_hash"] == summary["run_hash"]
        assert state["current_stage"] == "complete"


def test_fd_runs_use_the_configured_workers(tmp_path, monkeypatch):
    import src.orchestrator as orchestrator_module

    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"execution": {"max_workers": 2}}))
    seen = []
    original = orchestrator_module.run_fd

    def recording_run_fd(scenario, T, executor=None):
        seen.append(executor)
        return original(scenario, T, executor=executor)

    monkeypatch.setattr(orchestrator_module, "run_fd", recording_run_fd)
    orchestrator = Orchestrator(str(config_path), parse_config(SMALL), out_dir=str(tmp_path / "out"))
    assert orchestrator.run_pipeline()
    assert len(seen) == 1 and seen[0] is not None
