"""
Orchestrator Module

Runs one simulation experiment as a staged pipeline (scenario build, online
run, optional FD baseline, metrics, bound checks, output files) with state
tracking, plus the preset sweeps built from it.
"""

import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.linalg import block_diag

from . import __version__
from .processors.fd_baseline import FdResult, run_fd
from .processors.inp_solver import SolverSettings
from .processors.metrics import (
    BoundReport,
    MetricSeries,
    bound_report,
    metric_series,
    noise_power,
    trace_frame,
)
from .processors.online_controller import HorizonResult, PowerBudget, Scenario, SlotResult, run_horizon
from .processors.sp_precoders import SpConfig, scheme_array
from .processors.topology_channel import RayleighChannelSource, build_channel_model, build_topology
from .utilities.json_load import load_settings
from .utilities.matrix_dump import antenna_labels, user_labels, write_matrix
from .utilities.presets import expand_sweep
from .utilities.scenario_config import ScenarioConfig, emit, watt_to_dbm

logger = logging.getLogger(__name__)


class PipelineStage(Enum):
    """Pipeline execution stages for tracking and recovery."""
    INIT = "initialization"
    SCENARIO = "scenario_build"
    SIMULATION = "simulation"
    BASELINE = "fd_baseline"
    METRICS = "metrics"
    BOUNDS = "bound_checks"
    OUTPUT = "output"
    COMPLETE = "complete"


def build_scenario(config: ScenarioConfig, settings: Dict[str, Any]) -> Scenario:
    """Topology, user drop, large-scale gains and every run constant for one config."""
    topo_cfg = config.topology
    topology = build_topology(
        cell_count=topo_cfg.cell_count,
        radius=topo_cfg.radius_m,
        antennas_per_bs=list(config.antennas_list()),
        sp_count=topo_cfg.sp_count,
        users_per_sp=list(config.users_per_sp_list()),
    )
    _, gains = build_channel_model(
        topology,
        config.algorithm.seed,
        shadowing_std_db=config.channel.shadowing_std_db,
        min_distance=config.channel.min_distance_m,
    )
    budget = PowerBudget.uniform(topology.cell_count, config.p_max_w, config.p_bar_w)
    schemes = scheme_array([list(config.schemes)] * topology.cell_count)
    powers = np.outer(budget.p_max, np.array(config.power_fractions))
    solver = settings["solver"]
    return Scenario(
        topology=topology,
        source=RayleighChannelSource(topology, gains),
        sp_config=SpConfig(schemes=schemes, powers=powers),
        budget=budget,
        e_H=config.channel.csi_error_std,
        theta=config.algorithm.theta,
        seed=config.algorithm.seed,
        gains=gains,
        noise_power=noise_power(config.power.n0_dbm_per_hz, config.power.bandwidth_hz, config.power.noise_figure_db),
        solver_settings=SolverSettings(
            power_tolerance=float(solver["power_tolerance"]),
            bracket_growth=float(solver["bracket_growth"]),
            max_iterations=int(solver["max_iterations"]),
        ),
        condition_cap=float(settings["sp_precoding"]["condition_cap"]),
        zf_singular_policy=settings["sp_precoding"]["zf_singular_policy"],
        log_every=int(settings["reporting"]["log_every"]),
        name=config.name,
        weighting=config.algorithm.weighting,
    )


def build_manifest(config: ScenarioConfig, settings: Dict[str, Any]) -> Dict[str, Any]:
    """Everything that determines a run's outputs."""
    return {
        "config": emit(config),
        "seed": config.algorithm.seed,
        "settings": {key: settings[key] for key in ("solver", "sp_precoding", "reporting")},
        "version": __version__,
    }


def manifest_hash(manifest: Dict[str, Any]) -> str:
    canonical = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


class Orchestrator:
    """Manages one simulation run with error handling and state tracking."""

    def __init__(
        self,
        config_path: str,
        scenario: ScenarioConfig,
        out_dir: Optional[str] = None,
        dump_matrices: Optional[bool] = None,
    ):
        self.config = load_settings(config_path)
        self.scenario_config = scenario
        self.dump_matrices = scenario.output.dump_matrices if dump_matrices is None else dump_matrices
        self.run_dir = os.path.abspath(out_dir or scenario.output.directory)
        os.makedirs(self.run_dir, exist_ok=True)

        self.manifest = build_manifest(scenario, self.config)
        self.run_hash = manifest_hash(self.manifest)
        self.asset_paths: Dict[str, str] = {}
        self.current_stage = PipelineStage.INIT

        self.scenario: Optional[Scenario] = None
        self.result: Optional[HorizonResult] = None
        self.fd_result: Optional[FdResult] = None
        self.series: Optional[MetricSeries] = None
        self.baseline_series: Optional[MetricSeries] = None
        self.bounds: Optional[BoundReport] = None
        self.summary: Dict[str, Any] = {}

        logger.info(f"Orchestrator initialized for '{scenario.name}' (run {self.run_hash})")

    def output_path(self, kind: str, ext: str) -> str:
        return os.path.join(self.run_dir, f"{kind}_{self.run_hash}.{ext}")

    @property
    def output_files(self) -> Dict[str, str]:
        return {
            "manifest": self.output_path("manifest", "json"),
            "trace": self.output_path("trace", "csv"),
            "series": self.output_path("series", "csv"),
            "metrics": self.output_path("metrics", "csv"),
            "bounds": self.output_path("bounds", "tsv"),
        }

    @property
    def dump_dir(self) -> str:
        return os.path.join(self.run_dir, f"dumps_{self.run_hash}")

    @property
    def state_path(self) -> str:
        # Per run, so sweeps sharing a directory keep every state file.
        return self.output_path("pipeline_state", "json")

    def _save_file(self, path: str, content: Any, mode: str = 'w'):
        """Centralized file saving with error handling."""
        try:
            with open(path, mode, encoding='utf-8' if 'b' not in mode else None) as f:
                f.write(content)
            logger.debug(f"Saved file: {path}")
        except IOError as e:
            logger.error(f"Failed to save {path}: {e}")
            raise

    def _save_frame(self, path: str, frame: pd.DataFrame, **kwargs):
        try:
            frame.to_csv(path, index=False, **kwargs)
            logger.debug(f"Saved table: {path}")
        except IOError as e:
            logger.error(f"Failed to save {path}: {e}")
            raise

    def _save_state(self):
        """Saves pipeline state for potential recovery."""
        state = {
            'current_stage': self.current_stage.value,
            'run_hash': self.run_hash,
            'scenario': self.scenario_config.name,
            'asset_paths': self.asset_paths,
        }
        self._save_file(self.state_path, json.dumps(state, indent=2))

    def _outputs_exist(self) -> bool:
        return all(os.path.exists(p) for p in self.output_files.values())

    def run_pipeline(self) -> bool:
        """Executes the full run; returns False (after logging the failed stage) on any error."""
        logger.info(f"Starting simulation pipeline for '{self.scenario_config.name}'")
        start_time = time.time()

        if self.config.get('reuse_existing_outputs') and self._outputs_exist():
            logger.info(f"Outputs for run {self.run_hash} already exist, skipping")
            self.asset_paths.update(self.output_files)
            self.current_stage = PipelineStage.COMPLETE
            return True

        pipeline_steps = [
            (PipelineStage.SCENARIO, self._build_scenario),
            (PipelineStage.SIMULATION, self._run_simulation),
            (PipelineStage.BASELINE, self._run_baseline),
            (PipelineStage.METRICS, self._compute_metrics),
            (PipelineStage.BOUNDS, self._check_bounds),
            (PipelineStage.OUTPUT, self._write_outputs),
        ]

        try:
            for stage, step_func in pipeline_steps:
                self.current_stage = stage
                logger.info(f"Executing stage: {stage.value}")
                stage_start = time.time()
                step_func()
                logger.info(f"Stage {stage.value} finished in {time.time() - stage_start:.2f}s")
                self._save_state()

            self.current_stage = PipelineStage.COMPLETE
            self._save_state()
            duration = time.time() - start_time
            logger.info(f"Pipeline completed successfully in {duration:.2f}s")
            logger.info(f"Outputs: {self.run_dir} (run {self.run_hash})")
            return True

        except Exception as e:
            duration = time.time() - start_time
            logger.error(f"Pipeline failed at {self.current_stage.value} after {duration:.2f}s")
            logger.error(f"Error: {e}")
            logger.debug(traceback.format_exc())
            try:
                self._save_state()
            except Exception:
                logger.exception("Could not save pipeline state after failure")
            return False

    def _executor(self):
        workers = int(self.config['execution']['max_workers'])
        return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def _build_scenario(self):
        self.scenario = build_scenario(self.scenario_config, self.config)

    def _dump_slot(self, slot: SlotResult):
        m = slot.matrices
        topology = m.channel.topology
        users = user_labels(topology.users_per_sp)
        antennas = antenna_labels(topology.antennas_per_bs)
        fmt = self.config['debug']['matrix_format']
        write_matrix(self.dump_dir, slot.t, "H_true", m.channel.true_H, users, antennas, fmt)
        write_matrix(self.dump_dir, slot.t, "H_est", m.channel.est_H, users, antennas, fmt)
        write_matrix(self.dump_dir, slot.t, "D_true", m.true_demand.global_D, users, users, fmt)
        write_matrix(self.dump_dir, slot.t, "D_est", m.est_demand.global_D, users, users, fmt)
        write_matrix(self.dump_dir, slot.t, "V", block_diag(*m.precoders), antennas, users, fmt)

    def _run_simulation(self):
        horizon = self.scenario_config.algorithm.horizon
        executor = self._executor()
        try:
            if self.scenario_config.output.approach == "fd":
                self.fd_result = run_fd(self.scenario, horizon, executor=executor)
            else:
                on_slot = self._dump_slot if self.dump_matrices else None
                self.result = run_horizon(self.scenario, horizon, on_slot=on_slot, executor=executor)
                if self.dump_matrices:
                    self.asset_paths['dumps'] = self.dump_dir
        finally:
            if executor is not None:
                executor.shutdown()

    def _run_baseline(self):
        if self.scenario_config.output.approach == "fd" or not self.scenario_config.output.baseline:
            logger.info("FD baseline not requested for this run, skipping")
            return
        executor = self._executor()
        try:
            self.fd_result = run_fd(self.scenario, self.scenario_config.algorithm.horizon, executor=executor)
        finally:
            if executor is not None:
                executor.shutdown()

    def _compute_metrics(self):
        fraction = float(self.config['reporting']['steady_state_fraction'])
        if self.result is not None:
            self.series = metric_series(self.result.slots, self.scenario.noise_power)
            if self.fd_result is not None:
                self.baseline_series = self.fd_result.series
        else:
            self.series = self.fd_result.series

        steady = self.series.steady_state(fraction)
        self.summary = {
            "name": self.scenario_config.name,
            "run_hash": self.run_hash,
            "approach": self.scenario_config.output.approach,
            "scheme": "/".join(sorted(set(self.scenario_config.schemes))),
            "theta": self.scenario_config.algorithm.theta,
            "csi_error_std": self.scenario_config.channel.csi_error_std,
            "p_bar_dbm": self.scenario_config.power.p_bar_dbm,
            "horizon": self.series.horizon,
            "rho_bar": float(self.series.rho_bar[-1]),
            "power_bar_w": float(self.series.power_bar[-1]),
            "power_bar_dbm": watt_to_dbm(float(self.series.power_bar[-1])),
            "rate_bar": float(self.series.rate_bar[-1]),
            "steady_rho": steady["rho"],
            "steady_power_dbm": watt_to_dbm(steady["power"]),
            "steady_rate": steady["rate"],
            "excluded_slots": self.series.excluded_slots,
        }
        if self.baseline_series is not None:
            fd_rate = self.baseline_series.steady_state(fraction)["rate"]
            self.summary["fd_steady_rate"] = fd_rate
            self.summary["rate_ratio"] = steady["rate"] / fd_rate if fd_rate > 0 else float("inf")
            logger.info(f"Spatial/FD steady-state rate ratio: {self.summary['rate_ratio']:.3f}")
        logger.info(
            f"rho-bar={self.summary['rho_bar']:.4%}, P-bar={self.summary['power_bar_dbm']:.2f} dBm, "
            f"R-bar={self.summary['rate_bar']:.3f} bit/s/Hz"
        )

    def _check_bounds(self):
        prefixes = [int(p) for p in self.config['reporting']['power_prefixes']]
        if self.result is not None:
            self.bounds = bound_report(self.result, prefixes)
        else:
            constants, checks = {}, []
            for m, sp_result in enumerate(self.fd_result.sp_results):
                report = bound_report(sp_result, prefixes)
                constants.update({f"sp{m}.{k}": v for k, v in report.constants.items()})
                for check in report.checks:
                    check.name = f"sp{m}.{check.name}"
                    checks.append(check)
            self.bounds = BoundReport(constants=constants, checks=checks)
        self.summary["bound_violations"] = self.bounds.violations

    def _write_outputs(self):
        files = self.output_files
        # Manifest first: nothing is emitted without it.
        self._save_file(files['manifest'], json.dumps(self.manifest, indent=2, sort_keys=True))

        if self.result is not None:
            traces = trace_frame(self.result.slots)
            traces.insert(0, "approach", "spatial")
        else:
            parts = []
            for m, sp_result in enumerate(self.fd_result.sp_results):
                part = trace_frame(sp_result.slots)
                part.insert(0, "approach", f"fd-sp{m}")
                parts.append(part)
            traces = pd.concat(parts, ignore_index=True)
        self._save_frame(files['trace'], traces)

        series = self.series.to_frame()
        series.insert(0, "approach", self.scenario_config.output.approach)
        if self.baseline_series is not None:
            baseline = self.baseline_series.to_frame()
            baseline.insert(0, "approach", "fd")
            series = pd.concat([series, baseline], ignore_index=True)
        self._save_frame(files['series'], series)

        self._save_frame(files['metrics'], pd.DataFrame([self.summary]))
        self._write_bound_report(files['bounds'])
        self.asset_paths.update(files)
        for kind, path in files.items():
            logger.info(f"Wrote {kind}: {path}")

    def _write_bound_report(self, path: str):
        header = [
            f"# manifest: {self.run_hash}",
            f"# scenario: {self.scenario_config.name}",
        ]
        header += [f"# constant {name} = {value!r}" for name, value in self.bounds.constants.items()]
        header.append(f"# violations: {self.bounds.violations}")
        body = self.bounds.to_frame().to_csv(sep="\t", index=False)
        self._save_file(path, "\n".join(header) + "\n" + body)


def _run_single(config_path: str, scenario: ScenarioConfig, out_dir: Optional[str]) -> Dict[str, Any]:
    orchestrator = Orchestrator(config_path, scenario, out_dir=out_dir)
    ok = orchestrator.run_pipeline()
    summary = dict(orchestrator.summary)
    summary.setdefault("name", scenario.name)
    summary.setdefault("run_hash", orchestrator.run_hash)
    summary["state_file"] = orchestrator.state_path
    summary["status"] = "ok" if ok else f"failed at {orchestrator.current_stage.value}"
    return summary


def run_sweep(
    preset: str,
    config_path: str = "config.json",
    overrides: Optional[Dict[str, Any]] = None,
    out_dir: Optional[str] = None,
) -> bool:
    """Runs every configuration of a preset and writes sweep_<preset>.csv."""
    settings = load_settings(config_path)
    configs: List[ScenarioConfig] = expand_sweep(preset, overrides)
    workers = min(int(settings['execution']['max_workers']), len(configs))
    logger.info(f"Sweep '{preset}': {len(configs)} run(s) with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_single, [config_path] * len(configs), configs, [out_dir] * len(configs)))
    else:
        summaries = [_run_single(config_path, c, out_dir) for c in configs]

    target = os.path.abspath(out_dir or configs[0].output.directory)
    os.makedirs(target, exist_ok=True)
    path = os.path.join(target, f"sweep_{preset}.csv")
    pd.DataFrame(summaries).to_csv(path, index=False)
    failed = [s["name"] for s in summaries if s["status"] != "ok"]
    if failed:
        logger.error(f"Sweep '{preset}' finished with {len(failed)} failed run(s): {failed}")
    else:
        logger.info(f"Sweep '{preset}' complete: {path}")
    return not failed
