"""
FD Baseline Processor Module

Physical isolation by frequency division: every SP gets 1/M of the band, 1/M
of each cell's power limits and runs the online algorithm alone on its own
users, with fading drawn independently on its sub-band.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .metrics import MetricSeries, cumulative_mean, slot_rates
from .online_controller import HorizonResult, Scenario, run_horizon
from .sp_precoders import SpConfig
from .topology_channel import (
    DiscreteChannelSource,
    RayleighChannelSource,
    channel_bound,
    sp_user_rows,
    subset_topology,
)

logger = logging.getLogger(__name__)


class RowSubsetSource:
    """Draws from another channel source and keeps only the given user rows."""

    def __init__(self, source, rows: np.ndarray):
        self.source = source
        self.rows = rows

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.source.draw(rng)[self.rows]


@dataclass(eq=False)
class FdScenario:
    base: Scenario
    sp_scenarios: List[Scenario]
    user_rows: List[np.ndarray]

    @property
    def sp_count(self) -> int:
        return len(self.sp_scenarios)

    @property
    def band_fraction(self) -> float:
        return 1.0 / self.sp_count


def _sub_source(base: Scenario, rows: np.ndarray, topology):
    if base.gains is not None and isinstance(base.source, RayleighChannelSource):
        gains = base.gains.rows(rows)
        return RayleighChannelSource(topology, gains), gains, channel_bound(topology, gains)
    if isinstance(base.source, DiscreteChannelSource):
        states = [state[rows] for state in base.source.states]
        return DiscreteChannelSource(states, base.source.probabilities), None, base.bound_B
    return RowSubsetSource(base.source, rows), None, base.bound_B


def build_fd_scenario(base: Scenario) -> FdScenario:
    """One single-SP scenario per SP with 1/M of bandwidth, power and noise."""
    M = base.topology.sp_count
    scenarios, user_rows = [], []
    for m in range(M):
        topology = subset_topology(base.topology, m)
        rows = sp_user_rows(base.topology, m)
        source, gains, bound_B = _sub_source(base, rows, topology)
        budget = base.budget.scaled(1.0 / M)
        sp_config = SpConfig(schemes=base.sp_config.schemes[:, [m]].copy(), powers=budget.p_max.reshape(-1, 1).copy())
        scenarios.append(replace(
            base,
            topology=topology,
            source=source,
            gains=gains,
            bound_B=bound_B,
            sp_config=sp_config,
            budget=budget,
            band=0 if M == 1 else m + 1,
            noise_power=base.noise_power / M,
            bandwidth_share=1.0 / M,
            name=f"fd-sp{m}",
        ))
        user_rows.append(rows)
    return FdScenario(base=base, sp_scenarios=scenarios, user_rows=user_rows)


@dataclass(eq=False)
class FdResult:
    scenario: FdScenario
    sp_results: List[HorizonResult]
    series: MetricSeries


def combine_fd_series(fd: FdScenario, results: List[HorizonResult]) -> MetricSeries:
    """Network-wide FD curves: summed per-cell powers, per-user rates normalized by total bandwidth."""
    T = min(r.horizon for r in results)
    K = fd.base.topology.total_users
    rates = np.zeros((T, K))
    cell_powers = np.zeros((T, fd.base.topology.cell_count))
    deviation = np.zeros(T)
    demand_sq = np.zeros(T)
    for sp_scenario, rows, result in zip(fd.sp_scenarios, fd.user_rows, results):
        slots = result.slots[:T]
        rates[:, rows] = slot_rates(slots, sp_scenario.noise_power) * sp_scenario.bandwidth_share
        cell_powers += np.array([s.powers for s in slots])
        deviation += np.array([s.deviation_true for s in slots])
        demand_sq += np.array([s.demand_norm_true for s in slots]) ** 2

    rho = np.where(demand_sq > 0, deviation / np.where(demand_sq > 0, demand_sq, 1.0), 0.0)
    rate = rates.mean(axis=1)
    power = cell_powers.mean(axis=1)
    return MetricSeries(
        rho_bar=cumulative_mean(rho),
        power_bar=cumulative_mean(power),
        power_bar_cell=cumulative_mean(cell_powers),
        rate_bar=cumulative_mean(rate),
        noise_power=fd.base.noise_power,
        rho=rho,
        power=power,
        rate=rate,
        excluded_slots=int(np.count_nonzero(demand_sq == 0)),
    )


def run_fd(base: Scenario, T: int, executor: Optional[Executor] = None) -> FdResult:
    """Runs the FD baseline for the same topology, seed and large-scale gains as `base`."""
    fd = build_fd_scenario(base)
    logger.info(f"Running FD baseline: {fd.sp_count} sub-band(s), {T} slots each")
    if executor is None:
        results = [run_horizon(s, T) for s in fd.sp_scenarios]
    else:
        results = list(executor.map(run_horizon, fd.sp_scenarios, [T] * fd.sp_count))
    return FdResult(scenario=fd, sp_results=results, series=combine_fd_series(fd, results))
