"""
Metrics Processor Module

Post-processing of a finished run: the normalized deviation, power and rate
curves, their steady-state values, and the empirical checks of the queue,
power and demand-deviation bounds computed with realized channel constants.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .inp_solver import SolverInput, solve_cell
from .online_controller import HorizonResult, SlotResult
from .sp_precoders import deviation_constant
from ..utilities.matrix_dump import list_slots, read_matrix

logger = logging.getLogger(__name__)

FEASIBILITY_TOLERANCE = 1e-9
BOUND_TOLERANCE = 1e-9


def noise_power(n0_dbm_per_hz: float = -174.0, bandwidth_hz: float = 60e3, noise_figure_db: float = 10.0) -> float:
    """sigma_n^2 = N0 * B_W * N_F in watts."""
    if bandwidth_hz <= 0:
        raise ValueError(f"Bandwidth must be positive, got {bandwidth_hz}")
    total_dbm = n0_dbm_per_hz + 10.0 * np.log10(bandwidth_hz) + noise_figure_db
    return float(10.0 ** ((total_dbm - 30.0) / 10.0))


def _prefix(slots: Sequence[SlotResult], T: Optional[int]) -> Sequence[SlotResult]:
    T = len(slots) if T is None else T
    if T < 1 or T > len(slots):
        raise ValueError(f"T must lie in [1, {len(slots)}], got {T}")
    return slots[:T]


def slot_rho(slots: Sequence[SlotResult]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slot ||H'V' - D'||^2 / ||D'||^2 and a mask of usable slots (nonzero demand)."""
    deviation = np.array([s.deviation_true for s in slots])
    norm_sq = np.array([s.demand_norm_true for s in slots]) ** 2
    valid = norm_sq > 0
    rho = np.zeros_like(deviation)
    rho[valid] = deviation[valid] / norm_sq[valid]
    return rho, valid


def rho_bar(slots: Sequence[SlotResult], T: Optional[int] = None, cumulative: bool = False):
    """(1/T) sum_t ||H'V' - D'||^2 / ||D'||^2, or its running value for every prefix.

    Slots with zero demand are excluded; the running value repeats across them.
    """
    slots = _prefix(slots, T)
    rho, valid = slot_rho(slots)
    excluded = int(np.count_nonzero(~valid))
    if excluded:
        logger.warning(f"{excluded} slot(s) with zero demand excluded from rho-bar")
    if cumulative:
        return np.cumsum(np.where(valid, rho, 0.0)) / np.maximum(np.cumsum(valid), 1)
    if not np.any(valid):
        return 0.0
    return float(rho[valid].mean())


def power_bar(slots: Sequence[SlotResult], T: Optional[int] = None, per_cell: bool = False, cumulative: bool = False):
    """(1/(TC)) sum_t ||V'(t)||^2, or the per-cell time averages; running values when cumulative."""
    powers = np.array([s.powers for s in _prefix(slots, T)])
    values = powers if per_cell else powers.mean(axis=1)
    if cumulative:
        return cumulative_mean(values)
    return values.mean(axis=0) if per_cell else float(values.mean())


def slot_rates(slots: Sequence[SlotResult], noise: float) -> np.ndarray:
    """(T, K) per-user log2(1 + SINR)."""
    if noise <= 0:
        raise ValueError(f"Noise power must be positive, got {noise}")
    signal = np.array([s.signal for s in slots])
    interference = np.array([s.interference for s in slots])
    return np.log2(1.0 + signal / (interference + noise))


def rate_bar(
    slots: Sequence[SlotResult],
    noise: float,
    T: Optional[int] = None,
    bandwidth_share: float = 1.0,
    cumulative: bool = False,
):
    """(1/(TK)) sum_t sum_k log2(1 + SINR_k(t)), scaled by the share of total bandwidth used."""
    rate = slot_rates(_prefix(slots, T), noise).mean(axis=1) * bandwidth_share
    if cumulative:
        return cumulative_mean(rate)
    return float(rate.mean())


def cumulative_mean(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    counts = np.arange(1, values.shape[0] + 1).reshape((-1,) + (1,) * (values.ndim - 1))
    return np.cumsum(values, axis=0) / counts


def steady_state_mean(values: np.ndarray, fraction: float = 0.25) -> float:
    """Mean over the last `fraction` of the horizon (at least one slot)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"Steady-state fraction must lie in (0, 1], got {fraction}")
    values = np.asarray(values, dtype=float)
    count = max(1, int(math.ceil(fraction * values.shape[0])))
    return float(values[-count:].mean())


@dataclass
class MetricSeries:
    """Cumulative time averages for every prefix T = 1..len."""
    rho_bar: np.ndarray
    power_bar: np.ndarray
    power_bar_cell: np.ndarray
    rate_bar: np.ndarray
    noise_power: float
    rho: np.ndarray = field(repr=False, default=None)
    power: np.ndarray = field(repr=False, default=None)
    rate: np.ndarray = field(repr=False, default=None)
    excluded_slots: int = 0

    def __post_init__(self):
        lengths = {len(self.rho_bar), len(self.power_bar), len(self.rate_bar)}
        if len(lengths) != 1:
            raise ValueError(f"All metric series must share one length, got {lengths}")

    @property
    def horizon(self) -> int:
        return len(self.rho_bar)

    def steady_state(self, fraction: float = 0.25) -> Dict[str, float]:
        """Last-fraction averages of the per-slot quantities."""
        return {
            "rho": steady_state_mean(self.rho, fraction),
            "power": steady_state_mean(self.power, fraction),
            "rate": steady_state_mean(self.rate, fraction),
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "t": np.arange(1, self.horizon + 1),
            "rho_bar": self.rho_bar,
            "power_bar": self.power_bar,
            "rate_bar": self.rate_bar,
        })
        for c in range(self.power_bar_cell.shape[1]):
            frame[f"power_bar_c{c}"] = self.power_bar_cell[:, c]
        return frame


def metric_series(slots: Sequence[SlotResult], noise: float, bandwidth_share: float = 1.0) -> MetricSeries:
    rho, valid = slot_rho(slots)
    powers = np.array([s.powers for s in slots])
    return MetricSeries(
        rho_bar=rho_bar(slots, cumulative=True),
        power_bar=power_bar(slots, cumulative=True),
        power_bar_cell=power_bar(slots, per_cell=True, cumulative=True),
        rate_bar=rate_bar(slots, noise, bandwidth_share=bandwidth_share, cumulative=True),
        noise_power=noise,
        rho=rho,
        power=powers.mean(axis=1),
        rate=slot_rates(slots, noise).mean(axis=1) * bandwidth_share,
        excluded_slots=int(np.count_nonzero(~valid)),
    )


def trace_frame(slots: Sequence[SlotResult]) -> pd.DataFrame:
    """One row per slot: queues, powers, deviations, lambdas and case tags."""
    rows = []
    for s in slots:
        row = {
            "t": s.t,
            "deviation_true": s.deviation_true,
            "deviation_est": s.deviation_est,
            "demand_norm_sq_true": s.demand_norm_true ** 2,
            "demand_norm_sq_est": s.demand_norm_est ** 2,
            "demand_gap": s.demand_gap,
            "channel_norm": s.channel_norm,
            "delta_hat": s.delta_hat,
            "lyapunov": s.lyapunov,
            "drift": s.drift,
            "fallbacks": s.fallbacks,
        }
        for c, solution in enumerate(s.solutions):
            row[f"Z_c{c}"] = s.queues_before[c]
            row[f"power_c{c}"] = s.powers[c]
            row[f"lambda_c{c}"] = solution.lambda_star
            row[f"case_c{c}"] = solution.case_tag.value
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    status: str            # PASS, FAIL or REF
    violations: int = 0

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class BoundReport:
    constants: Dict[str, float]
    checks: List[BoundCheck]

    @property
    def violations(self) -> int:
        return sum(check.violations for check in self.checks if check.status != "REF")

    @property
    def passed(self) -> bool:
        return all(check.status != "FAIL" for check in self.checks)

    def check(self, name: str) -> BoundCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"name": c.name, "lhs": c.lhs, "rhs": c.rhs, "slack": c.slack, "status": c.status, "violations": c.violations}
            for c in self.checks
        ])

    def constants_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"name": list(self.constants), "value": list(self.constants.values())})


def phi_constant(gamma: float, zeta: float, eta: float, bound_B: float, delta: float) -> float:
    """2[(2+delta)(gamma^2 + zeta eta) + 2(zeta(1+delta) + eta) gamma] B^2 delta."""
    return 2.0 * ((2.0 + delta) * (gamma ** 2 + zeta * eta) + 2.0 * (zeta * (1.0 + delta) + eta) * gamma) * bound_B ** 2 * delta


def _slotwise(name: str, lhs: np.ndarray, rhs: np.ndarray) -> BoundCheck:
    """Worst slot of a slot-wise inequality lhs <= rhs."""
    slack = rhs - lhs
    worst = int(np.argmin(slack))
    violations = int(np.count_nonzero(lhs > rhs * (1.0 + BOUND_TOLERANCE)))
    return BoundCheck(name, float(lhs[worst]), float(rhs[worst]), "FAIL" if violations else "PASS", violations)


def bound_report(
    result: HorizonResult,
    prefixes: Sequence[int] = (1, 10, 100, 1000),
    reference_optimum: Optional[float] = None,
) -> BoundReport:
    """Evaluates every slot-wise and horizon-wise bound with realized constants.

    B is the running maximum of ||H'(t)||_F, delta the running maximum of the
    normalized block error and the local-channel minima are running minima,
    so every check at slot t only uses data available up to t.

    The deviation_gap row is (1/T) sum_t ||H'V' - D'||^2 - (phi' + sum_c epsilon^c),
    which may not exceed the optimal stationary deviation. It is evaluated
    against reference_optimum when one is given and reported as REF otherwise.
    """
    params = result.params
    slots = result.slots
    T = len(slots)
    scenario = result.scenario
    topology = scenario.topology
    budget = scenario.budget
    sp_config = scenario.sp_config

    channel_norms = np.array(result.channel_statistics.channel_norms)
    B_run = result.channel_statistics.running_bound()
    delta_now = np.array(result.channel_statistics.deltas)
    delta_run = result.channel_statistics.running_delta()
    Z = np.array([s.queues_after for s in slots])
    powers = np.array([s.powers for s in slots])
    finite = budget.queue_enabled
    weights = params.weights

    checks: List[BoundCheck] = []

    # Virtual queue bound, every cell with a finite long-term limit.
    for c in np.flatnonzero(finite):
        rhs = weights[c] * B_run ** 2 * (1.0 + delta_run) ** 2 * params.xi[c] + budget.p_max[c] - budget.p_bar[c]
        checks.append(_slotwise(f"queue_bound[c{c}]", Z[:, c], rhs))

    # Per-slot power limit.
    for c in range(topology.cell_count):
        limit = np.full(T, budget.p_max[c] * (1.0 + FEASIBILITY_TOLERANCE))
        checks.append(_slotwise(f"slot_power[c{c}]", powers[:, c], limit))

    # Time-averaged power at each prefix.
    for prefix in prefixes:
        if prefix > T:
            continue
        B, delta = B_run[prefix - 1], delta_run[prefix - 1]
        average = powers[:prefix].mean(axis=0)
        for c in np.flatnonzero(finite):
            # P-bar^c + Z^c(T)/T with Z^c(T) at its queue bound.
            rhs = budget.p_bar[c] + (
                weights[c] * B ** 2 * (1.0 + delta) ** 2 * params.xi[c] + budget.p_max[c] - budget.p_bar[c]
            ) / prefix
            violated = average[c] > rhs * (1.0 + BOUND_TOLERANCE)
            checks.append(BoundCheck(
                f"average_power[c{c},T={prefix}]", float(average[c]), float(rhs),
                "FAIL" if violated else "PASS", int(violated),
            ))

    # Demand norms and demand deviation.
    demand_true = np.array([s.demand_norm_true for s in slots])
    demand_est = np.array([s.demand_norm_est for s in slots])
    demand_gap = np.array([s.demand_gap for s in slots])
    checks.append(_slotwise("demand_norm_true", demand_true, params.zeta_prime * channel_norms))
    checks.append(_slotwise("demand_norm_est", demand_est, params.zeta_prime * channel_norms * (1.0 + delta_now)))

    norm_min, est_eig_min, true_eig_min = result.demand_statistics.running_minima()
    eta_run = np.array([
        deviation_constant(
            sp_config, topology.users_per_sp, B_run[t], delta_run[t], norm_min[t], est_eig_min[t], true_eig_min[t]
        ).eta_prime
        for t in range(T)
    ])
    checks.append(_slotwise("demand_deviation", demand_gap, eta_run * B_run * delta_run))

    # Final constants.
    B_real, delta_hat = float(B_run[-1]), float(delta_run[-1])
    final = deviation_constant(
        sp_config, topology.users_per_sp, B_real, delta_hat, norm_min[-1], est_eig_min[-1], true_eig_min[-1]
    )
    gamma_prime = float(np.sqrt(budget.p_max.sum()))
    phi_prime = phi_constant(gamma_prime, params.zeta_prime, final.eta_prime, B_real, delta_hat)

    mean_deviation = float(np.mean([s.deviation_true for s in slots]))
    deviation_slack = phi_prime + float(params.epsilons.sum())
    gap = mean_deviation - deviation_slack
    if reference_optimum is None:
        checks.append(BoundCheck("deviation_gap", gap, math.nan, "REF"))
    else:
        violated = gap > reference_optimum + BOUND_TOLERANCE * max(1.0, abs(reference_optimum))
        checks.append(BoundCheck("deviation_gap", gap, float(reference_optimum), "FAIL" if violated else "PASS", int(violated)))

    constants: Dict[str, float] = {
        "B": params.bound_B,
        "B_real": B_real,
        "delta_hat": delta_hat,
        "theta": params.theta,
        "epsilon": params.epsilon,
        "U": params.U,
        "S_prime": params.S_prime,
        "zeta_prime": params.zeta_prime,
        "gamma_prime": gamma_prime,
        "eta_prime": final.eta_prime,
        "phi_prime": phi_prime,
        "deviation_slack": deviation_slack,
    }
    for c in range(topology.cell_count):
        gamma_c = float(np.sqrt(budget.p_max[c]))
        constants[f"xi[c{c}]"] = float(params.xi[c])
        constants[f"S[c{c}]"] = float(params.S_cell[c])
        constants[f"U[c{c}]"] = float(weights[c])
        constants[f"B[c{c}]"] = float(params.bound_B_cell[c])
        constants[f"zeta[c{c}]"] = float(params.zeta_cell[c])
        constants[f"eta[c{c}]"] = float(final.eta_per_cell[c])
        constants[f"phi[c{c}]"] = phi_constant(gamma_c, params.zeta_cell[c], final.eta_per_cell[c], B_real, delta_hat)
        for m in range(topology.sp_count):
            constants[f"B_hat_min[c{c},m{m}]"] = float(norm_min[-1][c, m])
            if np.isfinite(est_eig_min[-1][c, m]):
                constants[f"omega_hat_min[c{c},m{m}]"] = float(est_eig_min[-1][c, m])
                constants[f"omega_min[c{c},m{m}]"] = float(true_eig_min[-1][c, m])

    report = BoundReport(constants=constants, checks=checks)
    if report.violations:
        logger.warning(f"Bound report: {report.violations} violation(s) across {len(checks)} checks")
    else:
        logger.info(f"Bound report: all {len(checks)} checks hold")
    return report


def rho_from_dumps(dump_dir: str) -> float:
    """Recomputes rho-bar from per-slot H_true, V and D_true matrix dumps."""
    slots = list_slots(dump_dir)
    if not slots:
        raise FileNotFoundError(f"No matrix dumps found in {dump_dir}")
    ratios = []
    for t in slots:
        H = read_matrix(dump_dir, t, "H_true")
        V = read_matrix(dump_dir, t, "V")
        D = read_matrix(dump_dir, t, "D_true")
        norm_sq = np.linalg.norm(D) ** 2
        if norm_sq > 0:
            ratios.append(np.linalg.norm(H @ V - D) ** 2 / norm_sq)
    return float(np.mean(ratios))


@dataclass
class StationaryOptimum:
    value: float                 # optimal E{||HV - D||^2}
    multiplier: float            # optimal dual variable of the average-power constraint
    average_power: float
    state_powers: np.ndarray
    state_deviations: np.ndarray


def stationary_optimum(
    states: Sequence[np.ndarray],
    demands: Sequence[np.ndarray],
    probabilities: Sequence[float],
    p_max: float,
    p_bar: float,
    tolerance: float = 1e-10,
    max_iterations: int = 200,
) -> StationaryOptimum:
    """Optimal state-dependent policy for a finite channel distribution.

    Minimizes E{||H_s V_s - D_s||^2} subject to ||V_s||^2 <= p_max in every
    state and E{||V_s||^2} <= p_bar, by bisection on the multiplier nu of the
    average constraint. Each per-state problem is the single-cell solver with
    U = 1 and Z = nu.
    """
    probabilities = np.asarray(probabilities, dtype=float)

    def evaluate(nu: float):
        outs = [solve_cell(SolverInput(H, D, Z=nu, U=1.0, P_max=p_max)) for H, D in zip(states, demands)]
        state_powers = np.array([o.achieved_power for o in outs])
        state_devs = np.array([np.linalg.norm(H @ o.V_star - D) ** 2 for H, D, o in zip(states, demands, outs)])
        return float(probabilities @ state_powers), state_powers, state_devs

    average, state_powers, state_devs = evaluate(0.0)
    nu = 0.0
    if np.isfinite(p_bar) and average > p_bar:
        lo, hi = 0.0, 1.0
        while evaluate(hi)[0] > p_bar:
            hi *= 2.0
        for _ in range(max_iterations):
            mid = 0.5 * (lo + hi)
            if evaluate(mid)[0] > p_bar:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tolerance * max(1.0, hi):
                break
        nu = hi
        average, state_powers, state_devs = evaluate(nu)

    return StationaryOptimum(
        value=float(probabilities @ state_devs),
        multiplier=nu,
        average_power=average,
        state_powers=state_powers,
        state_deviations=state_devs,
    )
