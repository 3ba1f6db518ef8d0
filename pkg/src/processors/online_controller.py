"""
Online Controller Processor Module

Drift-plus-penalty control loop: every slot the InP solves one regularized
least-squares problem per cell from that cell's estimated channel, demand and
virtual queue, then all virtual queues advance together.
"""

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .inp_solver import SolverInput, SolverOutput, SolverSettings, solve_cell
from .sp_precoders import (
    DEFAULT_CONDITION_CAP,
    Demand,
    DemandStatistics,
    SpConfig,
    compute_sp_demands,
    demand_deviation,
)
from .topology_channel import (
    ChannelGenerator,
    ChannelStatistics,
    GlobalChannel,
    LargeScaleGains,
    Topology,
    cell_channel_bounds,
    channel_bound,
)

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """A failure inside the slot loop, annotated with slot and cell."""

    def __init__(self, message: str, slot: Optional[int] = None, cell: Optional[int] = None):
        self.slot = slot
        self.cell = cell
        context = ", ".join(
            part for part in (
                f"slot {slot}" if slot is not None else "",
                f"cell {cell}" if cell is not None else "",
            ) if part
        )
        super().__init__(f"{context}: {message}" if context else message)


@dataclass(frozen=True, eq=False)
class PowerBudget:
    """Per-cell short-term (P_max^c) and long-term (P-bar^c) limits in watts. P-bar may be inf."""
    p_max: np.ndarray
    p_bar: np.ndarray

    def __post_init__(self):
        if self.p_max.shape != self.p_bar.shape:
            raise ValueError("p_max and p_bar must have one entry per cell")
        if np.any(self.p_max <= 0) or np.any(self.p_bar <= 0):
            raise ValueError("Power limits must be positive")
        if np.any(self.p_bar[np.isfinite(self.p_bar)] > self.p_max[np.isfinite(self.p_bar)]):
            raise ValueError("Long-term power limit P-bar must not exceed P_max")

    @classmethod
    def uniform(cls, cell_count: int, p_max: float, p_bar: float) -> "PowerBudget":
        return cls(p_max=np.full(cell_count, float(p_max)), p_bar=np.full(cell_count, float(p_bar)))

    @property
    def queue_enabled(self) -> np.ndarray:
        return np.isfinite(self.p_bar)

    def scaled(self, factor: float) -> "PowerBudget":
        return PowerBudget(p_max=self.p_max * factor, p_bar=self.p_bar * factor)


WEIGHTINGS = ("cell", "network")


@dataclass(frozen=True, eq=False)
class AlgoParams:
    theta: float
    epsilon: float
    U: float
    S_prime: float
    P_bar: np.ndarray
    P_max: np.ndarray
    zeta_prime: float
    xi: np.ndarray
    bound_B: float
    # single-cell analogs
    S_cell: np.ndarray
    zeta_cell: np.ndarray
    bound_B_cell: np.ndarray
    epsilon_cell: np.ndarray
    U_cell: np.ndarray
    weighting: str = "network"

    @property
    def weights(self) -> np.ndarray:
        """Per-cell weight actually used in P5: U_cell under cell weighting, U everywhere otherwise."""
        if self.weighting == "cell":
            return self.U_cell
        return np.full(self.P_max.shape, self.U)

    @property
    def epsilons(self) -> np.ndarray:
        """epsilon^c = S^c / weight^c, so that sum_c epsilon^c is the deviation slack of the run."""
        return self.S_cell / self.weights

    def lambda_hint(self, cell: int, delta: float) -> float:
        """w^c B^2 (1+delta)^2 zeta^c / sqrt(P_max^c): initial bisection bracket."""
        return float(
            self.weights[cell] * self.bound_B ** 2 * (1.0 + delta) ** 2 * self.zeta_cell[cell] / np.sqrt(self.P_max[cell])
        )


def compute_weight(
    theta: float,
    topology: Topology,
    gains: Optional[LargeScaleGains],
    sp_config: SpConfig,
    budget: PowerBudget,
    bound_B: Optional[float] = None,
    weighting: str = "network",
) -> AlgoParams:
    """epsilon = theta zeta'^2 B^2 and U = S'/epsilon, with the constants they depend on.

    Every cell also gets its single-cell constants epsilon^c = theta (zeta^c)^2 (B^c)^2
    and U^c = S^c / epsilon^c, computed from its own users' large-scale gains only.
    With weighting="cell" each BS solves P5 with U^c; "network" uses U in every cell.
    Without gains every B^c falls back to B.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if bound_B is None:
        if gains is None:
            raise ValueError("Either large-scale gains or an explicit channel bound is required")
        bound_B = channel_bound(topology, gains)
    if gains is None:
        bound_B_cell = np.full(topology.cell_count, float(bound_B))
    else:
        bound_B_cell = cell_channel_bounds(topology, gains)

    p_max, p_bar = budget.p_max, budget.p_bar
    finite = budget.queue_enabled
    # Cells without a long-term limit keep Z at 0 and contribute P_max^2 / 2.
    S_cell = np.where(
        finite,
        0.5 * np.maximum((p_max - np.where(finite, p_bar, 0.0)) ** 2, np.where(finite, p_bar, 0.0) ** 2),
        0.5 * p_max ** 2,
    )
    S_prime = float(S_cell.sum())
    zeta_cell = np.sqrt(sp_config.powers.sum(axis=1))
    zeta_prime = sp_config.zeta_prime
    with np.errstate(divide="ignore"):
        xi = np.sqrt(topology.antennas_per_bs * sp_config.powers.sum(axis=1) / p_bar)
    epsilon = theta * zeta_prime ** 2 * bound_B ** 2
    U = S_prime / epsilon
    epsilon_cell = theta * zeta_cell ** 2 * bound_B_cell ** 2
    if np.any(epsilon_cell <= 0):
        raise ValueError("Every cell needs a positive channel bound and SP power")
    U_cell = S_cell / epsilon_cell
    logger.info(f"Algorithm weights: theta={theta:g}, epsilon={epsilon:.4e}, U={U:.4e}, S'={S_prime:.4f}, B={bound_B:.4e}")
    logger.info(
        f"Per-cell weights ({weighting} weighting in use): U^c in [{U_cell.min():.4e}, {U_cell.max():.4e}], "
        f"B^c in [{bound_B_cell.min():.4e}, {bound_B_cell.max():.4e}]"
    )
    return AlgoParams(
        theta=theta,
        epsilon=epsilon,
        U=U,
        S_prime=S_prime,
        P_bar=p_bar.copy(),
        P_max=p_max.copy(),
        zeta_prime=zeta_prime,
        xi=xi,
        bound_B=float(bound_B),
        S_cell=S_cell,
        zeta_cell=zeta_cell,
        bound_B_cell=bound_B_cell,
        epsilon_cell=epsilon_cell,
        U_cell=U_cell,
        weighting=weighting,
    )


def update_queue(Z: float, achieved_power: float, P_bar: float) -> float:
    """Z(t+1) = max{Z(t) + ||V(t)||^2 - P-bar, 0}; no long-term limit keeps Z at 0."""
    if Z < 0:
        raise ValueError(f"Virtual queue must be nonnegative, got {Z}")
    if not np.isfinite(P_bar):
        return 0.0
    return max(Z + achieved_power - P_bar, 0.0)


class QueueState:
    """Per-cell virtual queues with their Lyapunov function."""

    def __init__(self, cell_count: int, keep_history: bool = True):
        self.Z = np.zeros(cell_count)
        self.keep_history = keep_history
        self.history: List[np.ndarray] = [self.Z.copy()] if keep_history else []

    @property
    def lyapunov(self) -> float:
        return 0.5 * float(self.Z @ self.Z)

    def update(self, powers: np.ndarray, budget: PowerBudget) -> float:
        """Advances every queue at once and returns the Lyapunov drift."""
        before = self.lyapunov
        self.Z = np.array([update_queue(z, p, pb) for z, p, pb in zip(self.Z, powers, budget.p_bar)])
        if self.keep_history:
            self.history.append(self.Z.copy())
        return self.lyapunov - before


@dataclass(eq=False)
class SlotMatrices:
    channel: GlobalChannel
    true_demand: Demand
    est_demand: Demand
    precoders: List[np.ndarray]


@dataclass(eq=False)
class SlotResult:
    t: int
    solutions: List[SolverOutput]
    powers: np.ndarray
    queues_before: np.ndarray
    queues_after: np.ndarray
    deviation_true: float
    deviation_est: float
    cell_residuals_true: np.ndarray
    cell_residuals_est: np.ndarray
    demand_norm_true: float
    demand_norm_est: float
    demand_gap: float
    channel_norm: float
    delta_hat: float
    lyapunov: float
    drift: float
    signal: np.ndarray
    interference: np.ndarray
    fallbacks: int = 0
    solve_seconds: float = 0.0
    matrices: Optional[SlotMatrices] = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lambda_star for s in self.solutions])

    @property
    def case_tags(self) -> List[str]:
        return [s.case_tag.value for s in self.solutions]


def _solve_one(
    c: int, channel: GlobalChannel, demand: Demand, Z: float, params: AlgoParams, settings: SolverSettings, delta: float
) -> SolverOutput:
    # Only BS c's column block of the estimated channel is read here.
    inp = SolverInput(
        H_hat=channel.local(c, "est"),
        G_hat=demand.padded[c],
        Z=float(Z),
        U=float(params.weights[c]),
        P_max=float(params.P_max[c]),
        settings=settings,
        lambda_hint=params.lambda_hint(c, delta),
    )
    return solve_cell(inp)


def run_slot(
    t: int,
    queues: QueueState,
    channel: GlobalChannel,
    est_demand: Demand,
    true_demand: Demand,
    params: AlgoParams,
    budget: PowerBudget,
    settings: SolverSettings = SolverSettings(),
    executor: Optional[Executor] = None,
    cell_order: Optional[List[int]] = None,
    delta_hat: Optional[float] = None,
) -> SlotResult:
    """One slot of the online algorithm.

    delta_hat is the running maximum of the normalized CSI error; it only
    seeds the bisection bracket and defaults to this slot's value.
    """
    topology = channel.topology
    delta = channel.delta_hat if delta_hat is None else max(delta_hat, channel.delta_hat)
    C = topology.cell_count
    order = list(range(C)) if cell_order is None else list(cell_order)
    if sorted(order) != list(range(C)):
        raise ValueError(f"cell_order must be a permutation of 0..{C - 1}")
    Z_before = queues.Z.copy()

    start = time.perf_counter()
    solutions: List[Optional[SolverOutput]] = [None] * C
    try:
        if executor is None:
            for c in order:
                solutions[c] = _solve_one(c, channel, est_demand, Z_before[c], params, settings, delta)
        else:
            futures = {
                c: executor.submit(_solve_one, c, channel, est_demand, Z_before[c], params, settings, delta) for c in order
            }
            for c in order:
                solutions[c] = futures[c].result()
    except Exception as e:
        failed = next((c for c in order if solutions[c] is None), None)
        raise SimulationError(str(e), slot=t, cell=failed) from e
    solve_seconds = time.perf_counter() - start

    powers = np.array([s.achieved_power for s in solutions])
    precoders = [s.V_star for s in solutions]

    # Column block c of H'V' is H^c V^c; the same block of D' is G^c.
    received_true = np.hstack([channel.local(c, "true") @ precoders[c] for c in range(C)])
    received_est = np.hstack([channel.local(c, "est") @ precoders[c] for c in range(C)])
    residual_true = received_true - true_demand.global_D
    residual_est = received_est - est_demand.global_D
    cols = [topology.cell_rows(c) for c in range(C)]
    cell_residuals_true = np.array([np.linalg.norm(residual_true[:, s]) ** 2 for s in cols])
    cell_residuals_est = np.array([np.linalg.norm(residual_est[:, s]) ** 2 for s in cols])

    received_power = np.abs(received_true) ** 2
    signal = np.diag(received_power).copy()
    interference = received_power.sum(axis=1) - signal

    drift = queues.update(powers, budget)

    return SlotResult(
        t=t,
        solutions=solutions,
        powers=powers,
        queues_before=Z_before,
        queues_after=queues.Z.copy(),
        deviation_true=float(cell_residuals_true.sum()),
        deviation_est=float(cell_residuals_est.sum()),
        cell_residuals_true=cell_residuals_true,
        cell_residuals_est=cell_residuals_est,
        demand_norm_true=true_demand.norm,
        demand_norm_est=est_demand.norm,
        demand_gap=demand_deviation(true_demand, est_demand)[0],
        channel_norm=channel.true_norm,
        delta_hat=channel.delta_hat,
        lyapunov=queues.lyapunov,
        drift=drift,
        signal=signal,
        interference=interference,
        fallbacks=len(est_demand.fallbacks) + (0 if true_demand is est_demand else len(true_demand.fallbacks)),
        solve_seconds=solve_seconds,
        matrices=SlotMatrices(channel, true_demand, est_demand, precoders),
    )


@dataclass(eq=False)
class Scenario:
    """Everything one online run needs, already in linear units."""
    topology: Topology
    source: object
    sp_config: SpConfig
    budget: PowerBudget
    e_H: float
    theta: float
    seed: int
    gains: Optional[LargeScaleGains] = None
    bound_B: Optional[float] = None
    band: int = 0
    noise_power: float = 0.0
    bandwidth_share: float = 1.0
    solver_settings: SolverSettings = field(default_factory=SolverSettings)
    condition_cap: float = DEFAULT_CONDITION_CAP
    zf_singular_policy: str = "abort"
    log_every: int = 100
    name: str = "spatial"
    weighting: str = "cell"

    def __post_init__(self):
        self.sp_config.validate(self.topology, self.budget.p_max)
        if self.budget.p_max.shape != (self.topology.cell_count,):
            raise ValueError("Power budget must hold one entry per cell")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.zf_singular_policy not in ("abort", "mrt"):
            raise ValueError(f"zf_singular_policy must be 'abort' or 'mrt', got {self.zf_singular_policy}")
        if self.bound_B is None:
            if self.gains is None:
                raise ValueError("Scenario needs large-scale gains or an explicit channel bound")
            self.bound_B = channel_bound(self.topology, self.gains)


@dataclass(eq=False)
class HorizonResult:
    scenario: Scenario
    params: AlgoParams
    slots: List[SlotResult]
    channel_statistics: ChannelStatistics
    demand_statistics: DemandStatistics
    queue_history: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.slots)


SlotCallback = Callable[[SlotResult], None]


def run_horizon(
    scenario: Scenario,
    T: int,
    on_slot: Optional[SlotCallback] = None,
    executor: Optional[Executor] = None,
    keep_matrices: bool = False,
) -> HorizonResult:
    """Runs the online algorithm for T slots; deterministic given the scenario seed."""
    if T < 1:
        raise ValueError(f"Horizon T must be >= 1, got {T}")

    topology = scenario.topology
    params = compute_weight(
        scenario.theta, topology, scenario.gains, scenario.sp_config, scenario.budget, scenario.bound_B,
        scenario.weighting,
    )
    generator = ChannelGenerator(topology, scenario.source, scenario.e_H, scenario.bound_B, scenario.seed, scenario.band)
    demand_statistics = DemandStatistics(topology, scenario.sp_config)
    queues = QueueState(topology.cell_count)
    slots: List[SlotResult] = []
    delta_hat = 0.0

    logger.info(
        f"[{scenario.name}] Running {T} slots: {topology.cell_count} cells, {topology.total_users} users, "
        f"{topology.total_antennas} antennas, e_H={scenario.e_H:g}"
    )
    start = time.time()
    for t in range(T):
        channel = generator.next_slot()
        try:
            est_demand = compute_sp_demands(
                channel, scenario.sp_config, "est", scenario.condition_cap, scenario.zf_singular_policy
            )
            if scenario.e_H == 0:
                true_demand = est_demand
            else:
                true_demand = compute_sp_demands(
                    channel, scenario.sp_config, "true", scenario.condition_cap, scenario.zf_singular_policy
                )
        except ValueError as e:
            raise SimulationError(str(e), slot=t, cell=getattr(e, "cell", None)) from e
        demand_statistics.update(channel)
        delta_hat = max(delta_hat, channel.delta_hat)

        slot = run_slot(
            t, queues, channel, est_demand, true_demand, params, scenario.budget,
            scenario.solver_settings, executor, delta_hat=delta_hat,
        )
        if on_slot is not None:
            on_slot(slot)
        if not keep_matrices:
            slot.matrices = None
        slots.append(slot)

        if scenario.log_every and (t + 1) % scenario.log_every == 0:
            demand_sq = slot.demand_norm_true ** 2
            rho = slot.deviation_true / demand_sq if demand_sq > 0 else float("nan")
            logger.debug(
                f"[{scenario.name}] slot {t + 1}/{T}: rho={rho:.4e}, mean power={slot.powers.mean():.4f} W, "
                f"max Z={slot.queues_after.max():.4e}"
            )

    logger.info(f"[{scenario.name}] Finished {T} slots in {time.time() - start:.2f}s")
    return HorizonResult(
        scenario=scenario,
        params=params,
        slots=slots,
        channel_statistics=generator.statistics,
        demand_statistics=demand_statistics,
        queue_history=np.asarray(queues.history),
    )
