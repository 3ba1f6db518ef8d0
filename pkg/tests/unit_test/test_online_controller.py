import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.processors import online_controller
from src.processors.online_controller import (
    PowerBudget,
    QueueState,
    Scenario,
    SimulationError,
    compute_weight,
    run_horizon,
    run_slot,
    update_queue,
)
from src.processors.sp_precoders import SpConfig, compute_sp_demands
from src.processors.topology_channel import (
    ChannelGenerator,
    DiscreteChannelSource,
    LargeScaleGains,
    RayleighChannelSource,
    build_channel_model,
    build_topology,
    cell_channel_bounds,
    channel_bound,
)

logger = logging.getLogger(__name__)


def small_scenario(scheme="mrt", e_H=0.15, p_bar=5.0, theta=1e-3, seed=3):
    topology = build_topology(cell_count=2, radius=250.0, antennas_per_bs=4, sp_count=2, users_per_sp=1)
    _, gains = build_channel_model(topology, seed)
    budget = PowerBudget.uniform(2, 8.0, p_bar)
    return Scenario(
        topology=topology,
        source=RayleighChannelSource(topology, gains),
        sp_config=SpConfig.uniform(topology, scheme, budget.p_max),
        budget=budget,
        e_H=e_H,
        theta=theta,
        seed=seed,
        gains=gains,
    )


def test_compute_weight_constants():
    scenario = small_scenario(p_bar=5.0)
    params = compute_weight(scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget)
    B = channel_bound(scenario.topology, scenario.gains)
    # S' = 1/2 sum_c max{(8-5)^2, 5^2}
    assert params.S_prime == pytest.approx(25.0)
    assert params.zeta_prime == pytest.approx(4.0)
    assert params.epsilon == pytest.approx(1e-3 * 16.0 * B ** 2)
    assert params.U == pytest.approx(25.0 / params.epsilon)
    np.testing.assert_allclose(params.xi, np.sqrt(4 * 8.0 / 5.0))


def test_compute_weight_without_long_term_limit():
    scenario = small_scenario(p_bar=np.inf)
    params = compute_weight(scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget)
    assert params.S_prime == pytest.approx(64.0)
    assert np.all(params.xi == 0)
    assert np.isfinite(params.U)
    with pytest.raises(ValueError):
        compute_weight(0.0, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget)


def test_power_budget_validation():
    with pytest.raises(ValueError):
        PowerBudget.uniform(2, 1.0, 2.0)
    with pytest.raises(ValueError):
        PowerBudget.uniform(2, -1.0, 0.5)
    budget = PowerBudget.uniform(3, 4.0, np.inf)
    assert not budget.queue_enabled.any()
    np.testing.assert_allclose(budget.scaled(0.5).p_max, 2.0)


def test_update_queue():
    assert update_queue(1.0, 3.0, 2.5) == pytest.approx(1.5)
    assert update_queue(0.5, 1.0, 2.5) == 0.0
    assert update_queue(4.0, 9.0, np.inf) == 0.0
    with pytest.raises(ValueError):
        update_queue(-0.1, 1.0, 1.0)


def test_queue_state_drift():
    queues = QueueState(2)
    budget = PowerBudget.uniform(2, 5.0, 2.0)
    drift = queues.update(np.array([4.0, 1.0]), budget)
    np.testing.assert_allclose(queues.Z, [2.0, 0.0])
    assert drift == pytest.approx(2.0)
    assert queues.lyapunov == pytest.approx(2.0)
    assert len(queues.history) == 2


def _first_slot_inputs(scenario):
    params = compute_weight(scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget)
    generator = ChannelGenerator(scenario.topology, scenario.source, scenario.e_H, scenario.bound_B, scenario.seed)
    channel = generator.next_slot()
    est = compute_sp_demands(channel, scenario.sp_config, "est")
    true = compute_sp_demands(channel, scenario.sp_config, "true")
    return params, channel, est, true


def test_run_slot_is_order_and_executor_independent():
    scenario = small_scenario()
    params, channel, est, true = _first_slot_inputs(scenario)
    q_a, q_b, q_c = QueueState(2), QueueState(2), QueueState(2)
    for q in (q_a, q_b, q_c):
        q.Z = np.array([1.0, 0.0])
    a = run_slot(0, q_a, channel, est, true, params, scenario.budget)
    b = run_slot(0, q_b, channel, est, true, params, scenario.budget, cell_order=[1, 0])
    with ThreadPoolExecutor(max_workers=2) as pool:
        c = run_slot(0, q_c, channel, est, true, params, scenario.budget, executor=pool)
    for other in (b, c):
        np.testing.assert_array_equal(a.powers, other.powers)
        np.testing.assert_array_equal(a.queues_after, other.queues_after)
        assert a.deviation_true == other.deviation_true
    with pytest.raises(ValueError):
        run_slot(0, QueueState(2), channel, est, true, params, scenario.budget, cell_order=[0, 0])


def test_run_slot_accounting():
    scenario = small_scenario()
    params, channel, est, true = _first_slot_inputs(scenario)
    slot = run_slot(0, QueueState(2), channel, est, true, params, scenario.budget)
    V = np.zeros((8, 4), dtype=complex)
    V[0:4, 0:2] = slot.solutions[0].V_star
    V[4:8, 2:4] = slot.solutions[1].V_star
    expected = np.linalg.norm(channel.true_H @ V - true.global_D) ** 2
    assert slot.deviation_true == pytest.approx(expected)
    assert slot.cell_residuals_true.sum() == pytest.approx(expected)
    assert np.all(slot.powers <= scenario.budget.p_max * (1 + 1e-12))
    received = np.abs(channel.true_H @ V) ** 2
    np.testing.assert_allclose(slot.signal + slot.interference, received.sum(axis=1))


def test_run_horizon_is_deterministic():
    a = run_horizon(small_scenario(), 15)
    b = run_horizon(small_scenario(), 15)
    assert a.horizon == 15
    np.testing.assert_array_equal(a.queue_history, b.queue_history)
    assert [s.deviation_true for s in a.slots] == [s.deviation_true for s in b.slots]
    assert all(s.matrices is None for s in a.slots)


def test_horizon_respects_power_and_queue_rules():
    scenario = small_scenario(p_bar=2.0, theta=1e-2)
    result = run_horizon(scenario, 40)
    for slot in result.slots:
        assert np.all(slot.powers <= 8.0 * (1 + 1e-12))
        np.testing.assert_allclose(
            slot.queues_after, np.maximum(slot.queues_before + slot.powers - 2.0, 0.0)
        )
    assert result.queue_history.shape == (41, 2)


def test_infinite_long_term_limit_pins_queues():
    result = run_horizon(small_scenario(p_bar=np.inf), 10)
    assert not np.any(result.queue_history)


def test_on_slot_sees_matrices():
    seen = []
    run_horizon(small_scenario(), 3, on_slot=lambda s: seen.append(s.matrices is not None), keep_matrices=False)
    assert seen == [True, True, True]


def _degenerate_zf_scenario(policy):
    topology = build_topology(cell_count=1, radius=100.0, antennas_per_bs=2, sp_count=1, users_per_sp=2)
    state = np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)
    budget = PowerBudget.uniform(1, 1.0, 0.5)
    return Scenario(
        topology=topology,
        source=DiscreteChannelSource([state], [1.0]),
        sp_config=SpConfig.uniform(topology, "zf", budget.p_max),
        budget=budget,
        e_H=0.0,
        theta=1e-2,
        seed=0,
        bound_B=2.0,
        zf_singular_policy=policy,
    )


def test_singular_zf_aborts_with_context():
    with pytest.raises(SimulationError) as info:
        run_horizon(_degenerate_zf_scenario("abort"), 3)
    assert info.value.slot == 0
    assert info.value.cell == 0


def test_singular_zf_falls_back_to_mrt():
    result = run_horizon(_degenerate_zf_scenario("mrt"), 3)
    assert [s.fallbacks for s in result.slots] == [1, 1, 1]


def test_scenario_requires_bound_source():
    topology = build_topology(cell_count=1, radius=100.0, antennas_per_bs=2, sp_count=1, users_per_sp=1)
    budget = PowerBudget.uniform(1, 1.0, 0.5)
    with pytest.raises(ValueError):
        Scenario(
            topology=topology,
            source=DiscreteChannelSource([np.ones((1, 2))], [1.0]),
            sp_config=SpConfig.uniform(topology, "mrt", budget.p_max),
            budget=budget,
            e_H=0.0,
            theta=1e-2,
            seed=0,
        )


def test_cell_weights_use_each_cells_own_gains():
    scenario = small_scenario(p_bar=5.0)
    topology, gains = scenario.topology, scenario.gains
    params = compute_weight(scenario.theta, topology, gains, scenario.sp_config, scenario.budget, weighting="cell")
    B_cell = cell_channel_bounds(topology, gains)
    np.testing.assert_allclose(params.bound_B_cell, B_cell)
    assert np.sum(B_cell ** 2) == pytest.approx(channel_bound(topology, gains) ** 2)
    np.testing.assert_allclose(params.epsilon_cell, 1e-3 * params.zeta_cell ** 2 * B_cell ** 2)
    np.testing.assert_allclose(params.U_cell, params.S_cell / params.epsilon_cell)
    np.testing.assert_allclose(params.weights, params.U_cell)
    # Every cell carries the same powers here, so U^c / U = B^2 / (B^c)^2 >= 1.
    np.testing.assert_allclose(params.U_cell / params.U, params.bound_B ** 2 / B_cell ** 2)
    assert np.all(params.U_cell >= params.U)


def test_network_weighting_keeps_one_weight():
    scenario = small_scenario(p_bar=5.0)
    params = compute_weight(
        scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget, weighting="network"
    )
    np.testing.assert_allclose(params.weights, params.U)
    assert params.epsilons.sum() == pytest.approx(params.epsilon)
    with pytest.raises(ValueError):
        compute_weight(
            scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget, weighting="global"
        )


def test_single_cell_weights_agree():
    topology = build_topology(cell_count=1, radius=250.0, antennas_per_bs=4, sp_count=2, users_per_sp=1)
    _, gains = build_channel_model(topology, 5)
    budget = PowerBudget.uniform(1, 8.0, 5.0)
    sp_config = SpConfig.uniform(topology, "mrt", budget.p_max)
    cell = compute_weight(1e-3, topology, gains, sp_config, budget, weighting="cell")
    network = compute_weight(1e-3, topology, gains, sp_config, budget, weighting="network")
    assert cell.weights[0] == pytest.approx(network.U)
    assert cell.epsilons.sum() == pytest.approx(network.epsilon)


def test_scenario_rejects_unknown_weighting():
    with pytest.raises(ValueError):
        dataclasses.replace(small_scenario(), weighting="global")


def test_slot_solves_with_the_cell_weight(monkeypatch):
    scenario = small_scenario()
    params = compute_weight(
        scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget, weighting="cell"
    )
    _, channel, est, true = _first_slot_inputs(scenario)
    seen = {}
    original = online_controller.solve_cell

    def recording_solve(inp):
        seen[len(seen)] = (inp.U, inp.lambda_hint)
        return original(inp)

    monkeypatch.setattr(online_controller, "solve_cell", recording_solve)
    run_slot(0, QueueState(2), channel, est, true, params, scenario.budget, delta_hat=0.4)
    delta = max(0.4, channel.delta_hat)
    for c in range(2):
        U, hint = seen[c]
        assert U == pytest.approx(params.U_cell[c])
        expected = params.U_cell[c] * params.bound_B ** 2 * (1 + delta) ** 2 * params.zeta_cell[c] / np.sqrt(8.0)
        assert hint == pytest.approx(expected)
        assert params.lambda_hint(c, delta) == pytest.approx(expected)


def test_bisection_bracket_follows_running_csi_error(monkeypatch):
    deltas = []
    original = online_controller._solve_one

    def recording_solve(c, channel, demand, Z, params, settings, delta):
        deltas.append(delta)
        return original(c, channel, demand, Z, params, settings, delta)

    monkeypatch.setattr(online_controller, "_solve_one", recording_solve)
    result = run_horizon(small_scenario(e_H=0.3), 12)
    running = np.maximum.accumulate([s.delta_hat for s in result.slots])
    np.testing.assert_allclose(deltas, np.repeat(running, 2))


def _rescaled_scenario(scale, weighting):
    scenario = small_scenario(p_bar=2.0, theta=1e-2)
    gains = scenario.gains
    beta = gains.beta.copy()
    # Every gain towards BS 1, so only BS 1's local channel changes.
    beta[:, 1] *= scale
    scaled = LargeScaleGains(beta, gains.distances, gains.shadowing_db)
    return Scenario(
        topology=scenario.topology,
        source=RayleighChannelSource(scenario.topology, scaled),
        sp_config=scenario.sp_config,
        budget=scenario.budget,
        e_H=scenario.e_H,
        theta=scenario.theta,
        seed=scenario.seed,
        gains=scaled,
        weighting=weighting,
    )


def test_cell_weighting_makes_power_control_gain_invariant():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s - %(message)s")
    base = run_horizon(_rescaled_scenario(1.0, "cell"), 30)
    strong = run_horizon(_rescaled_scenario(100.0, "cell"), 30)
    logger.info(f"Final queues: {base.queue_history[-1]} vs {strong.queue_history[-1]}")
    np.testing.assert_allclose(
        [s.powers for s in base.slots], [s.powers for s in strong.slots], rtol=1e-5, atol=1e-9
    )
    np.testing.assert_allclose(base.queue_history, strong.queue_history, rtol=1e-5, atol=1e-8)
    residual_base = np.array([s.cell_residuals_true for s in base.slots])
    residual_strong = np.array([s.cell_residuals_true for s in strong.slots])
    np.testing.assert_allclose(residual_base[:, 0], residual_strong[:, 0], rtol=1e-5)
    np.testing.assert_allclose(100.0 * residual_base[:, 1], residual_strong[:, 1], rtol=1e-5)

    # One network-wide weight couples BS 0 to BS 1's gains.
    base_net = run_horizon(_rescaled_scenario(1.0, "network"), 30)
    strong_net = run_horizon(_rescaled_scenario(100.0, "network"), 30)
    assert not np.allclose(base_net.queue_history, strong_net.queue_history, rtol=1e-3)


def test_compute_weight_logs_constants(caplog):
    scenario = small_scenario()
    with caplog.at_level(logging.INFO, logger="src.processors.online_controller"):
        compute_weight(scenario.theta, scenario.topology, scenario.gains, scenario.sp_config, scenario.budget)
    messages = [r.getMessage() for r in caplog.records]
    assert any(m.startswith("Algorithm weights") for m in messages)
    assert any("network weighting in use" in m for m in messages)


def test_work_per_slot_grows_linearly_with_cells(monkeypatch):
    from src.processors import inp_solver

    shapes = []
    original = inp_solver._svd

    def counting_svd(matrix):
        shapes.append(matrix.shape)
        return original(matrix)

    monkeypatch.setattr(inp_solver, "_svd", counting_svd)
    for cells in (1, 3, 7):
        shapes.clear()
        topology = build_topology(cell_count=cells, radius=250.0, antennas_per_bs=4, sp_count=2, users_per_sp=1)
        _, gains = build_channel_model(topology, 1)
        budget = PowerBudget.uniform(cells, 8.0, 5.0)
        scenario = Scenario(
            topology=topology,
            source=RayleighChannelSource(topology, gains),
            sp_config=SpConfig.uniform(topology, "mrt", budget.p_max),
            budget=budget,
            e_H=0.1,
            theta=1e-3,
            seed=1,
            gains=gains,
        )
        run_horizon(scenario, 4)
        # One thin SVD of the (K, N^c) local channel per cell and slot.
        assert len(shapes) == 4 * cells
        assert set(shapes) == {(topology.total_users, 4)}
