import logging

import numpy as np
import pytest

from src.processors.inp_solver import (
    CaseTag,
    SolverInput,
    SolverSettings,
    bisect_lambda,
    decompose,
    kkt_report,
    objective,
    power_curve,
    ridge_precoder,
    solve_cell,
)


def _complex(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def fista_oracle(inp: SolverInput, iterations: int = 20000) -> np.ndarray:
    """Accelerated projected gradient on the power ball, used as an independent reference."""
    H, G = inp.H_hat, inp.G_hat
    sigma_max = np.linalg.norm(H, 2)
    step = 1.0 / (2.0 * (inp.U * sigma_max ** 2 + inp.Z))
    radius = np.sqrt(inp.P_max)

    def project(V):
        norm = np.linalg.norm(V)
        return V if norm <= radius else V * (radius / norm)

    V = np.zeros((H.shape[1], G.shape[1]), dtype=complex)
    Y, t = V.copy(), 1.0
    for _ in range(iterations):
        gradient = 2.0 * inp.U * H.conj().T @ (H @ Y - G) + 2.0 * inp.Z * Y
        V_next = project(Y - step * gradient)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = V_next + ((t - 1.0) / t_next) * (V_next - V)
        V, t = V_next, t_next
    return V


@pytest.mark.parametrize(
    "K, N, Z, P_max",
    [
        (3, 6, 0.0, 50.0),   # underdetermined, unconstrained
        (3, 6, 0.0, 0.05),   # underdetermined, power active
        (6, 3, 0.0, 50.0),   # overdetermined
        (4, 4, 0.7, 50.0),   # ridge, inactive
        (4, 4, 0.7, 0.01),   # ridge, active
    ],
)
def test_solver_matches_projected_gradient(K, N, Z, P_max):
    rng = np.random.default_rng(K * 10 + N)
    inp = SolverInput(H_hat=_complex(rng, (K, N)), G_hat=_complex(rng, (K, 2)), Z=Z, U=1.0, P_max=P_max)
    out = solve_cell(inp)
    reference = fista_oracle(inp)
    assert out.achieved_power <= P_max * (1 + 1e-12)
    assert objective(inp, out.V_star) <= objective(inp, reference) + 1e-7 * max(1.0, objective(inp, reference))
    assert objective(inp, out.V_star) == pytest.approx(objective(inp, reference), rel=1e-4, abs=1e-8)


def test_case_tags():
    rng = np.random.default_rng(2)
    H_wide, H_tall = _complex(rng, (2, 5)), _complex(rng, (5, 2))
    G = _complex(rng, (5, 2))
    assert solve_cell(SolverInput(H_wide, G[:2], 0.0, 1.0, 100.0)).case_tag == CaseTag.MINNORM_UNDERDETERMINED
    assert solve_cell(SolverInput(H_tall, G, 0.0, 1.0, 100.0)).case_tag == CaseTag.EXACT_OVERDETERMINED
    assert solve_cell(SolverInput(H_tall, G, 1.0, 1.0, 100.0)).case_tag == CaseTag.RIDGE_INACTIVE
    active = solve_cell(SolverInput(H_tall, G, 1.0, 1.0, 1e-4))
    assert active.case_tag == CaseTag.RIDGE_ACTIVE_BISECTION
    assert active.lambda_star > 0


def test_scalar_closed_form():
    h, g = 2.0 + 1.0j, 3.0 - 0.5j
    Z, U = 0.4, 2.0
    inp = SolverInput(np.array([[h]]), np.array([[g]]), Z, U, 100.0)
    out = solve_cell(inp)
    expected = np.conj(h) * g / (abs(h) ** 2 + Z / U)
    assert out.V_star[0, 0] == pytest.approx(expected)
    assert out.lambda_star == 0.0


def test_scalar_active_power_constraint():
    h, g = 1.0 + 0j, 4.0 + 0j
    P_max = 1.0
    inp = SolverInput(np.array([[h]]), np.array([[g]]), 0.0, 1.0, P_max)
    out = solve_cell(inp)
    # |g| / (1 + lambda) = 1  =>  lambda = 3
    assert out.lambda_star == pytest.approx(3.0, rel=1e-6)
    assert abs(out.V_star[0, 0]) ** 2 == pytest.approx(P_max, rel=1e-8)


def test_bisection_agrees_with_dense_grid():
    rng = np.random.default_rng(9)
    H, G = _complex(rng, (4, 6)), _complex(rng, (4, 3))
    Z, U, P_max = 0.2, 3.0, 0.02
    decomposition = decompose(H, G)
    lam, _ = bisect_lambda(decomposition, Z, U, P_max, SolverSettings(power_tolerance=1e-12))
    grid = np.linspace(0.0, 4.0 * lam, 40001)
    powers = np.array([power_curve(decomposition, Z, U, x) for x in grid])
    assert np.all(np.diff(powers) <= 1e-15)
    crossing = grid[np.argmax(powers <= P_max)]
    assert abs(lam - crossing) <= grid[1] - grid[0]
    assert P_max * (1 - 1e-12) <= power_curve(decomposition, Z, U, lam) <= P_max


def test_lambda_hint_gives_same_answer():
    rng = np.random.default_rng(10)
    H, G = _complex(rng, (3, 5)), _complex(rng, (3, 3))
    base = solve_cell(SolverInput(H, G, 0.0, 1.0, 1e-3))
    hinted = solve_cell(SolverInput(H, G, 0.0, 1.0, 1e-3, lambda_hint=1e-6))
    assert hinted.lambda_star == pytest.approx(base.lambda_star, rel=1e-6)


def test_kkt_report_passes():
    rng = np.random.default_rng(11)
    for Z, P_max in [(0.0, 10.0), (0.0, 1e-3), (0.5, 10.0), (0.5, 1e-3)]:
        inp = SolverInput(_complex(rng, (3, 4)), _complex(rng, (3, 2)), Z, 1.0, P_max)
        out = solve_cell(inp)
        report = kkt_report(inp, out)
        assert report.passes(), report


def test_rank_deficient_channel_uses_pseudo_inverse():
    rng = np.random.default_rng(12)
    row = _complex(rng, (1, 4))
    H = np.vstack([row, 2 * row, _complex(rng, (1, 4))])
    G = _complex(rng, (3, 3))
    out = solve_cell(SolverInput(H, G, 0.0, 1.0, 1e3))
    assert out.singular
    np.testing.assert_allclose(out.V_star, np.linalg.pinv(H) @ G, atol=1e-10)


def test_zero_demand_gives_zero_precoder():
    H = np.ones((2, 3), dtype=complex)
    out = solve_cell(SolverInput(H, np.zeros((2, 2)), 1.0, 1.0, 1.0))
    assert not np.any(out.V_star)
    assert out.achieved_power == 0.0


def test_ridge_precoder_matches_normal_equations():
    rng = np.random.default_rng(13)
    H, G = _complex(rng, (5, 3)), _complex(rng, (5, 2))
    mu = 0.3
    expected = np.linalg.solve(H.conj().T @ H + mu * np.eye(3), H.conj().T @ G)
    np.testing.assert_allclose(ridge_precoder(decompose(H, G), mu), expected, atol=1e-12)


def test_input_validation():
    H = np.ones((2, 3), dtype=complex)
    G = np.ones((2, 2), dtype=complex)
    with pytest.raises(ValueError):
        SolverInput(H, G, -1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        SolverInput(H, G, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        SolverInput(H, np.ones((3, 2)), 0.0, 1.0, 1.0)
    H_bad = H.copy()
    H_bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        SolverInput(H_bad, G, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        SolverSettings(power_tolerance=0.0)


def test_early_stopped_bisection_lands_in_power_band(caplog):
    rng = np.random.default_rng(14)
    H, G = _complex(rng, (4, 6)), _complex(rng, (4, 4))
    for Z in (0.0, 0.3):
        settings = SolverSettings(max_iterations=1)
        with caplog.at_level(logging.DEBUG, logger="src.processors.inp_solver"):
            out = solve_cell(SolverInput(H, G, Z, 2.0, 1e-3, settings=settings))
        assert out.case_tag == CaseTag.RIDGE_ACTIVE_BISECTION
        assert 1e-3 * (1 - settings.power_tolerance) <= out.achieved_power <= 1e-3 * (1 + 1e-12)
    assert any("rescaling V" in r.getMessage() for r in caplog.records)
