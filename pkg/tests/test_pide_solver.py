import math

import numpy as np
import pytest

from sublab.coefficients import CoefficientField, ControlSet, JumpAtoms, JumpKernel
from sublab.errors import InputError, StencilError, UnsupportedError
from sublab.pide_solver import (
    MonotoneScheme,
    SchemeConfig,
    SpatialGrid,
    ValueField,
    cfl_timestep,
    refine_study,
    solve,
    step_explicit,
)
from sublab.scenarios import get_payoff, get_scenario

POISSON_BAND_VALUE = 1.0 - math.exp(-1.5 * (1.0 - math.exp(-1.0)))


def test_grid_geometry():
    grid = SpatialGrid.uniform(-1.0, 1.0, 5, dim=2)
    assert grid.size == 25
    np.testing.assert_allclose(grid.spacing, [0.5, 0.5])
    assert grid.nodes().shape == (25, 2)
    assert grid.refined().n == (9, 9)
    # middle third of [-1, 1] is [-1/3, 1/3]: only the center node
    assert grid.interior_mask().sum() == 1


def test_grid_rejects_degenerate_input():
    with pytest.raises(InputError):
        SpatialGrid.uniform(0.0, 1.0, 2)
    with pytest.raises(InputError):
        SpatialGrid(lo=(1.0,), hi=(0.0,), n=(5,))


def test_interpolation_is_exact_for_affine_functions_and_clamps_outside():
    grid = SpatialGrid.uniform(-1.0, 1.0, 9, dim=2)
    u = ValueField.from_function(grid, lambda X: 2.0 * X[:, 0] - X[:, 1] + 0.5)
    P = np.array([[0.13, -0.77], [0.999, 0.2], [5.0, 0.0]])
    np.testing.assert_allclose(u.at(P[:2]), 2.0 * P[:2, 0] - P[:2, 1] + 0.5)
    assert u.at(P[2:])[0] == pytest.approx(2.0 * 1.0 - 0.0 + 0.5)
    rows = grid.interpolation_matrix(P).sum(axis=1)
    np.testing.assert_allclose(np.asarray(rows).ravel(), 1.0)


def test_value_field_frame_columns():
    grid = SpatialGrid.uniform(0.0, 1.0, 3)
    frame = ValueField.from_function(grid, lambda X: X[:, 0] ** 2).to_frame()
    assert list(frame.columns) == ["x1", "value"]
    assert frame["value"].tolist() == [0.0, 0.25, 1.0]


@pytest.mark.parametrize("name", ["g_brownian", "drift_band", "poisson_band", "linear_levy", "mixed_jump_diffusion"])
def test_constants_are_preserved_exactly(name):
    sc = get_scenario(name)
    psi = ValueField(grid=sc.grid, t=0.0, values=np.full(sc.grid.size, 0.37))
    out = solve(psi, sc.field, 0.1)
    assert np.all(out.final.values == 0.37)


def test_discrete_maximum_principle(drift_band):
    psi = ValueField.from_function(drift_band.grid, get_payoff("tanh"))
    solution = solve(psi, drift_band.field, drift_band.horizon, output_times=[0.1, 0.3])
    for layer in solution.trajectory:
        assert layer.values.min() >= psi.values.min()
        assert layer.values.max() <= psi.values.max()


def test_zero_coefficients_leave_data_unchanged(zero_levy):
    psi = ValueField.from_function(zero_levy.grid, get_payoff("bump"))
    assert cfl_timestep(zero_levy.field, zero_levy.grid, SchemeConfig(), 0.5) == 0.5
    out = solve(psi, zero_levy.field, 0.5)
    np.testing.assert_array_equal(out.final.values, psi.values)


@pytest.mark.parametrize("fixture", ["g_heat", "drift_band"])
@pytest.mark.parametrize("payoff", ["bump", "quadratic"])
def test_symmetric_coefficients_keep_even_data_even(request, fixture, payoff):
    sc = request.getfixturevalue(fixture)
    psi = ValueField.from_function(sc.grid, get_payoff(payoff))
    solution = solve(psi, sc.field, sc.horizon, output_times=[sc.horizon / 2])
    for layer in solution.trajectory:
        np.testing.assert_allclose(layer.values, layer.values[::-1], rtol=0.0, atol=1e-10)


@pytest.mark.parametrize("fixture", ["poisson_band", "mixed"])
def test_solution_is_monotone_in_the_data(request, fixture):
    sc = request.getfixturevalue(fixture)
    psi = ValueField.from_function(sc.grid, get_payoff("bump"))
    lift = np.random.default_rng(11).uniform(0.0, 0.3, sc.grid.size)
    phi = ValueField(grid=sc.grid, t=0.0, values=psi.values + lift)
    lower = solve(psi, sc.field, 0.25).final.values
    upper = solve(phi, sc.field, 0.25).final.values
    assert np.all(lower <= upper + 1e-12)


def test_output_times_and_policy_record(g_heat):
    psi = ValueField.from_function(g_heat.grid, get_payoff("quadratic"))
    solution = solve(psi, g_heat.field, 0.25, output_times=[0.05, 0.125])
    assert [layer.t for layer in solution.trajectory] == pytest.approx([0.05, 0.125, 0.25])
    record = solution.policy
    assert record.choice.shape == (solution.summary.n_steps, g_heat.grid.size)
    assert record.times[0] == 0.0
    assert np.all(np.diff(record.times) > 0)
    assert record.times[-1] + record.steps[-1] == pytest.approx(0.25)
    assert solution.summary.wall_time is None


def test_g_heat_quadratic_matches_closed_form(g_heat):
    psi = ValueField.from_function(g_heat.grid, get_payoff("quadratic"))
    solution = solve(psi, g_heat.field, 0.25)
    assert solution.value_at([0.0]) == pytest.approx(0.25, abs=2e-2)
    interior = g_heat.grid.interior_mask()
    # convex data: the upper volatility is chosen on the interior
    assert np.mean(solution.policy.choice[:, interior] == 1) >= 0.95


def test_poisson_band_matches_generating_function(poisson_band):
    psi = ValueField.from_function(poisson_band.grid, get_payoff("one_minus_exp"))
    solution = solve(psi, poisson_band.field, 1.0)
    assert solution.value_at([0.0]) == pytest.approx(POISSON_BAND_VALUE, abs=2e-2)
    assert solution.summary.dt_max <= 1e-2


def test_step_explicit_rejects_steps_above_cfl(g_heat):
    config = SchemeConfig()
    scheme = MonotoneScheme(g_heat.field, g_heat.grid, config)
    dt = cfl_timestep(g_heat.field, g_heat.grid, config, 1.0, scheme=scheme)
    u = ValueField.from_function(g_heat.grid, get_payoff("cosine"))
    assert step_explicit(u, g_heat.field, config, dt, scheme=scheme).t == pytest.approx(dt)
    with pytest.raises(InputError):
        step_explicit(u, g_heat.field, config, 2.0 * dt, scheme=scheme)


def test_cross_diffusion_without_diagonal_dominance_raises():
    loading = np.array([[1.0, 0.0], [2.0, 0.0]])  # a = [[1, 2], [2, 4]]
    field = CoefficientField(
        dim=2,
        noise_dim=2,
        controls=ControlSet.from_values([[0.0]]),
        drift=lambda f, X: np.zeros((len(X), 2)),
        diffusion=lambda f, X: np.broadcast_to(loading, (len(X), 2, 2)).copy(),
        jump=lambda f, X, Z: np.zeros((len(X), len(Z), 2)),
        kernel=JumpKernel(atoms=(JumpAtoms.empty(2),), dim=2, mark_dim=2),
        name="skewed",
    )
    with pytest.raises(StencilError) as info:
        MonotoneScheme(field, SpatialGrid.uniform(-1.0, 1.0, 5, dim=2), SchemeConfig())
    assert info.value.control == 0
    assert len(info.value.node) == 2


def test_two_dimensional_correlated_diffusion_is_monotone():
    sc = get_scenario("mixed_jump_diffusion", {"dim": 2})
    psi = ValueField.from_function(sc.grid, get_payoff("bump"))
    out = solve(psi, sc.field, 0.05)
    assert out.final.values.min() >= 0.0
    assert out.final.values.max() <= 1.0


def test_clamped_jump_reads_are_counted(poisson_band):
    scheme = MonotoneScheme(poisson_band.field, poisson_band.grid, SchemeConfig())
    # unit jumps leave [-3, 9] from the 20 nodes in (8, 9], for each of the two controls
    assert scheme.clamp_reads == 2 * 20


def test_scheme_config_validation():
    with pytest.raises(InputError):
        SchemeConfig(cfl_safety=1.5)
    with pytest.raises(InputError):
        SchemeConfig(max_timestep=0.0)
    with pytest.raises(InputError):
        SchemeConfig(kappa=1.0)


def test_refinement_study_converges_for_drift_band(drift_band):
    report = refine_study(drift_band, levels=2)
    assert report.passed
    assert report.errors[1] < report.errors[0]
    assert report.spacings[1] == pytest.approx(report.spacings[0] / 2)


def test_refinement_study_for_pure_transport():
    sc = get_scenario("drift_band", {"b_low": 1.0, "b_high": 1.0, "sigma": 0.0})
    report = refine_study(sc, levels=3, payoff="tanh")
    assert report.passed
    assert report.errors[0] <= 1e-2
    # first-order upwinding at a fixed dt/dx ratio
    assert all(r >= 1.8 for r in report.ratios)
    psi = ValueField.from_function(sc.grid, get_payoff("tanh"))
    assert solve(psi, sc.field, 0.5).value_at([0.0]) == pytest.approx(math.tanh(0.5), abs=1e-2)


def test_refinement_study_without_motion_is_exact(zero_levy):
    report = refine_study(zero_levy, levels=2, payoff="tanh")
    assert report.errors == [0.0, 0.0]
    assert report.passed


def test_refinement_study_requires_an_oracle(mixed):
    with pytest.raises(UnsupportedError):
        refine_study(mixed, levels=2)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["linear_levy", "poisson_band", "g_brownian"])
def test_refinement_study_three_levels(name):
    sc = get_scenario(name)
    payoff = "softplus" if name == "g_brownian" else None
    assert refine_study(sc, levels=3, payoff=payoff).passed
