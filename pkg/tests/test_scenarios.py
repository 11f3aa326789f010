import math

import numpy as np
import pytest
from pydantic import ValidationError

from sublab.coefficients import check_growth_bound, check_tightness
from sublab.errors import InputError
from sublab.scenarios import (
    g_heat_lattice_value,
    gaussian_expectation,
    get_payoff,
    get_scenario,
    list_payoffs,
    list_scenarios,
    poisson_mixture,
)

NAMES = ["linear_levy", "g_brownian", "drift_band", "poisson_band", "mixed_jump_diffusion"]


def test_registry_lists_every_scenario_with_schema():
    infos = list_scenarios()
    assert [i.name for i in infos] == NAMES
    for info in infos:
        assert "conditions" in info.notes
        assert info.parameters["type"] == "object"


def test_unknown_scenario_is_an_input_error():
    with pytest.raises(InputError):
        get_scenario("heston")


@pytest.mark.parametrize(
    "name,params",
    [
        ("g_brownian", {"sigma_low": 1.5, "sigma_high": 1.0}),
        ("drift_band", {"b_low": 1.0, "b_high": -1.0}),
        ("poisson_band", {"jump": 0.0}),
        ("mixed_jump_diffusion", {"dim": 3}),
        ("linear_levy", {"volatility": 0.2}),
    ],
)
def test_invalid_parameters_are_rejected(name, params):
    with pytest.raises(ValidationError):
        get_scenario(name, params)


def test_payoff_registry():
    assert "softplus" in list_payoffs()
    bump = get_payoff("bump")
    assert bump.support_radius == 1.0
    np.testing.assert_allclose(bump(np.array([[0.0], [0.5], [2.0]])), [1.0, 0.5625, 0.0])
    with pytest.raises(InputError):
        get_payoff("digital")


def test_gaussian_expectation_moments():
    quad = get_payoff("quadratic")
    np.testing.assert_allclose(gaussian_expectation(quad, [[1.0], [-2.0]], 0.5), [1.25, 4.25], rtol=1e-12)
    two_d = gaussian_expectation(quad, [[0.0, 1.0]], 0.5)
    assert two_d[0] == pytest.approx(1.0 + 2 * 0.25, rel=1e-12)


def test_gaussian_expectation_without_noise_is_the_payoff():
    tanh = get_payoff("tanh")
    means = np.array([[-0.3], [0.0], [1.7]])
    np.testing.assert_array_equal(gaussian_expectation(tanh, means, 0.0), np.tanh(means[:, 0]))


def test_poisson_mixture_matches_generating_function():
    out = poisson_mixture(get_payoff("one_minus_exp"), [[0.0]], np.array([1.0]), 1.5)
    assert out[0] == pytest.approx(1.0 - math.exp(-1.5 * (1.0 - math.exp(-1.0))), abs=1e-12)


def test_g_brownian_oracle_uses_extreme_volatility(g_heat):
    X = np.array([[0.0], [1.0]])
    np.testing.assert_allclose(g_heat.oracle("quadratic", X, 0.25), X[:, 0] ** 2 + 0.25, rtol=1e-12)
    np.testing.assert_allclose(g_heat.oracle("neg_quadratic", X, 0.25), -(X[:, 0] ** 2) - 0.0625, rtol=1e-12)
    assert g_heat.oracle("tanh", X, 0.25) is None


def test_drift_band_oracle_uses_extreme_drift(drift_band):
    X = np.array([[0.3]])
    up = drift_band.oracle("tanh", X, 0.5)
    direct = gaussian_expectation(get_payoff("tanh"), X + 0.5, 0.5 * math.sqrt(0.5))
    np.testing.assert_allclose(up, direct)
    assert drift_band.oracle("cosine", X, 0.5) is None


def test_linear_levy_without_jumps_agrees_with_g_brownian_on_a_point_band():
    levy = get_scenario("linear_levy", {"drift": 0.0, "sigma": 0.7, "jump": 0.0, "rate": 0.0})
    heat = get_scenario("g_brownian", {"sigma_low": 0.7, "sigma_high": 0.7})
    X = np.array([[-0.5], [0.25]])
    np.testing.assert_allclose(levy.oracle("quadratic", X, 0.4), heat.oracle("quadratic", X, 0.4), atol=1e-6)
    assert len(heat.controls) == 1


def test_lattice_dp_reproduces_g_heat_values():
    quad = get_payoff("quadratic")
    assert g_heat_lattice_value(quad, 0.0, 0.25, [0.5, 1.0]) == pytest.approx(0.25, abs=1e-8)
    assert g_heat_lattice_value(get_payoff("neg_quadratic"), 0.0, 0.25, [0.5, 1.0]) == pytest.approx(-0.0625, abs=1e-8)
    # non-convex payoff: switching beats either constant volatility
    cosine = get_payoff("cosine")
    switched = g_heat_lattice_value(cosine, 0.0, 0.25, [0.5, 1.0])
    assert switched >= gaussian_expectation(cosine, [[0.0]], 0.5 * math.sqrt(0.25))[0] - 1e-3


@pytest.mark.parametrize("name", NAMES)
def test_bundled_scenarios_satisfy_their_conditions(name):
    sc = get_scenario(name)
    assert check_tightness(sc.field.kernel, [0.5], [1.0, 2.0]).passed
    assert check_growth_bound(sc.field, sc.grid.box, n_samples=64).passed
    assert sc.x0.shape == (sc.dim,)
    assert sc.default_payoff in list_payoffs()


def test_two_dimensional_variants():
    mixed = get_scenario("mixed_jump_diffusion", {"dim": 2})
    assert mixed.dim == 2
    assert mixed.grid.n == (41, 41)
    heat = get_scenario("g_brownian", {"dim": 2})
    X = np.array([[0.0, 0.0]])
    assert heat.oracle("quadratic", X, 0.25)[0] == pytest.approx(0.5)
