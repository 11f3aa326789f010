from dataclasses import replace

import numpy as np
import pytest

from sublab.coefficients import (
    Box,
    ControlSet,
    DeclaredLipschitz,
    JumpAtoms,
    JumpKernel,
    TruncationFunction,
    check_growth_bound,
    check_integrability,
    check_local_boundedness,
    check_symbol_uniform_continuity,
    check_tightness,
    default_gamma,
    estimate_lipschitz_constants,
    eval_symbol,
    modified_drift,
    theta_triplets,
    transport_drift,
)
from sublab.errors import InputError
from sublab.scenarios import get_scenario


def test_truncation_is_identity_inside_unit_ball():
    h = TruncationFunction()
    y = np.array([[0.3, -0.4], [0.0, 1.0]])
    np.testing.assert_array_equal(h(y), y)


def test_truncation_projects_onto_unit_sphere():
    h = TruncationFunction()
    np.testing.assert_allclose(h(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_allclose(h(np.array([-5.0])), [-1.0])


def test_truncation_empirical_lipschitz_within_bound():
    h = TruncationFunction()
    assert h.empirical_lipschitz(dim=2, n_pairs=5000, seed=3) <= h.lipschitz_bound


def test_control_set_rejects_duplicates_and_bad_indices():
    with pytest.raises(InputError):
        ControlSet.from_values([[1.0], [1.0]])
    controls = ControlSet.from_values([[0.5], [1.0]])
    assert controls.check_index(1) == 1
    with pytest.raises(InputError):
        controls.check_index(2)


def test_kernel_rejects_negative_rates():
    with pytest.raises(InputError):
        JumpKernel(atoms=(JumpAtoms.of([[1.0]], [-1.0]),), dim=1, mark_dim=1)


def test_kernel_rejects_indefinite_small_jump_moment():
    with pytest.raises(InputError):
        JumpKernel(
            atoms=(JumpAtoms.empty(1),),
            dim=1,
            mark_dim=1,
            second_moments=(np.array([[-1.0]]),),
        )


def test_symbol_matches_closed_form_for_constant_levy(linear_levy):
    b, s, j, w = 0.1, 0.4, 0.5, 1.0
    xi = 1.3
    q = eval_symbol(linear_levy.field, 0, [0.7], [xi])
    assert q.re == pytest.approx(0.5 * s**2 * xi**2 + w * (1 - np.cos(j * xi)), abs=1e-14)
    assert q.im == pytest.approx(-b * xi + w * (j * xi - np.sin(j * xi)), abs=1e-14)


def test_symbol_vanishes_at_zero_frequency(mixed):
    for f in range(len(mixed.controls)):
        q = eval_symbol(mixed.field, f, [0.3], [0.0])
        assert abs(q) == 0.0


@pytest.mark.parametrize("name,params", [("linear_levy", {}), ("poisson_band", {}), ("mixed_jump_diffusion", {"dim": 2})])
def test_symbol_is_conjugate_symmetric_in_frequency(name, params):
    sc = get_scenario(name, params)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, xi = rng.normal(size=sc.dim), rng.normal(scale=2.0, size=sc.dim)
        for f in range(len(sc.controls)):
            q, q_neg = eval_symbol(sc.field, f, x, xi), eval_symbol(sc.field, f, x, -xi)
            assert q_neg.re == pytest.approx(q.re, abs=1e-12)
            assert q_neg.im == pytest.approx(-q.im, abs=1e-12)


def test_eval_symbol_rejects_batches(g_heat):
    with pytest.raises(InputError):
        eval_symbol(g_heat.field, 0, [[0.0], [1.0]], [1.0])


def test_modified_and_transport_drift_for_unit_jumps(poisson_band):
    for f, lam in enumerate([0.5, 1.5]):
        # gamma = 1 <= 1: k - h(k) = 0, so b~ = b = lam; the transport drift cancels
        np.testing.assert_allclose(modified_drift(poisson_band.field, f, [0.0]), [lam])
        np.testing.assert_allclose(transport_drift(poisson_band.field, f, [0.0]), [0.0], atol=1e-15)


def test_modified_drift_subtracts_truncated_large_jumps():
    sc = get_scenario("poisson_band", {"jump": 2.0})
    # gamma = 2 > 1: b~ = lam h(2) - lam h(2) = 0
    np.testing.assert_allclose(modified_drift(sc.field, 1, [[0.0], [3.0]]), [[0.0], [0.0]], atol=1e-15)


def test_theta_triplets_drop_zero_jumps(zero_levy, g_heat):
    (triplet,) = theta_triplets(zero_levy.field, [1.0])
    assert triplet.jumps == []
    heat = theta_triplets(g_heat.field, [0.0])
    assert [t.covariance[0, 0] for t in heat] == pytest.approx([0.25, 1.0])


def test_symbol_continuity_passes_for_g_heat(g_heat):
    report = check_symbol_uniform_continuity(g_heat.field, [0.5, 1.0, 2.0, 4.0], samples_per_shell=32)
    assert report.passed
    # |q| = sigma^2 |xi|^2 / 2 attains its sup on the boundary sphere
    assert report.sup_values[0] == pytest.approx(0.5 * 1.0 * 4.0)


def test_symbol_continuity_rejects_unsorted_radii(g_heat):
    with pytest.raises(InputError):
        check_symbol_uniform_continuity(g_heat.field, [2.0, 1.0], samples_per_shell=4)


def test_tightness_for_poisson_band(poisson_band):
    report = check_tightness(poisson_band.field.kernel, [0.5, 1.0], [1.0, 2.0])
    assert report.small_mass == pytest.approx([0.0, 1.5])
    assert report.tail_mass == [0.0, 0.0]
    assert report.max_gamma == 1.0
    assert report.integrability.first_moment == pytest.approx(1.5)
    # the kernel's own kappa is 1: the unit atoms sit inside it
    assert report.kernel_kappa == 1.0
    assert report.kernel_small_mass == pytest.approx(1.5)
    assert report.passed


def test_tightness_at_kernel_kappa_for_mixed(mixed):
    report = check_tightness(mixed.field.kernel, [1.0], [1.0])
    assert report.kernel_kappa == 0.5
    assert report.kernel_small_mass == 0.0


def test_tightness_rejects_kappa_out_of_range(poisson_band):
    with pytest.raises(InputError):
        check_tightness(poisson_band.field.kernel, [1.5], [1.0])


def test_integrability_for_mixed_kernel(mixed):
    report = check_integrability(mixed.field.kernel)
    gamma = 2.0 * np.array([0.5, 0.8])
    assert report.integrability == pytest.approx(np.sum(np.minimum(gamma**2, 1.0)))
    assert report.first_moment == pytest.approx(np.sum(gamma))
    assert report.passed


def test_lipschitz_constants_vanish_for_constant_coefficients(drift_band):
    est = estimate_lipschitz_constants(drift_band.field, drift_band.grid.box, n_pairs=200)
    assert est.btilde == 0.0
    assert est.sigma == 0.0
    assert est.k_over_gamma == 0.0
    assert est.pairs_used == 200
    assert est.declared == {"btilde": 0.0, "sigma": 0.0, "k_over_gamma": 0.0}
    assert est.within_declared is True


def test_lipschitz_estimates_compared_with_declared_constants(mixed):
    assert estimate_lipschitz_constants(mixed.field, mixed.grid.box, n_pairs=50).within_declared is None
    field = replace(mixed.field, declared_lipschitz=DeclaredLipschitz(k_over_gamma=0.0))
    est = estimate_lipschitz_constants(field, mixed.grid.box, n_pairs=200, seed=1)
    assert est.declared == {"k_over_gamma": 0.0}
    assert est.within_declared is False


def test_lipschitz_constants_for_state_dependent_jumps(mixed):
    est = estimate_lipschitz_constants(mixed.field, mixed.grid.box, n_pairs=500, seed=1)
    # |k(x) - k(y)| <= s |z| |x - y| and gamma = 2 s_max |z|
    assert 0.0 < est.k_over_gamma <= 0.5 + 1e-12
    assert np.isfinite(est.btilde)


def test_lipschitz_rejects_box_of_wrong_dimension(drift_band):
    with pytest.raises(InputError):
        estimate_lipschitz_constants(drift_band.field, Box.cube(1.0, 2), n_pairs=10)


def test_growth_bound_holds_for_mixed(mixed):
    report = check_growth_bound(mixed.field, mixed.grid.box, n_samples=128)
    assert report.passed
    assert report.max_ratio <= 1.0


def test_local_boundedness_of_g_heat(g_heat):
    report = check_local_boundedness(g_heat.field, g_heat.grid.box, n_samples=16)
    assert report.sup_norm == pytest.approx(1.0)
    assert report.passed


def test_default_gamma_satisfies_growth_bound(linear_levy):
    bare = replace(linear_levy.field, kernel=replace(linear_levy.field.kernel, gamma=None))
    with pytest.raises(InputError):
        bare.kernel.gamma_values(0)
    derived = default_gamma(bare, linear_levy.grid.box, n_samples=64, seed=5)
    assert derived.kernel.gamma_values(0)[0] > 0.0
    assert check_growth_bound(derived, linear_levy.grid.box, n_samples=64, seed=5).passed


def test_field_rejects_wrong_point_dimension(g_heat):
    with pytest.raises(InputError):
        g_heat.field.b(0, np.zeros((3, 2)))
