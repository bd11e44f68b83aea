"""
Leafwise Dirichlet form, Laplacian, heat semigroup and their checks.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from dirichlet import (
    assemble,
    assemble_leaves,
    carre_du_champ,
    dirichlet_domain,
    dirichlet_interval_kernel,
    harmonicity,
    heat_flux,
    heat_operator,
    intrinsic_distance,
    intrinsic_distance_lp,
    laplacian,
    leafwise_gradient,
    neumann_interval_flux,
    poisson_cutoff,
    pullback,
    pullback_map,
    quasi_invariance_report,
    superharmonic_test,
    varadhan_check,
    varadhan_times,
    zero_energy_indicator,
)
from dynamics import DAMap, attractor_sample
from errors import DomainError, NonConformalError, SRBError
from leafgeom import build_rectangle, image_rectangle, project_to_leaves
from srb import distortion_constants, estimate_holder, sample_holder_pairs


def line(n_nodes, length=1.0, density=None):
    """One leaf of the given arc length with constant (or given) density."""
    h = length / (n_nodes - 1)
    rho = np.ones(n_nodes) if density is None else density
    return assemble_leaves(h, [rho], weights=[1.0])


@pytest.fixture(scope="module")
def bumpy():
    """Three leaves of different lengths and non-constant densities."""
    rng = np.random.default_rng(4)
    sizes = [33, 17, 25]
    densities = [1.0 + 0.5 * rng.random(n) for n in sizes]
    return assemble_leaves([0.02, 0.03, 0.025], densities, weights=[0.5, 0.3, 0.2])


def test_form_matrix_matches_edge_fluxes(bumpy):
    form, _ = bumpy
    u = np.random.default_rng(1).standard_normal(form.n_nodes)
    A = form.matrix().toarray()
    assert np.allclose(A, A.T)
    assert np.allclose(A @ u, form.apply(u), atol=1e-12)
    assert np.array_equal(form.apply(np.full(form.n_nodes, 3.0)), np.zeros(form.n_nodes))
    assert np.allclose(np.diag(A), form.diagonal())


def test_gauss_green(bumpy):
    form, measure = bumpy
    rng = np.random.default_rng(2)
    u, w = rng.standard_normal((2, form.n_nodes))
    v = u + 0.5 * w
    L = laplacian(form, measure)
    assert form.bilinear(u, v) == pytest.approx(u @ form.apply(v), rel=1e-12)
    assert measure.inner(L @ u, v) == pytest.approx(-form.bilinear(u, v), rel=1e-10)
    assert np.allclose(L.matrix() @ u, L.apply(u), atol=1e-9)
    assert np.allclose(L.matrix().sum(axis=1), 0.0, atol=1e-9)


def test_total_mass_is_one(bumpy, cat_rect, cat_tables):
    _, measure = bumpy
    assert measure.total == pytest.approx(1.0, rel=1e-14)
    _, cat_measure = assemble(cat_rect, cat_tables)
    assert cat_measure.total == pytest.approx(1.0, rel=1e-14)


def test_assemble_needs_weights_and_tables(cat_rect, cat_tables):
    with pytest.raises(SRBError):
        assemble(cat_rect, cat_tables[:3])
    with pytest.raises(SRBError):
        assemble(replace(cat_rect, quotient_weights=None), cat_tables)


def test_energy_is_the_sum_of_leaf_energies(bumpy):
    form, measure = bumpy
    u = np.random.default_rng(3).standard_normal(form.n_nodes)
    parts = [form.leaf_form(j).energy(u[sl]) for j, sl in enumerate(form.leaf_slices)]
    assert form.energy(u) == sum(parts)
    hop = heat_operator(form, measure)
    v = hop.heat(0.01, u)
    for j, sl in enumerate(form.leaf_slices):
        leaf_hop = heat_operator(form.leaf_form(j), measure.leaf(j))
        assert np.allclose(v[sl], leaf_hop.heat(0.01, u[sl]), rtol=0, atol=1e-14)


def test_semigroup_is_markov_and_symmetric(bumpy):
    form, measure = bumpy
    hop = heat_operator(form, measure)
    P = hop.transition_matrix(0.002)
    Q = hop.transition_matrix(0.003)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert P.min() >= -1e-12
    assert np.allclose(P @ Q, hop.transition_matrix(0.005), atol=1e-12)
    MP = measure.masses[:, None] * P
    assert np.allclose(MP, MP.T, atol=1e-14)
    assert np.allclose(hop.heat(0.5, np.ones(form.n_nodes)), 1.0, atol=1e-13)
    assert np.allclose(hop.transition_row(5, 0.002), P[5], atol=1e-14)
    with pytest.raises(ValueError):
        hop.heat(-1.0, np.ones(form.n_nodes))


@pytest.mark.parametrize("t", [0.01, 0.1, 1.0])
def test_semigroup_axioms(bumpy, t):
    form, measure = bumpy
    hop = heat_operator(form, measure)
    u = np.random.default_rng(12).standard_normal(form.n_nodes)
    assert np.array_equal(hop.heat(0.0, u), u)
    assert np.allclose(hop.heat(t, hop.heat(t, u)), hop.heat(2 * t, u), atol=1e-12)
    assert np.max(np.abs(hop.heat(t, u))) <= np.max(np.abs(u)) + 1e-12
    assert measure.integrate(hop.heat(t, u) - u) == pytest.approx(0.0, abs=1e-12)
    clipped = np.clip(u, 0.0, 1.0)
    assert np.all(hop.heat(t, clipped) >= -1e-12)
    assert np.all(hop.heat(t, clipped) <= 1.0 + 1e-12)


def test_unit_contraction_lowers_energy(bumpy):
    form, _ = bumpy
    rng = np.random.default_rng(13)
    for _ in range(20):
        u = 2.0 * rng.random(form.n_nodes) - 0.5
        assert form.energy(np.clip(u, 0.0, 1.0)) <= form.energy(u)


def test_heat_at_time_zero_is_a_copy(bumpy):
    form, measure = bumpy
    hop = heat_operator(form, measure)
    u = np.arange(form.n_nodes, dtype=float)
    v = hop.heat(0.0, u)
    assert np.array_equal(u, v) and v is not u


def test_uniformized_heat_matches_spectral(bumpy):
    form, measure = bumpy
    hop = heat_operator(form, measure)
    u = np.random.default_rng(5).random(form.n_nodes)
    for t in (1e-4, 1e-3, 1e-2):
        assert np.allclose(hop.uniformized_heat(t, u), hop.heat(t, u), rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("rate", [0.5, 100.0, 5000.0])
def test_poisson_cutoff_below_the_inverse_tail_floor(rate):
    k = poisson_cutoff(rate, 1e-17)
    assert poisson.sf(k, rate) <= 1e-17 < poisson.sf(k - 1, rate)
    assert k >= poisson_cutoff(rate, 1e-16)
    with pytest.raises(ValueError):
        poisson_cutoff(rate, 0.0)


def test_neumann_spectrum_of_a_uniform_leaf():
    form, measure = line(129, length=2.0)
    theta = np.sort(heat_operator(form, measure).spectrum()[0])
    h = 2.0 / 128
    k = np.arange(129)
    expected = (4.0 / h**2) * np.sin(k * math.pi / (2 * 128)) ** 2
    assert theta[0] == 0.0
    assert np.allclose(theta, expected, rtol=1e-10, atol=1e-9)


def test_zero_mode_on_every_leaf(bumpy):
    hop = heat_operator(*bumpy)
    assert all(np.min(theta) == 0.0 for theta in hop.spectrum())
    assert all(np.sum(theta == 0.0) == 1 for theta in hop.spectrum())


def test_sine_energy_matches_continuum():
    eps = 0.25
    form, measure = line(257, length=2 * eps)
    phi = np.sin(math.pi * form.arc / eps)
    expected = math.pi**2 / (2 * eps**2)
    assert form.energy(phi) == pytest.approx(expected, rel=1e-4)
    hop = heat_operator(form, measure)
    assert hop.variational_energy(phi) == pytest.approx(form.energy(phi), rel=1e-10)
    assert hop.form_quotient(phi, 1e-3) <= form.energy(phi)


def test_sine_energy_converges_at_second_order():
    eps = 0.25
    expected = math.pi**2 / (2 * eps**2)
    errors = []
    for n in (33, 65, 129, 257):
        form, _ = line(n, length=2 * eps)
        errors.append(abs(form.energy(np.sin(math.pi * form.arc / eps)) - expected))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.allclose(orders, 2.0, atol=0.1)


def test_gradient_is_exact_on_quadratics(bumpy):
    form, _ = bumpy
    s = form.arc
    assert np.allclose(leafwise_gradient(s**2 - 3 * s, form), 2 * s - 3, atol=1e-12)
    assert np.allclose(carre_du_champ(s, form), 1.0, atol=1e-12)
    assert np.allclose(carre_du_champ(s, form, psi=2 * s), 2.0, atol=1e-12)


def test_gradient_is_second_order():
    errors = []
    for n in (65, 129):
        form, _ = line(n)
        s = form.arc
        errors.append(np.max(np.abs(leafwise_gradient(np.sin(3 * s), form) - 3 * np.cos(3 * s))))
    assert math.log2(errors[0] / errors[1]) == pytest.approx(2.0, abs=0.2)


def test_gradient_needs_three_nodes():
    form, _ = assemble_leaves(0.1, [np.ones(2)])
    with pytest.raises(ValueError):
        leafwise_gradient(np.zeros(2), form)


def test_intrinsic_distance_matches_linear_program(bumpy):
    form, _ = bumpy
    sl0, sl1 = form.leaf_slices[0], form.leaf_slices[1]
    A = np.zeros(form.n_nodes, dtype=bool)
    B = np.zeros(form.n_nodes, dtype=bool)
    A[sl0.start:sl0.start + 5] = True
    B[sl0.stop - 4:sl0.stop] = True
    A[sl1.start] = True
    B[sl1.stop - 1] = True
    d = intrinsic_distance(form, A, B)
    assert d == pytest.approx(min(25 * 0.02, 16 * 0.03), rel=1e-12)
    assert intrinsic_distance_lp(form, A, B) == pytest.approx(d, rel=1e-7)


def test_distance_between_leaves_is_infinite(bumpy):
    form, measure = bumpy
    A = np.arange(form.leaf_slices[0].start, form.leaf_slices[0].stop)
    B = np.arange(form.leaf_slices[1].start, form.leaf_slices[1].stop)
    assert intrinsic_distance(form, A, B) == math.inf
    assert heat_flux(heat_operator(form, measure), measure, A, B, 0.1) == 0.0
    with pytest.raises(DomainError):
        varadhan_check(heat_operator(form, measure), measure, A, B, None, form)
    with pytest.raises(ValueError):
        intrinsic_distance(form, A, [])


def test_varadhan_limit_on_a_fine_leaf():
    form, measure = line(1025)
    A = form.arc <= -0.2
    B = form.arc >= 0.2
    d = intrinsic_distance(form, A, B)
    assert d == pytest.approx(410 / 1024, rel=1e-12)
    hop = heat_operator(form, measure)
    times = varadhan_times(d, 1.0, exponents=(24.0, 32.0, 40.0, 48.0))
    result = varadhan_check(hop, measure, A, B, times, form)
    assert result.expected_limit == pytest.approx(-d**2 / 4)
    assert np.all(result.integral > 0.0)
    assert result.gaffney_ok
    assert result.extrapolated_limit == pytest.approx(result.expected_limit, rel=0.05)
    assert len(result.rows()) == 4


def test_varadhan_form_scale_rescales_time():
    form, measure = line(257)
    A = form.arc <= -0.2
    B = form.arc >= 0.2
    hop = heat_operator(form, measure)
    plain = varadhan_check(hop, measure, A, B, [0.002, 0.004, 0.008], form)
    scaled = varadhan_check(hop, measure, A, B, [0.004, 0.008, 0.016], form, form_scale=0.5)
    assert np.allclose(plain.integral, scaled.integral, rtol=1e-12)
    assert scaled.expected_limit == pytest.approx(2 * plain.expected_limit)


def test_flux_matches_neumann_image_sum():
    form, measure = line(1025)
    h = 1.0 / 1024
    A = form.arc <= -0.2
    B = form.arc >= 0.2
    d = intrinsic_distance(form, A, B)
    t = d**2 / (4 * 8.0)
    hop = heat_operator(form, measure)
    flux = heat_flux(hop, measure, A, B, t, method="uniformized")
    cells_A = (-0.5, form.arc[A].max() + h / 2)
    cells_B = (form.arc[B].min() - h / 2, 0.5)
    exact = neumann_interval_flux(-0.5, 0.5, cells_A, cells_B, t)
    assert flux == pytest.approx(exact, rel=0.05)
    assert heat_flux(hop, measure, A, B, t) == pytest.approx(flux, rel=1e-6)
    with pytest.raises(ValueError):
        heat_flux(hop, measure, A, B, t, method="midpoint")


def test_killed_semigroup_matches_sine_series():
    n = 130
    h = 1.0 / (n - 1)
    form, measure = line(n)
    O = np.zeros(n, dtype=bool)
    O[1:n - 1] = True
    restriction = dirichlet_domain(form, measure, O)
    P = restriction.transition_matrix(1e-3)
    exact = dirichlet_interval_kernel(n - 2, h, 1e-3)
    assert np.allclose(P[np.ix_(O, O)], exact, rtol=0, atol=1e-12)
    assert np.all(P[~O] == 0.0)


def test_killed_semigroup_is_dominated(bumpy):
    form, measure = bumpy
    O = np.abs(form.arc) < 0.15
    restriction = dirichlet_domain(form, measure, O)
    hop = heat_operator(form, measure)
    u = np.random.default_rng(6).random(form.n_nodes)
    for t in (1e-3, 1e-2, 1e-1):
        killed = restriction.heat(t, u)
        assert np.all(killed >= -1e-14)
        assert np.all(killed <= hop.heat(t, np.where(O, u, 0.0)) + 1e-12)
        assert np.allclose(killed, restriction.leafwise_heat(t, u), atol=1e-14)
        assert np.all(killed[~O] == 0.0)


def test_domain_without_interior(bumpy):
    form, measure = bumpy
    with pytest.raises(DomainError):
        dirichlet_domain(form, measure, [3])
    with pytest.raises(DomainError):
        harmonicity(form, form.arc, [3])


def test_harmonicity_classification():
    form, _ = line(65)
    s = form.arc
    O = np.arange(1, 64)
    assert harmonicity(form, 2 * s + 1, O) == "harmonic"
    assert harmonicity(form, -s**2, O) == "superharmonic"
    assert harmonicity(form, s**2, O) == "subharmonic"
    assert harmonicity(form, np.sin(8 * s), O) == "neither"
    assert superharmonic_test(form, -s**2, O)
    assert not superharmonic_test(form, s**2, O)


def test_leaf_indicators_have_zero_energy(bumpy):
    form, measure = bumpy
    u = zero_energy_indicator(form, [0, 2])
    assert form.energy(u) == 0.0
    hop = heat_operator(form, measure)
    for t in (1e-3, 1.0, 100.0):
        assert np.allclose(hop.heat(t, u), u, atol=1e-13)
    weight = measure.integrate(u)
    assert weight == pytest.approx(0.7, rel=1e-14)
    assert measure.variance(u) == pytest.approx(weight * (1 - weight), rel=1e-12)
    with pytest.raises(DomainError):
        zero_energy_indicator(form, [])
    with pytest.raises(DomainError):
        zero_energy_indicator(form, [3])


def test_pullback_of_ambient_and_node_functions(cat, cat_rect):
    phi = lambda p: np.sin(2 * np.pi * p[..., 0]) + np.cos(2 * np.pi * p[..., 1])
    assert np.array_equal(pullback(cat, cat_rect, phi, 1), phi(cat.apply(cat_rect.nodes)))
    image, _, _ = image_rectangle(cat, cat_rect, 1)
    pmap = pullback_map(cat, cat_rect, image, 1)
    assert pmap.aligned and pmap.bijective
    assert np.array_equal(pmap.node, np.arange(cat_rect.n_nodes))
    values = phi(image.nodes)
    assert np.array_equal(pullback(cat, cat_rect, values, 1, target=image), values)
    with pytest.raises(DomainError):
        pullback_map(cat, cat_rect, cat_rect, 1)


@pytest.mark.parametrize("n", [1, 2])
def test_cat_energy_scales_by_the_expansion(cat, cat_rect, cat_dc, n):
    phi = lambda p: np.sin(2 * np.pi * p[..., 0]) + np.cos(2 * np.pi * p[..., 1])
    report = quasi_invariance_report(cat, cat_rect, phi, n, cat_dc, order=20)
    expected = cat.lambda_u ** (2 * n)
    assert report.expected_ratio == pytest.approx(expected)
    assert report.ratio == pytest.approx(expected, rel=1e-6)
    assert report.aligned
    assert report.sandwich_ok
    assert report.semigroup_defect <= 1e-10
    assert report.spectral_defect <= 1e-10
    assert report.carre_defect <= 1e-6
    assert report.weighted_defect < 0.05
    assert report.to_dict()["n"] == n


def test_quasi_invariance_needs_conformal_expansion(cat_rect, cat_dc):
    with pytest.raises(NonConformalError):
        quasi_invariance_report(DAMap(), cat_rect, lambda p: p[..., 0], 1, cat_dc)


@pytest.mark.parametrize("phi", [
    lambda p: np.sin(2 * np.pi * p[..., 0]) + np.cos(2 * np.pi * p[..., 1]),
    lambda p: np.cos(2 * np.pi * (p[..., 0] + 2 * p[..., 1])),
    lambda p: np.sin(2 * np.pi * p[..., 0]) * np.sin(2 * np.pi * p[..., 1]),
])
def test_cat_energy_ratio_on_a_fine_grid(cat, cat_dc, phi):
    rect = build_rectangle(cat, np.array([0.3, 0.4]), 4, 0.05, eps=0.25, h=0.25 / 256)
    rect = rect.with_weights(np.full(4, 0.25))
    report = quasi_invariance_report(cat, rect, phi, 1, cat_dc, order=20)
    assert report.aligned
    assert report.ratio == pytest.approx(cat.lambda_u**2, rel=1e-6)


@pytest.fixture(scope="module")
def solenoid_rect(solenoid):
    """Sixteen orbit leaves at the default leaf radius of the solenoid."""
    base = attractor_sample(solenoid, 1, seed=1)[0]
    rect = build_rectangle(solenoid, base, 16, 0.05, eps=0.3, mode="orbit", seed=1)
    return rect.with_weights(np.full(16, 1.0 / 16))


def test_solenoid_leaves_land_on_their_traced_images(solenoid, solenoid_rect):
    image, a_lo, a_hi = image_rectangle(solenoid, solenoid_rect, 1)
    proj = project_to_leaves(solenoid, image, solenoid.apply(solenoid_rect.nodes))
    assert np.max(proj.distance) <= 1e-7
    pmap = pullback_map(solenoid, solenoid_rect, image, 1)
    assert np.array_equal(pmap.leaf, solenoid_rect.leaf_index)
    for sl, leaf in zip(solenoid_rect.leaf_slices, solenoid_rect.leaves):
        steps = np.abs(np.diff(pmap.arc[sl]))
        assert np.all(steps >= (1 - 1e-3) * a_lo * leaf.h)
        assert np.all(steps <= (1 + 1e-3) * a_hi * leaf.h)


def test_solenoid_energy_is_sandwiched_by_the_expansion(solenoid, solenoid_rect):
    L, alpha = estimate_holder(solenoid, sample_holder_pairs(solenoid, 1000, seed=7))
    dc = distortion_constants(solenoid, L, alpha, 0.3)
    phi = lambda p: np.sin(p[..., 2]) + 0.5 * np.cos(2 * p[..., 2])
    report = quasi_invariance_report(solenoid, solenoid_rect, phi, 1, dc)
    assert report.expected_ratio is None
    assert report.a_lo <= report.a_hi
    assert report.sandwich_ok
    assert report.lower_bound <= report.weighted_integral * (1 + 1e-3)
    assert report.weighted_integral <= report.upper_bound * (1 + 1e-3)


def test_occupation_integrates_the_semigroup(bumpy):
    form, measure = bumpy
    hop = heat_operator(form, measure)
    L = laplacian(form, measure)
    u = np.random.default_rng(6).standard_normal(form.n_nodes)
    T = 0.05
    assert np.allclose(hop.occupation(T, np.ones(form.n_nodes)), T, atol=1e-12)
    occ = hop.occupation(T, u)
    assert np.allclose(L.matrix() @ occ, hop.heat(T, u) - u, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 40), st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_semigroup_law_and_contraction_on_random_lines(n, s, t):
    form, measure = line(n, density=1.0 + 0.5 * np.sin(np.arange(n)))
    hop = heat_operator(form, measure)
    u = np.cos(3.0 * np.arange(n))
    assert np.allclose(hop.heat(s, hop.heat(t, u)), hop.heat(s + t, u), atol=1e-12)
    assert np.max(np.abs(hop.heat(t, u))) <= np.max(np.abs(u)) + 1e-12
