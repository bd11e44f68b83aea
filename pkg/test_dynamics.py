"""
Maps, unstable directions and Lyapunov diagnostics.
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynamics import (
    DAMap,
    ToralAutomorphism,
    attractor_sample,
    birkhoff_average,
    cat_map,
    conformal_bounds,
    equivariance_residual,
    hyperbolicity_certificate,
    lyapunov_exponent,
    system_from_descriptor,
    unstable_direction,
    unstable_jacobian,
)

GOLDEN_SQUARE = (3.0 + math.sqrt(5.0)) / 2.0

unit = st.floats(min_value=0.0, max_value=0.999, allow_nan=False)


@given(unit, unit)
def test_cat_inverse_consistency(a, b):
    cat = cat_map()
    x = np.array([a, b])
    back = cat.apply_inverse(cat.apply(x))
    assert np.max(np.abs(cat.displacement(x, back))) < 1e-12


def test_cat_eigen_geometry(cat):
    assert cat.lambda_u == pytest.approx(GOLDEN_SQUARE, rel=1e-14)
    assert cat.lam == pytest.approx(1.0 / GOLDEN_SQUARE, rel=1e-14)
    assert abs(cat.v_u @ cat.v_s) < 1e-14
    assert np.allclose(cat.A @ cat.v_u, GOLDEN_SQUARE * cat.v_u, atol=1e-13)


def test_cat_unstable_direction_is_constant(cat):
    x = attractor_sample(cat, 50, seed=3)
    e = unstable_direction(cat, x)
    assert np.max(np.abs(e - cat.v_u)) < 1e-12
    assert np.max(np.abs(unstable_jacobian(cat, x) - GOLDEN_SQUARE)) < 1e-12


def test_cat_equivariance(cat):
    x = attractor_sample(cat, 20, seed=4)
    assert np.max(equivariance_residual(cat, x, 30)) < 1e-10


def test_cat_hyperbolicity_certificate(cat):
    x = attractor_sample(cat, 20, seed=5)
    assert hyperbolicity_certificate(cat, x, n_max=15) <= 1.0 + 1e-9


def test_cat_conformal_bounds(cat):
    lo, hi = conformal_bounds(cat, attractor_sample(cat, 10, seed=1), n=3)
    assert lo == hi == pytest.approx(GOLDEN_SQUARE)


def test_birkhoff_average_of_mean_zero_observable(cat):
    x = np.array([0.1234567, 0.7654321])
    avg = birkhoff_average(cat, x, 10_000, lambda p: np.cos(2 * np.pi * p[..., 0]))
    assert abs(float(avg)) < 0.05


def test_descriptor_round_trip(cat):
    rebuilt = system_from_descriptor(cat.descriptor())
    assert isinstance(rebuilt, ToralAutomorphism)
    assert np.array_equal(rebuilt.A, cat.A)


def test_non_hyperbolic_matrix_rejected():
    with pytest.raises(ValueError):
        ToralAutomorphism(((1, 1), (0, 1)))
    with pytest.raises(ValueError):
        system_from_descriptor({"kind": "horseshoe"})


def test_solenoid_inverse_on_attractor(solenoid):
    x = attractor_sample(solenoid, 100, seed=7)
    back = solenoid.apply_inverse(solenoid.apply(x))
    assert np.max(solenoid.distance(x, back)) < 1e-10


def test_solenoid_lyapunov_exponent_is_log_two(solenoid):
    x = attractor_sample(solenoid, 1, seed=11)[0]
    assert float(lyapunov_exponent(solenoid, x, 10_000)) == pytest.approx(math.log(2.0), abs=0.01)


def test_solenoid_equivariance_improves_with_depth(solenoid):
    x = attractor_sample(solenoid, 20, seed=12)
    residuals = [float(np.max(equivariance_residual(solenoid, x, n))) for n in (3, 6, 9)]
    assert residuals[2] < residuals[0]
    ratios = [b / a for a, b in zip(residuals, residuals[1:]) if a > 1e-14]
    assert all(r <= 0.5 for r in ratios)


def test_solenoid_expansion_is_conformal(solenoid):
    lo, hi = conformal_bounds(solenoid, attractor_sample(solenoid, 50, seed=2), n=2)
    assert 1.0 < lo <= hi < 4.0


def test_da_map_inverse_and_no_conformal_factor():
    da = DAMap()
    x = attractor_sample(da, 50, seed=9, burn_in=200)
    back = da.apply_inverse(da.apply(x))
    assert np.max(np.abs(da.displacement(x, back))) < 1e-9
    assert da.conformal_factor is None


def test_da_map_agrees_with_linear_map_away_from_fixed_point():
    da = DAMap()
    cat = cat_map()
    x = np.array([[0.5, 0.5], [0.3, 0.6]])
    assert np.max(np.abs(da.displacement(da.apply(x), cat.apply(x)))) < 1e-14


def test_differentials_match_finite_differences(cat, solenoid):
    assert np.array_equal(cat.differential(np.array([0.3, 0.4])), cat.A)
    step = 1e-6
    cases = [(solenoid, attractor_sample(solenoid, 4, seed=5), 1e-8),
             (DAMap(), np.array([[0.05, 0.03], [0.9, 0.1], [0.5, 0.5]]), 1e-6)]
    for sys, x, atol in cases:
        D = sys.differential(x)
        for i in range(sys.phase_dim):
            e = np.zeros(sys.phase_dim)
            e[i] = step
            fd = sys.displacement(sys.apply(x - e), sys.apply(x + e)) / (2 * step)
            assert np.allclose(D[..., :, i], fd, rtol=0, atol=atol)
