import math

import pytest
from scipy.special import jn_zeros

from bbm_obstacles import (
    ConfigError,
    DomainError,
    ModelConstants,
    annealed_constant,
    clearing_radius,
    clearing_scale,
    confinement_prob_series_1d,
    derived_constants,
    dirichlet_eigenvalue,
    lambda_c_constant_drift,
    local_growth_exponent,
    predicted_log_mass,
    predicted_rate,
    principal_eigenvalue_unit_ball,
    quenched_constant,
    unit_ball_volume,
)


@pytest.mark.parametrize(
    "d, expected",
    [
        pytest.param(1, 2.0, id="segment"),
        pytest.param(2, math.pi, id="disc"),
        pytest.param(3, 4 * math.pi / 3, id="ball"),
    ],
)
def test_unit_ball_volume(d: int, expected: float) -> None:
    assert unit_ball_volume(d) == pytest.approx(expected, rel=1e-14)


def test_unit_ball_volume_is_exact_in_low_dimensions() -> None:
    assert unit_ball_volume(1) == 2.0
    assert unit_ball_volume(2) == math.pi
    assert unit_ball_volume(4) == pytest.approx(math.pi**2 / 2, rel=1e-14)


@pytest.mark.parametrize(
    "d, expected",
    [
        pytest.param(1, math.pi**2 / 8, id="d1"),
        pytest.param(2, 2.8915929814734, id="d2"),
        pytest.param(3, math.pi**2 / 2, id="d3"),
    ],
)
def test_principal_eigenvalue_known_values(d: int, expected: float) -> None:
    assert principal_eigenvalue_unit_ball(d) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("d", [2, 4, 6, 8, 10])
def test_principal_eigenvalue_matches_bessel_zeros(d: int) -> None:
    zero = jn_zeros(d // 2 - 1, 1)[0]
    assert principal_eigenvalue_unit_ball(d) == pytest.approx(zero**2 / 2, rel=1e-10)


def test_principal_eigenvalue_increases_with_dimension() -> None:
    values = [principal_eigenvalue_unit_ball(d) for d in range(1, 11)]
    assert values == sorted(values)


@pytest.mark.parametrize("d", [0, 11])
def test_principal_eigenvalue_outside_range(d: int) -> None:
    with pytest.raises(DomainError):
        principal_eigenvalue_unit_ball(d)


def test_dirichlet_eigenvalue_scales_with_radius() -> None:
    assert dirichlet_eigenvalue(1, 2.0) == pytest.approx(math.pi**2 / 32, rel=1e-12)
    with pytest.raises(DomainError):
        dirichlet_eigenvalue(1, 0.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        pytest.param({"d": 0, "nu": 1, "beta": 1, "a": 0.1}, id="dimension"),
        pytest.param({"d": 1, "nu": 0, "beta": 1, "a": 0.1}, id="intensity"),
        pytest.param({"d": 1, "nu": 1, "beta": -1, "a": 0.1}, id="rate"),
        pytest.param({"d": 1, "nu": 1, "beta": 1, "a": math.inf}, id="radius"),
    ],
)
def test_model_constants_validation(kwargs: dict) -> None:
    with pytest.raises(ConfigError):
        ModelConstants(**kwargs)


def test_quenched_constant_one_dimension() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    assert quenched_constant(mc) == pytest.approx(math.pi**2 / 2, abs=1e-9)


def test_quenched_constant_grows_with_intensity() -> None:
    low = ModelConstants(d=2, nu=0.5, beta=1.0, a=0.3)
    high = ModelConstants(d=2, nu=2.0, beta=1.0, a=0.3)
    assert quenched_constant(high) == pytest.approx(4 * quenched_constant(low), rel=1e-12)


def test_annealed_constant_formula() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    lambda_1 = math.pi**2 / 8
    expected = 2 ** (2 / 3) * 1.5 * (2 * lambda_1) ** (1 / 3)
    assert annealed_constant(mc) == pytest.approx(expected, rel=1e-12)


def test_derived_constants_bundle() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    derived = derived_constants(mc)
    assert derived.omega_d == 2.0
    assert derived.R_0 == pytest.approx(0.5)
    assert derived.c == pytest.approx(quenched_constant(mc))
    assert derived.c_tilde == pytest.approx(annealed_constant(mc))


def test_predicted_log_mass_quenched() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    t = math.e**2
    expected = t * (1 - math.pi**2 / 8)
    assert predicted_log_mass(mc, t, "quenched") == pytest.approx(expected, rel=1e-9)
    assert predicted_log_mass(mc, t, "quenched") == pytest.approx(-1.7268, abs=1e-4)


def test_predicted_log_mass_annealed() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    assert predicted_log_mass(mc, 0.0, "annealed") == 0.0
    expected = 8.0 - annealed_constant(mc) * 8.0 ** (1 / 3)
    assert predicted_log_mass(mc, 8.0, "annealed") == pytest.approx(expected, rel=1e-12)


def test_predicted_log_mass_errors() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.3)
    with pytest.raises(DomainError):
        predicted_log_mass(mc, 1.0, "quenched")
    with pytest.raises(ConfigError):
        predicted_log_mass(mc, 5.0, "mixed")


def test_predicted_rate_approaches_beta() -> None:
    mc = ModelConstants(d=2, nu=1.0, beta=1.0, a=0.3)
    for mode in ("quenched", "annealed"):
        rates = [predicted_rate(mc, t, mode) for t in (10.0, 1e3, 1e6)]
        assert rates == sorted(rates)
        assert all(rate < 1.0 for rate in rates)


def test_clearing_radius_is_clamped() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.1)
    assert clearing_radius(1e5, mc) == 0.0
    assert clearing_radius(1e5, mc, leading_only=True) == pytest.approx(
        0.5 * math.log(1e5)
    )


def test_clearing_radius_positive_for_sparse_obstacles() -> None:
    mc = ModelConstants(d=1, nu=0.05, beta=1.0, a=0.1)
    ell = 1e4
    expected = clearing_scale(mc) * math.log(ell) - math.log(math.log(ell)) ** 2
    assert expected > 0
    assert clearing_radius(ell, mc) == pytest.approx(expected)


def test_clearing_radius_needs_large_ell() -> None:
    mc = ModelConstants(d=1, nu=1.0, beta=1.0, a=0.1)
    with pytest.raises(DomainError):
        clearing_radius(math.e, mc)


def test_confinement_series_edges() -> None:
    assert confinement_prob_series_1d(1.0, 0.0) == 1.0
    assert confinement_prob_series_1d(1.0, 1.0, x0=1.0) == 0.0
    with pytest.raises(DomainError):
        confinement_prob_series_1d(0.0, 1.0)
    with pytest.raises(DomainError):
        confinement_prob_series_1d(1.0, -1.0)


def test_confinement_series_long_time_limit() -> None:
    expected = 4 / math.pi * math.exp(-(math.pi**2) * 10 / 8)
    assert confinement_prob_series_1d(1.0, 10.0) == pytest.approx(expected, rel=1e-9)


def test_confinement_series_small_time() -> None:
    # Exit before t = 1e-3 from (-1, 1) is astronomically unlikely.
    assert confinement_prob_series_1d(1.0, 1e-3) == pytest.approx(1.0, abs=1e-12)


def test_confinement_series_decreasing_in_time() -> None:
    values = [confinement_prob_series_1d(2.0, t) for t in (0.1, 0.5, 1.0, 2.0, 4.0)]
    assert values == sorted(values, reverse=True)


def test_confinement_series_off_centre_start() -> None:
    centre = confinement_prob_series_1d(1.0, 0.5)
    assert confinement_prob_series_1d(1.0, 0.5, x0=0.5) < centre
    assert confinement_prob_series_1d(1.0, 0.5, x0=0.5) == pytest.approx(
        confinement_prob_series_1d(1.0, 0.5, x0=-0.5), rel=1e-12
    )


@pytest.mark.parametrize(
    "drift, expected",
    [
        pytest.param(1.0, -0.5, id="scalar"),
        pytest.param([3.0, 4.0], -12.5, id="vector"),
        pytest.param(0.0, 0.0, id="none"),
    ],
)
def test_lambda_c_constant_drift(drift, expected: float) -> None:
    assert lambda_c_constant_drift(drift) == pytest.approx(expected)


def test_local_growth_exponent_sign() -> None:
    assert local_growth_exponent(0.3, 1.0) == pytest.approx(-0.2)
    assert local_growth_exponent(0.8, 1.0) == pytest.approx(0.3)
