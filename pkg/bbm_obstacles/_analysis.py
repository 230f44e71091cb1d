"""Closed-form constants and predicted asymptotic curves.

Everything here is a pure function of the model parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import jv

from bbm_obstacles._errors import ConfigError, DomainError

MAX_DIMENSION = 10
MAX_SERIES_TERMS = 10**7
Mode = Literal["quenched", "annealed"]


@dataclass(frozen=True)
class ModelConstants:
    """The parameters of the model: dimension, obstacle intensity,
    branching rate and obstacle radius."""

    d: int
    nu: float
    beta: float
    a: float

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"Dimension must be a positive integer, got {self.d}")
        for name in ("nu", "beta", "a"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise ConfigError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class DerivedConstants:
    omega_d: float
    lambda_d: float
    R_0: float
    c: float
    c_tilde: float


# Closed forms; the gamma-function expression is off by an ulp in d = 1.
_BALL_VOLUMES = {1: 2.0, 2: math.pi, 3: 4 * math.pi / 3}


def unit_ball_volume(d: int) -> float:
    if d in _BALL_VOLUMES:
        return _BALL_VOLUMES[d]
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@lru_cache(maxsize=None)
def _first_bessel_zero(order: float) -> float:
    # J_order is positive right of 0 and changes sign at its first zero,
    # which lies below `upper` for every order >= -1/2.
    step = 0.05
    left = step
    upper = order + 2 * math.sqrt(order + 1) + 4
    while left < upper:
        right = left + step
        if jv(order, left) * jv(order, right) <= 0:
            return brentq(lambda x: jv(order, x), left, right, xtol=1e-15, rtol=1e-15)
        left = right
    raise RuntimeError(f"No zero of J_{order} found below {upper}")


def principal_eigenvalue_unit_ball(d: int) -> float:
    """Principal Dirichlet eigenvalue of -Δ/2 on the unit ball of R^d."""
    if d < 1 or d > MAX_DIMENSION:
        raise DomainError(f"Dimension must be in [1, {MAX_DIMENSION}], got {d}")
    return _first_bessel_zero(d / 2 - 1) ** 2 / 2


def dirichlet_eigenvalue(d: int, radius: float) -> float:
    """Principal Dirichlet eigenvalue of -Δ/2 on a ball of the given radius."""
    if radius <= 0:
        raise DomainError(f"Radius must be positive, got {radius}")
    return principal_eigenvalue_unit_ball(d) / radius**2


def clearing_scale(mc: ModelConstants) -> float:
    """R_0 = (d / (ν ω_d))^{1/d}."""
    return (mc.d / (mc.nu * unit_ball_volume(mc.d))) ** (1 / mc.d)


def quenched_constant(mc: ModelConstants) -> float:
    lambda_d = principal_eigenvalue_unit_ball(mc.d)
    return lambda_d * (mc.d / (mc.nu * unit_ball_volume(mc.d))) ** (-2 / mc.d)


def annealed_constant(mc: ModelConstants) -> float:
    d = mc.d
    lambda_d = principal_eigenvalue_unit_ball(d)
    return (
        (mc.nu * unit_ball_volume(d)) ** (2 / (d + 2))
        * ((d + 2) / 2)
        * (2 * lambda_d / d) ** (d / (d + 2))
    )


def derived_constants(mc: ModelConstants) -> DerivedConstants:
    return DerivedConstants(
        omega_d=unit_ball_volume(mc.d),
        lambda_d=principal_eigenvalue_unit_ball(mc.d),
        R_0=clearing_scale(mc),
        c=quenched_constant(mc),
        c_tilde=annealed_constant(mc),
    )


def _check_mode(mode: str) -> None:
    if mode not in ("quenched", "annealed"):
        raise ConfigError(f"Mode must be 'quenched' or 'annealed', got {mode!r}")


def predicted_log_mass(mc: ModelConstants, t: float, mode: Mode = "quenched") -> float:
    """Leading-order log of the expected total mass, without the (1 + o(1))."""
    _check_mode(mode)
    if mode == "quenched":
        if t <= 1:
            raise DomainError(f"Quenched prediction needs t > 1, got {t}")
        return mc.beta * t - quenched_constant(mc) * t / math.log(t) ** (2 / mc.d)
    if t < 0:
        raise DomainError(f"Time must be non-negative, got {t}")
    return mc.beta * t - annealed_constant(mc) * t ** (mc.d / (mc.d + 2))


def predicted_rate(mc: ModelConstants, t: float, mode: Mode = "quenched") -> float:
    """Leading-order growth rate r_t of the population."""
    _check_mode(mode)
    if mode == "quenched":
        if t <= 1:
            raise DomainError(f"Quenched prediction needs t > 1, got {t}")
        return mc.beta - quenched_constant(mc) * math.log(t) ** (-2 / mc.d)
    if t <= 0:
        raise DomainError(f"Time must be positive, got {t}")
    return mc.beta - annealed_constant(mc) * t ** (-2 / (mc.d + 2))


def clearing_radius(
    ell: float, mc: ModelConstants, *, leading_only: bool = False
) -> float:
    """Radius of the clearings guaranteed within distance ``ell``.

    The correction term dominates for moderate ``ell``, so the result is
    clamped at 0. ``leading_only`` drops the correction.
    """
    if ell <= math.e:
        raise DomainError(f"Clearing radius needs ell > e, got {ell}")
    leading = clearing_scale(mc) * math.log(ell) ** (1 / mc.d)
    if leading_only:
        return leading
    return max(0.0, leading - math.log(math.log(ell)) ** 2)


def confinement_prob_series_1d(
    R: float, t: float, n_terms: int | None = None, x0: float = 0.0
) -> float:
    """Probability that a standard Brownian motion started at ``x0`` stays
    in (-R, R) up to time ``t``.

    The cosine series is truncated once its terms drop below 1e-16, or
    after ``n_terms`` terms.
    """
    if R <= 0:
        raise DomainError(f"Half-width must be positive, got {R}")
    if t < 0:
        raise DomainError(f"Time must be non-negative, got {t}")
    if abs(x0) >= R:
        return 0.0
    if t == 0:
        return 1.0
    rate = math.pi**2 * t / (8 * R**2)
    # exp(-(2k+1)^2 rate) < 1e-16 beyond this k
    needed = math.ceil((math.sqrt(37 / rate) - 1) / 2) + 1
    needed = min(needed, n_terms if n_terms is not None else MAX_SERIES_TERMS)
    odd = 2 * np.arange(max(needed, 1)) + 1
    signs = np.where(odd % 4 == 1, 1.0, -1.0)
    terms = (
        signs
        / odd
        * np.cos(odd * math.pi * x0 / (2 * R))
        * np.exp(-(odd.astype(float) ** 2) * rate)
    )
    return float(np.clip(4 / math.pi * terms.sum(), 0.0, 1.0))


def lambda_c_constant_drift(b: float | Sequence[float]) -> float:
    """Generalized principal eigenvalue of Δ/2 + b·∇ on R^d."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return -float(b @ b) / 2


def local_growth_exponent(beta: float, b: float | Sequence[float]) -> float:
    """β + λ_c: local growth when positive, local extinction when negative."""
    return beta + lambda_c_constant_drift(b)
