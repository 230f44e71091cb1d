"""Monte Carlo estimates of the expected mass through the first moment formula.

For a fixed environment,

    E|Z_t| = E exp(β ∫_0^t 1_{K^c}(W_s) ds),

with W a Brownian motion started at the origin. Paths are sampled on a
uniform grid with exact Gaussian increments, and the time integral uses the
left-endpoint rule. The estimators average exponentials of path functionals,
so their distribution has a heavy upper tail: paths that find a clearing
dominate the mean, and the log-scale standard error is worth watching.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from bbm_obstacles._analysis import ModelConstants
from bbm_obstacles._environment import ObstacleField, field_create
from bbm_obstacles._errors import ConfigError, DomainError
from bbm_obstacles._utils import TAG_ENV, TAG_PATH, map_replicates, run_seed, stream

logger = logging.getLogger(__name__)

# Path coordinates sampled per batch.
_BATCH_POINTS = 1 << 21

FRAME_COLUMNS = ["t", "estimate", "log_estimate", "se", "n_paths", "n_envs"]


@dataclass(frozen=True)
class FkEstimate:
    t: float
    point_estimate: float
    log_estimate: float
    std_error: float
    n_paths: int
    n_environments: int = 1
    # se / estimate
    log_std_error: float = 0.0
    # e^{βt} mean(exp(-β ∫ 1_K)); annealed estimates only
    complementary_estimate: float | None = None

    def to_row(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "estimate": self.point_estimate,
            "log_estimate": self.log_estimate,
            "se": self.std_error,
            "n_paths": self.n_paths,
            "n_envs": self.n_environments,
        }


class ProbabilityEstimate(NamedTuple):
    value: float
    std_error: float
    n_paths: int


@dataclass(frozen=True)
class RefinementReport:
    coarse: FkEstimate
    fine: FkEstimate
    shift: float
    combined_se: float
    passed: bool


def estimates_frame(estimates: Sequence[FkEstimate]) -> pd.DataFrame:
    return pd.DataFrame([e.to_row() for e in estimates], columns=FRAME_COLUMNS)


def _check_grid(t: float, dt: float, n_paths: int) -> int:
    if not dt > 0:
        raise ConfigError(f"Time step must be positive, got {dt}")
    if not t >= 0:
        raise ConfigError(f"Time must be non-negative, got {t}")
    if n_paths < 2:
        raise ConfigError(f"At least two paths are needed, got {n_paths}")
    # dt is shrunk so that the grid ends exactly at t.
    return max(1, math.ceil(t / dt - 1e-9)) if t > 0 else 0


def _drift_vector(drift: Sequence[float] | float | None, d: int) -> np.ndarray:
    if drift is None:
        return np.zeros(d)
    vector = np.atleast_1d(np.asarray(drift, dtype=float))
    if vector.shape != (d,):
        raise ConfigError(f"Drift must have {d} component(s), got {vector.shape}")
    return vector


def _sample_paths(
    d: int,
    t: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    drift: np.ndarray,
) -> Iterator[np.ndarray]:
    """Yield ``(batch, n_steps + 1, d)`` arrays of paths on the grid ``k t / n_steps``."""
    step = t / n_steps if n_steps else 0.0
    per_batch = max(1, _BATCH_POINTS // ((n_steps + 1) * d))
    for index, start in enumerate(range(0, n_paths, per_batch)):
        size = min(per_batch, n_paths - start)
        rng = stream(seed, TAG_PATH, index)
        increments = rng.standard_normal((size, n_steps, d)) * math.sqrt(step)
        increments += drift * step
        paths = np.zeros((size, n_steps + 1, d))
        np.cumsum(increments, axis=1, out=paths[:, 1:])
        yield paths


def _free_fraction(field: ObstacleField, paths: np.ndarray) -> np.ndarray:
    """Fraction of left grid points of each path lying outside K."""
    size, points, d = paths.shape
    n_steps = points - 1
    if n_steps == 0:
        return np.ones(size)
    blocked = field.blocked_mask(paths[:, :-1].reshape(-1, d)).reshape(size, n_steps)
    return (n_steps - blocked.sum(axis=1)) / n_steps


def occupation_functional(
    path: np.ndarray, field: ObstacleField, t: float
) -> float:
    """Left-endpoint approximation of ∫_0^t 1_{K^c}(W_s) ds.

    ``path`` holds the positions at the grid times ``k t / n`` for
    ``k = 0..n``, one row per time.
    """
    path = np.asarray(path, dtype=float).reshape(-1, field.d)
    if len(path) < 2:
        return 0.0
    return t * float(_free_fraction(field, path[np.newaxis])[0])


def _summarize(
    fractions: np.ndarray, beta: float, t: float
) -> tuple[float, float]:
    """Mean and standard error of exp(β t f) over the free fractions f."""
    if np.all(fractions == fractions[0]):
        return math.exp(beta * t * float(fractions[0])), 0.0
    values = np.exp(beta * t * fractions)
    mean = float(np.clip(values.mean(), 1.0, math.exp(beta * t)))
    return mean, float(values.std(ddof=1) / math.sqrt(len(values)))


def _estimate(t: float, fractions: np.ndarray, beta: float) -> FkEstimate:
    mean, se = _summarize(fractions, beta, t)
    return FkEstimate(
        t=t,
        point_estimate=mean,
        log_estimate=math.log(mean),
        std_error=se,
        n_paths=len(fractions),
        log_std_error=se / mean,
    )


def _free_fractions(
    field: ObstacleField,
    t: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    drift: np.ndarray,
) -> np.ndarray:
    return np.concatenate(
        [
            _free_fraction(field, paths)
            for paths in _sample_paths(field.d, t, n_steps, n_paths, seed, drift)
        ]
    )


def estimate_quenched_mass(
    field: ObstacleField,
    beta: float,
    t: float,
    dt: float,
    n_paths: int,
    seed: int,
    drift: Sequence[float] | float | None = None,
) -> FkEstimate:
    """Estimate E^ω|Z_t| for the given environment."""
    n_steps = _check_grid(t, dt, n_paths)
    fractions = _free_fractions(
        field, t, n_steps, n_paths, seed, _drift_vector(drift, field.d)
    )
    estimate = _estimate(t, fractions, beta)
    logger.debug(
        "Quenched estimate at t=%g: %.6g (se %.3g, %d steps)",
        t,
        estimate.point_estimate,
        estimate.std_error,
        n_steps,
    )
    return estimate


def _annealed_task(
    task: tuple[ModelConstants, float, int, int, int, float | None, int],
) -> np.ndarray:
    mc, t, n_steps, n_paths, seed, cell_size, index = task
    field = field_create(mc.d, mc.nu, mc.a, run_seed(seed, index, TAG_ENV), cell_size)
    path_seed = run_seed(seed, index, TAG_PATH)
    return _free_fractions(field, t, n_steps, n_paths, path_seed, np.zeros(mc.d))


def estimate_annealed_mass(
    mc: ModelConstants,
    t: float,
    dt: float,
    n_paths: int,
    n_envs: int,
    seed: int,
    cell_size: float | None = None,
    *,
    workers: int = 1,
) -> FkEstimate:
    """Estimate the annealed mass by averaging quenched estimates over
    ``n_envs`` independent environments, ``n_paths`` paths each.

    The standard error is taken between environments. The complementary
    form e^{βt} mean(exp(-β ∫ 1_K)) is computed from the same paths.
    """
    n_steps = _check_grid(t, dt, n_paths)
    if n_envs < 1:
        raise ConfigError(f"At least one environment is needed, got {n_envs}")
    tasks = [(mc, t, n_steps, n_paths, seed, cell_size, k) for k in range(n_envs)]
    fractions = np.stack(map_replicates(_annealed_task, tasks, workers))
    beta = mc.beta
    complementary = math.exp(beta * t) * float(
        np.exp(-beta * t * (1.0 - fractions)).mean()
    )
    mean, se = _summarize(fractions.ravel(), beta, t)
    if n_envs >= 2 and se > 0:
        env_means = np.exp(beta * t * fractions).mean(axis=1)
        se = float(env_means.std(ddof=1) / math.sqrt(n_envs))
    logger.info("Annealed estimate at t=%g over %d environments: %.6g", t, n_envs, mean)
    return FkEstimate(
        t=t,
        point_estimate=mean,
        log_estimate=math.log(mean),
        std_error=se,
        n_paths=n_paths,
        n_environments=n_envs,
        log_std_error=se / mean,
        complementary_estimate=complementary,
    )


def refinement_check(
    field: ObstacleField,
    beta: float,
    t: float,
    dt: float,
    n_paths: int,
    seed: int,
    *,
    sigma: float = 2.0,
) -> RefinementReport:
    """Compare the estimates on step ``dt`` and ``dt / 2``.

    Both use the same fine paths; the coarse path is every other grid
    point of the fine one.
    """
    n_steps = _check_grid(t, dt, n_paths)
    if n_steps == 0:
        raise DomainError("Refinement needs t > 0")
    coarse_parts, fine_parts = [], []
    for paths in _sample_paths(field.d, t, 2 * n_steps, n_paths, seed, np.zeros(field.d)):
        fine_parts.append(_free_fraction(field, paths))
        coarse_parts.append(_free_fraction(field, paths[:, ::2]))
    coarse = _estimate(t, np.concatenate(coarse_parts), beta)
    fine = _estimate(t, np.concatenate(fine_parts), beta)
    shift = fine.point_estimate - coarse.point_estimate
    combined = math.hypot(coarse.std_error, fine.std_error)
    return RefinementReport(
        coarse=coarse,
        fine=fine,
        shift=shift,
        combined_se=combined,
        passed=abs(shift) <= sigma * combined,
    )


def estimate_confinement_prob(
    R: float,
    t: float,
    dt: float,
    n_paths: int,
    seed: int,
    x0: float = 0.0,
) -> ProbabilityEstimate:
    """Monte Carlo estimate of P(|x0 + W_s| < R for all s <= t) in d = 1.

    Between grid points the path is a Brownian bridge, whose chance of
    touching the level R is exp(-2 (R - x)(R - y) / dt); each path is
    weighted by the chance of touching neither level.
    """
    if R <= 0:
        raise DomainError(f"Half-width must be positive, got {R}")
    n_steps = _check_grid(t, dt, n_paths)
    if abs(x0) >= R:
        return ProbabilityEstimate(0.0, 0.0, n_paths)
    if n_steps == 0:
        return ProbabilityEstimate(1.0, 0.0, n_paths)
    step = t / n_steps
    weights = []
    for paths in _sample_paths(1, t, n_steps, n_paths, seed, np.zeros(1)):
        x = paths[:, :, 0] + x0
        inside = np.all(np.abs(x) < R, axis=1)
        upper = np.clip(R - x, 0.0, None)
        lower = np.clip(R + x, 0.0, None)
        with np.errstate(divide="ignore"):
            log_keep = np.log1p(
                -np.exp(-2 * upper[:, :-1] * upper[:, 1:] / step)
            ) + np.log1p(-np.exp(-2 * lower[:, :-1] * lower[:, 1:] / step))
        weights.append(np.where(inside, np.exp(log_keep.sum(axis=1)), 0.0))
    values = np.concatenate(weights)
    return ProbabilityEstimate(
        float(values.mean()),
        float(values.std(ddof=1) / math.sqrt(len(values))),
        n_paths,
    )
