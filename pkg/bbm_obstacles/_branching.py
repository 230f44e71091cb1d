"""Event-driven simulation of branching Brownian motion among mild obstacles.

Every particle carries a rate-β candidate clock. At a candidate time the
particle splits in two unless it sits in the trap region K, in which case
the candidate is rejected and a fresh clock is drawn. Since the true
branching rate β·1_{K^c} is bounded by β, this thinning is exact. Positions
are only sampled at event and observation times, with exact Gaussian
increments.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence, Union

import numpy as np
import pandas as pd

from bbm_obstacles._analysis import lambda_c_constant_drift
from bbm_obstacles._environment import FieldSpec, ObstacleField
from bbm_obstacles._errors import ConfigError, QueryError, TruncationError
from bbm_obstacles._utils import (
    TAG_ENV,
    TAG_PARTICLE,
    TAG_TRIM,
    map_replicates,
    run_seed,
    stream,
    write_csv,
)

logger = logging.getLogger(__name__)

BIRTH_ROOT = "birth-root"
BRANCH = "branch"
REJECTED = "candidate-rejected"
OBSERVED = "observed"
PRUNED = "pruned"


class Record(NamedTuple):
    event_time: float
    particle_id: int
    kind: str
    position: tuple[float, ...]
    parent_id: Union[int, None]


@dataclass(frozen=True)
class Ball:
    """An open ball B(center, radius) for local-mass counts."""

    name: str
    center: tuple[float, ...]
    radius: float

    def count(self, positions: np.ndarray) -> int:
        if not len(positions):
            return 0
        distance = np.linalg.norm(positions - np.asarray(self.center), axis=1)
        return int(np.count_nonzero(distance < self.radius))


@dataclass(frozen=True)
class SimConfig:
    d: int
    beta: float
    t_max: float
    obs_times: tuple[float, ...]
    drift: tuple[float, ...] | None = None
    particle_cap: int = 100_000
    seed: int = 0
    balls: tuple[Ball, ...] = ()
    # Particles found outside B(0, window) are removed; None keeps the exact law.
    window: float | None = None

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"Dimension must be a positive integer, got {self.d}")
        if not self.beta > 0:
            raise ConfigError(f"Branching rate must be positive, got {self.beta}")
        if not self.t_max >= 0:
            raise ConfigError(f"Time horizon must be non-negative, got {self.t_max}")
        obs = tuple(float(t) for t in self.obs_times)
        if not obs:
            raise ConfigError("At least one observation time is needed")
        if list(obs) != sorted(obs) or obs[0] < 0 or obs[-1] > self.t_max:
            raise ConfigError("Observation times must be sorted within [0, t_max]")
        object.__setattr__(self, "obs_times", obs)
        drift = (0.0,) * self.d if self.drift is None else tuple(map(float, self.drift))
        if len(drift) != self.d:
            raise ConfigError(f"Drift must have {self.d} component(s), got {len(drift)}")
        object.__setattr__(self, "drift", drift)
        if self.particle_cap < 1:
            raise ConfigError(f"Particle cap must be at least 1, got {self.particle_cap}")
        if self.window is not None and not self.window > 0:
            raise ConfigError(f"Window must be positive, got {self.window}")


@dataclass
class Particle:
    id: int
    parent_id: int | None
    birth_time: float
    position: np.ndarray
    next_candidate: float
    # time at which `position` was sampled
    clock: float = 0.0
    rng: np.random.Generator | None = field(default=None, repr=False)


@dataclass
class GrowthCurve:
    times: np.ndarray
    counts: np.ndarray
    local: dict[str, np.ndarray]
    radial_extent: np.ndarray
    truncated: bool = False
    # particles removed by the window
    pruned: int = 0

    @property
    def rates(self) -> np.ndarray:
        """r_t = log|Z_t| / t, undefined at t = 0."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.times > 0, np.log(self.counts) / self.times, np.nan)

    def to_frame(self) -> pd.DataFrame:
        columns: dict[str, Any] = {"t": self.times, "count": self.counts}
        for name, values in self.local.items():
            columns[f"local_{name}"] = values
        columns["M"] = self.radial_extent
        columns["r_t"] = self.rates
        return pd.DataFrame(columns)

    def to_csv(self, path: str | Path, provenance: tuple[str, int] | None = None) -> Path:
        return write_csv(self.to_frame(), path, provenance=provenance)


@dataclass
class GenealogyLog:
    """Append-only, time-ordered records of one run.

    A branch event is stored as two consecutive ``branch`` records, one
    per child, both carrying the parent id.
    """

    d: int
    obs_times: tuple[float, ...]
    records: list[Record] = field(default_factory=list)
    observed_times: list[float] = field(default_factory=list)
    truncated: bool = False

    def append(self, record: Record) -> None:
        self.records.append(record)

    def _check_observed(self, t: float) -> float:
        for s in self.observed_times:
            if math.isclose(s, t, rel_tol=1e-12, abs_tol=1e-12):
                return s
        raise QueryError(f"Time {t} was not observed")

    def observed(self, t: float) -> list[Record]:
        s = self._check_observed(t)
        return [r for r in self.records if r.kind == OBSERVED and r.event_time == s]

    def positions_at(self, t: float) -> np.ndarray:
        return np.array([r.position for r in self.observed(t)]).reshape(-1, self.d)

    def branch_times(self) -> list[float]:
        return [r.event_time for r in self.records if r.kind == BRANCH][::2]

    def growth_curve(self, balls: Sequence[Ball] = ()) -> GrowthCurve:
        times = np.array(self.observed_times, dtype=float)
        by_time: dict[float, list[tuple[float, ...]]] = {t: [] for t in self.observed_times}
        for r in self.records:
            if r.kind == OBSERVED:
                by_time[r.event_time].append(r.position)
        record_times = np.array([r.event_time for r in self.records])
        extent = np.maximum.accumulate(
            np.array([math.hypot(*r.position) for r in self.records])
        )
        pruned = sum(1 for r in self.records if r.kind == PRUNED)
        counts, local = [], {ball.name: [] for ball in balls}
        radial = []
        for t in self.observed_times:
            positions = np.array(by_time[t]).reshape(-1, self.d)
            counts.append(len(positions))
            for ball in balls:
                local[ball.name].append(ball.count(positions))
            radial.append(extent[np.searchsorted(record_times, t, side="right") - 1])
        return GrowthCurve(
            times=times,
            counts=np.array(counts, dtype=int),
            local={name: np.array(values, dtype=int) for name, values in local.items()},
            radial_extent=np.array(radial, dtype=float),
            truncated=self.truncated,
            pruned=pruned,
        )

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for r in self.records:
                f.write(json.dumps(r._asdict()) + "\n")
        return path


def _simulate(
    config: SimConfig, field: ObstacleField | None
) -> tuple[GrowthCurve, GenealogyLog]:
    d, beta = config.d, config.beta
    drift = np.asarray(config.drift)
    window = config.window
    log = GenealogyLog(d, config.obs_times)
    particles: dict[int, Particle] = {}
    heap: list[tuple[float, int]] = []
    next_id = 0

    def spawn(parent_id: int | None, t: float, position: np.ndarray) -> Particle:
        nonlocal next_id
        rng = stream(config.seed, TAG_PARTICLE, next_id)
        particle = Particle(
            next_id, parent_id, t, position.copy(), t + rng.exponential(1 / beta), t, rng
        )
        next_id += 1
        particles[particle.id] = particle
        heapq.heappush(heap, (particle.next_candidate, particle.id))
        return particle

    def advance(particle: Particle, t: float) -> None:
        dt = t - particle.clock
        if dt > 0:
            step = particle.rng.standard_normal(d) * math.sqrt(dt)
            particle.position = particle.position + drift * dt + step
            particle.clock = t

    def pruned(particle: Particle, t: float) -> bool:
        if window is None or math.hypot(*particle.position) <= window:
            return False
        del particles[particle.id]
        log.append(Record(t, particle.id, PRUNED, tuple(particle.position), particle.parent_id))
        return True

    root = spawn(None, 0.0, np.zeros(d))
    log.append(Record(0.0, root.id, BIRTH_ROOT, tuple(root.position), None))
    for t_obs in config.obs_times:
        # Candidates tied with an observation come after it.
        while heap and heap[0][0] < t_obs:
            t, pid = heapq.heappop(heap)
            particle = particles.get(pid)
            if particle is None:
                continue
            advance(particle, t)
            if pruned(particle, t):
                continue
            if field is None or not field.is_blocked(particle.position):
                del particles[pid]
                for _ in range(2):
                    child = spawn(pid, t, particle.position)
                    log.append(Record(t, child.id, BRANCH, tuple(child.position), pid))
                if len(particles) > config.particle_cap:
                    log.truncated = True
                    logger.info(
                        "Run %d exceeded the particle cap %d at t=%.4g",
                        config.seed,
                        config.particle_cap,
                        t,
                    )
                    raise TruncationError(
                        f"Particle cap {config.particle_cap} exceeded at t={t:.6g}",
                        curve=log.growth_curve(config.balls),
                        log=log,
                    )
            else:
                particle.next_candidate = t + particle.rng.exponential(1 / beta)
                heapq.heappush(heap, (particle.next_candidate, pid))
                log.append(Record(t, pid, REJECTED, tuple(particle.position), particle.parent_id))
        for pid in sorted(particles):
            particle = particles[pid]
            advance(particle, t_obs)
            if pruned(particle, t_obs):
                continue
            log.append(
                Record(t_obs, pid, OBSERVED, tuple(particle.position), particle.parent_id)
            )
        log.observed_times.append(t_obs)
    return log.growth_curve(config.balls), log


def run_bbm(
    config: SimConfig, field: ObstacleField
) -> tuple[GrowthCurve, GenealogyLog]:
    """Simulate the BBM whose branching is suppressed inside ``field``."""
    if field.d != config.d:
        raise ConfigError(f"Field dimension {field.d} differs from {config.d}")
    return _simulate(config, field)


def run_free_bbm(config: SimConfig) -> tuple[GrowthCurve, GenealogyLog]:
    """Simulate the free BBM: every candidate is accepted."""
    return _simulate(config, None)


def trim_coupling(
    free_log: GenealogyLog, field: ObstacleField, seed: int
) -> GenealogyLog:
    """Trim a free BBM tree at its branch points inside K.

    At each such branch point one of the two emanating subtrees, chosen by
    a fair coin, is deleted. The surviving child continues the lineage and
    is recorded as a rejected candidate. The result has the law of the BBM
    with obstacles.
    """
    rng = stream(seed, TAG_TRIM)
    trimmed = GenealogyLog(
        free_log.d,
        free_log.obs_times,
        observed_times=list(free_log.observed_times),
        truncated=free_log.truncated,
    )
    deleted: set[int] = set()
    records = free_log.records
    i = 0
    while i < len(records):
        record = records[i]
        if record.kind != BRANCH:
            if record.particle_id not in deleted:
                trimmed.append(record)
            i += 1
            continue
        sibling = records[i + 1]
        i += 2
        if record.parent_id in deleted:
            deleted.update((record.particle_id, sibling.particle_id))
        elif field.is_blocked(record.position):
            keep, drop = (record, sibling) if rng.integers(2) else (sibling, record)
            deleted.add(drop.particle_id)
            trimmed.append(keep._replace(kind=REJECTED))
        else:
            trimmed.append(record)
            trimmed.append(sibling)
    return trimmed


def local_mass(
    log: GenealogyLog, t: float, center: Sequence[float] | float, radius: float
) -> int:
    """Z_t(B): particles alive at ``t`` inside the open ball B(center, radius)."""
    center = tuple(np.atleast_1d(np.asarray(center, dtype=float)))
    return Ball("B", center, radius).count(log.positions_at(t))


FieldLike = Union[ObstacleField, FieldSpec, None]


def _replicate(task: tuple[SimConfig, FieldLike]) -> GrowthCurve:
    config, field = task
    if isinstance(field, FieldSpec):
        field = ObstacleField.from_spec(field)
    try:
        curve, _ = run_free_bbm(config) if field is None else run_bbm(config, field)
    except TruncationError as e:
        return e.curve
    return curve


def run_replicates(
    config: SimConfig,
    runs: int,
    field: FieldLike = None,
    *,
    workers: int = 1,
) -> list[GrowthCurve]:
    """Independent runs, in run order.

    ``field`` is shared by all runs when it is an :class:`ObstacleField`
    (quenched). A :class:`FieldSpec` gives each run its own environment,
    seeded from the spec seed and the run index (annealed). ``None`` runs
    the free BBM. Truncated runs come back with ``truncated`` set.
    """
    tasks = []
    for k in range(runs):
        run_config = replace(config, seed=run_seed(config.seed, k))
        run_field = field
        if isinstance(field, FieldSpec):
            run_field = replace(field, master_seed=run_seed(field.master_seed, k, TAG_ENV))
        tasks.append((run_config, run_field))
    curves = map_replicates(_replicate, tasks, workers)
    truncated = sum(curve.truncated for curve in curves)
    if truncated:
        logger.warning("%d of %d runs were truncated", truncated, runs)
    pruned = [curve.pruned for curve in curves if curve.pruned]
    if pruned:
        logger.warning(
            "The window B(0, %g) removed %d particles in %d of %d runs; "
            "these runs do not follow the exact law",
            config.window,
            sum(pruned),
            len(pruned),
            runs,
        )
    return curves


# Pruning radius of the dichotomy runs. With drift b the population inside
# B(0, w) carries an extra factor e^{bw}.
DICHOTOMY_WINDOW = 6.0


def _finite_or_none(values: Iterable[float]) -> list[float | None]:
    return [v if math.isfinite(v) else None for v in map(float, values)]


@dataclass
class DichotomyReport:
    beta: float
    drift: float
    threshold: float
    predicted_exponent: float
    times: np.ndarray
    log_local: np.ndarray
    survival_fraction: float
    median_log_local: np.ndarray
    # log of the mean local mass over the runs alive in B(0, 1) at t_max
    surviving_log_local: np.ndarray
    slope: float
    slope_tolerance: float
    truncated_runs: int
    window: float | None
    pruned_particles: int
    label: str

    @property
    def slope_within_tolerance(self) -> bool:
        """|slope - β - λ_c| within ``slope_tolerance`` of |β + λ_c|."""
        if not math.isfinite(self.slope):
            return False
        error = abs(self.slope - self.predicted_exponent)
        return error <= self.slope_tolerance * abs(self.predicted_exponent)

    def to_dict(self) -> dict[str, Any]:
        return {
            "beta": self.beta,
            "drift": self.drift,
            "threshold": self.threshold,
            "predicted_exponent": self.predicted_exponent,
            "times": self.times.tolist(),
            "survival_fraction": self.survival_fraction,
            "median_log_local": _finite_or_none(self.median_log_local),
            "surviving_log_local": _finite_or_none(self.surviving_log_local),
            "slope": _finite_or_none([self.slope])[0],
            "slope_tolerance": self.slope_tolerance,
            "slope_within_tolerance": self.slope_within_tolerance,
            "truncated_runs": self.truncated_runs,
            "window": self.window,
            "pruned_particles": self.pruned_particles,
            "label": self.label,
        }


def dichotomy_experiment(
    b: float,
    beta: float,
    nu: float,
    a: float,
    t_max: float,
    runs: int,
    seed: int = 0,
    *,
    obs_times: Iterable[float] | None = None,
    fit_from: float | None = None,
    window: float | None = DICHOTOMY_WINDOW,
    particle_cap: int = 200_000,
    extinct_fraction: float = 0.05,
    slope_tolerance: float = 0.5,
    workers: int = 1,
) -> DichotomyReport:
    """Local growth versus local extinction of the drifted BBM in d = 1.

    Each run samples its own environment. The local mass is counted in
    B(0, 1). Local survival only has positive probability in the growing
    regime, so the growth exponent is fitted on the log of the mean local
    mass over the runs still alive in B(0, 1) at ``t_max``, over
    ``[fit_from, t_max]`` (default: the last two thirds).
    """
    if b == 0:
        raise ConfigError("The dichotomy experiment needs a non-zero drift")
    if obs_times is None:
        obs_times = np.linspace(0, t_max, int(round(t_max)) + 1)
    config = SimConfig(
        d=1,
        beta=beta,
        t_max=t_max,
        obs_times=tuple(obs_times),
        drift=(b,),
        particle_cap=particle_cap,
        seed=seed,
        balls=(Ball("B", (0.0,), 1.0),),
        window=window,
    )
    spec = FieldSpec(1, nu, a, seed, max(a, 1.0))
    curves = run_replicates(config, runs, spec, workers=workers)
    kept = [curve for curve in curves if not curve.truncated]
    times = np.asarray(config.obs_times)
    local = np.array([curve.local["B"] for curve in kept], dtype=float).reshape(-1, len(times))
    alive = local[:, -1] > 0
    with np.errstate(divide="ignore"):
        log_local = np.log(local)
        surviving = (
            np.log(local[alive].mean(axis=0)) if alive.any() else np.full(len(times), -np.inf)
        )
    survival = float(np.mean(alive)) if len(kept) else math.nan
    median = np.median(log_local, axis=0) if len(kept) else np.full(len(times), np.nan)
    start = t_max / 3 if fit_from is None else fit_from
    usable = (times >= start) & np.isfinite(surviving)
    slope = (
        float(np.polyfit(times[usable], surviving[usable], 1)[0])
        if np.count_nonzero(usable) >= 2
        else math.nan
    )
    if not kept:
        label = "inconclusive"
    elif survival <= extinct_fraction:
        label = "extinct-like"
    elif slope > 0:
        label = "growing"
    else:
        label = "inconclusive"
    logger.info(
        "Dichotomy beta=%g b=%g: survival %.3f, slope %.4g -> %s",
        beta,
        b,
        survival,
        slope,
        label,
    )
    return DichotomyReport(
        beta=beta,
        drift=b,
        threshold=b * b / 2,
        predicted_exponent=beta + lambda_c_constant_drift(b),
        times=times,
        log_local=log_local,
        survival_fraction=survival,
        median_log_local=median,
        surviving_log_local=surviving,
        slope=slope,
        slope_tolerance=slope_tolerance,
        truncated_runs=len(curves) - len(kept),
        window=window,
        pruned_particles=sum(curve.pruned for curve in curves),
        label=label,
    )
