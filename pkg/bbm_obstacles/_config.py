from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from bbm_obstacles._analysis import ModelConstants
from bbm_obstacles._branching import SimConfig
from bbm_obstacles._environment import FieldSpec, ObstacleField, field_create
from bbm_obstacles._errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV_VAR = "BBM_OBSTACLES_SEED"

# Not part of the spec hash.
_UNHASHED = ("workers", "out", "verbose")


@dataclass
class ExperimentSpec:
    """Configuration of one experiment campaign."""

    command: str = "growth-curve"
    # model
    d: int = 1
    nu: float = 1.0
    a: float = 0.3
    beta: float = 1.0
    drift: tuple[float, ...] = ()
    # simulation
    t_max: float = 3.0
    # observation times; empty means 0, 1, 2, ... up to t_max
    obs: tuple[float, ...] = ()
    cap: int = 100_000
    seed: int = 0
    replicates: int = 100
    workers: int = 1
    out: str = "out"
    window: float | None = None
    annealed: bool = False
    # Monte Carlo
    dt: float = 1e-2
    paths: int = 2000
    envs: int = 0
    pairs: int = 100_000
    leaves: int | None = None
    # clearings and dumps
    ell: float = 20.0
    resolution: float = 0.1
    box: float = 100.0
    betas: tuple[float, ...] = (0.3, 0.8)
    # statistical gates
    alpha: float = 0.01
    ks_gate: float = 0.01
    fk_sigma: float = 3.0
    slope_tolerance: float = 0.5
    refine_sigma: float = 2.0
    clearing_fraction: float = 0.95
    max_truncated_fraction: float = 0.1
    verbose: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.drift = tuple(float(v) for v in self.drift)
        self.obs = tuple(float(v) for v in self.obs)
        self.betas = tuple(float(v) for v in self.betas)
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"d must be a positive integer, got {self.d}")
        if self.nu < 0 or not math.isfinite(self.nu):
            raise ConfigError(f"nu must be non-negative, got {self.nu}")
        for name in ("a", "beta", "dt", "resolution", "ell", "slope_tolerance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t_max < 0 or self.box < 0:
            raise ConfigError("t_max and box must be non-negative")
        if self.replicates < 1:
            raise ConfigError(f"replicates must be at least 1, got {self.replicates}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.drift and len(self.drift) != self.d:
            raise ConfigError(f"drift must have {self.d} component(s)")
        if not 0 < self.alpha < 1 or not 0 < self.clearing_fraction <= 1:
            raise ConfigError("alpha and clearing_fraction must be probabilities")

    @classmethod
    def from_file(cls, path: str | Path = "pyproject.toml") -> ExperimentSpec:
        """Load the configuration from a file.

        A ``pyproject.toml`` is read from its ``[tool.bbm_obstacles]`` table,
        any other file from its root. A missing file gives the defaults.
        """
        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError:
            return cls()
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid configuration file {path}: {e}") from e
        if path.name == "pyproject.toml":
            data = data.get("tool", {}).get("bbm_obstacles", {})
        return cls().override(**{key.replace("-", "_"): value for key, value in data.items()})

    def override(self, **values: Any) -> ExperimentSpec:
        """A copy with the given non-None values replaced."""
        known = {f.name for f in dataclasses.fields(self)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown configuration key(s): {', '.join(sorted(unknown))}")
        changes = {key: value for key, value in values.items() if value is not None}
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def with_env(self, environ: dict[str, str] | None = None) -> ExperimentSpec:
        """Apply the master seed from the environment, if set."""
        environ = os.environ if environ is None else environ
        value = environ.get(SEED_ENV_VAR)
        if value is None:
            return self
        try:
            return self.override(seed=int(value))
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {value!r}") from e

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def spec_hash(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def provenance(self) -> tuple[str, int]:
        return self.spec_hash, self.seed

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def has_obstacles(self) -> bool:
        return self.nu > 0

    def obs_times(self) -> tuple[float, ...]:
        if self.obs:
            return self.obs
        grid = np.arange(0.0, math.floor(self.t_max) + 1.0)
        if grid[-1] < self.t_max:
            grid = np.append(grid, self.t_max)
        return tuple(float(t) for t in grid)

    def model_constants(self) -> ModelConstants:
        return ModelConstants(d=self.d, nu=self.nu, beta=self.beta, a=self.a)

    def sim_config(self, **changes: Any) -> SimConfig:
        config = SimConfig(
            d=self.d,
            beta=self.beta,
            t_max=self.t_max,
            obs_times=self.obs_times(),
            drift=self.drift or None,
            particle_cap=self.cap,
            seed=self.seed,
            window=self.window,
        )
        return dataclasses.replace(config, **changes) if changes else config

    def field_spec(self) -> FieldSpec:
        return FieldSpec(self.d, self.nu, self.a, self.seed, max(self.a, 1.0))

    def make_field(self, seed: int | None = None) -> ObstacleField:
        """The obstacle field of this spec; ``nu = 0`` gives the empty field."""
        if not self.has_obstacles:
            return ObstacleField.from_points(self.d, self.a)
        return field_create(self.d, self.nu, self.a, self.seed if seed is None else seed)
