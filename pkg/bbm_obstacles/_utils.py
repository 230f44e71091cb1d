from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np
import pandas as pd

from bbm_obstacles._errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Stream tags keep the per-cell, per-particle and per-run streams disjoint
# even when their integer keys coincide.
TAG_CELL = 1
TAG_PARTICLE = 2
TAG_RUN = 3
TAG_PATH = 4
TAG_ENV = 5
TAG_TRIM = 6
TAG_TREE = 7


def zigzag(value: int) -> int:
    """Map a signed integer to a non-negative one, bijectively."""
    return 2 * value if value >= 0 else -2 * value - 1


def stream(*keys: int) -> np.random.Generator:
    """A reproducible counter-based random stream keyed by integers."""
    entropy = [zigzag(int(key)) for key in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def run_seed(master_seed: int, index: int, tag: int = TAG_RUN) -> int:
    """Derive the seed of the ``index``-th replicate from the master seed."""
    sequence = np.random.SeedSequence([zigzag(master_seed), tag, index])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def map_replicates(
    func: Callable[[T], R], items: Iterable[T], workers: int = 1
) -> list[R]:
    """Apply ``func`` to every item, keeping the input order.

    ``func`` must be picklable when ``workers > 1``.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    chunksize = max(1, len(items) // (4 * workers))
    logger.debug("Dispatching %d items to %d workers", len(items), workers)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items, chunksize=chunksize))


def provenance_line(spec_hash: str, seed: int) -> str:
    return f"# spec_hash={spec_hash} seed={seed}\n"


def write_csv(
    frame: pd.DataFrame,
    path: str | Path,
    *,
    provenance: tuple[str, int] | None = None,
) -> Path:
    """Write a frame as CSV, preceded by a provenance comment if given."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            if provenance is not None:
                f.write(provenance_line(*provenance))
            frame.to_csv(f, index=False, float_format="%.12g", lineterminator="\n")
    except OSError as e:
        raise ConfigError(f"Cannot write {path}: {e}") from e
    return path


def write_json(data: Any, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n",
            "utf-8",
        )
    except OSError as e:
        raise ConfigError(f"Cannot write {path}: {e}") from e
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return os.fspath(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def as_point(x: Sequence[float] | float, d: int) -> np.ndarray:
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.shape != (d,):
        raise ValueError(f"Expected a point in {d} dimension(s), got shape {point.shape}")
    return point
