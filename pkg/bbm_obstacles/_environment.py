"""Poisson obstacle fields.

A field is generated lazily, cell by cell: the points of a cell are drawn
from a random stream keyed by the master seed and the integer cell
coordinates, so any cell can be regenerated at any time and in any order.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
from scipy.spatial import cKDTree

from bbm_obstacles._errors import ConfigError
from bbm_obstacles._utils import TAG_CELL, as_point, stream

logger = logging.getLogger(__name__)

Cell = tuple[int, ...]

# Number of grid centres handed to the KD-tree at once.
_CHUNK = 1 << 20


@dataclass(frozen=True)
class FieldSpec:
    d: int
    nu: float
    a: float
    master_seed: int
    cell_size: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FieldSpec:
        return cls(
            d=int(data["d"]),
            nu=float(data["nu"]),
            a=float(data["a"]),
            master_seed=int(data["master_seed"]),
            cell_size=float(data["cell_size"]),
        )


@dataclass(frozen=True)
class Clearing:
    """A ball free of obstacles: every obstacle centre lies at distance
    at least ``radius + a`` from ``center``."""

    center: tuple[float, ...]
    radius: float


class ObstacleField:
    """The obstacle configuration ω and its trap region K.

    K is the union of the closed balls of radius ``a`` around the points
    of ω. The points are the union of independent Poisson layers, each
    keyed by its own seed, plus an optional list of fixed points.
    """

    def __init__(
        self,
        d: int,
        a: float,
        cell_size: float,
        layers: Sequence[tuple[float, int]] = (),
        points: np.ndarray | None = None,
    ) -> None:
        if int(d) != d or d < 1:
            raise ConfigError(f"Dimension must be a positive integer, got {d}")
        if not a > 0:
            raise ConfigError(f"Obstacle radius must be positive, got {a}")
        if not cell_size > 0 or not math.isfinite(cell_size):
            raise ConfigError(f"Cell size must be positive, got {cell_size}")
        for nu, _ in layers:
            if not nu > 0 or not math.isfinite(nu):
                raise ConfigError(f"Intensity must be positive, got {nu}")
        self.d = int(d)
        self.a = float(a)
        self.cell_size = float(cell_size)
        self.layers = tuple((float(nu), int(seed)) for nu, seed in layers)
        if points is None:
            points = np.empty((0, self.d))
        points = np.asarray(points, dtype=float).reshape(-1, self.d)
        self.points = points
        self._points_tree = cKDTree(points) if len(points) else None
        self._cells: dict[Cell, np.ndarray] = {}
        # cell -> Poisson points of the cells an obstacle covering it can come from
        self._near: dict[Cell, np.ndarray] = {}
        self._lock = threading.Lock()
        self.spec: FieldSpec | None = None

    @property
    def nu(self) -> float:
        return sum(nu for nu, _ in self.layers)

    @property
    def is_empty(self) -> bool:
        return not self.layers and not len(self.points)

    @classmethod
    def from_points(
        cls, d: int, a: float, points: Iterable[Sequence[float]] | np.ndarray = ()
    ) -> ObstacleField:
        """A field whose obstacles are exactly the given points."""
        array = np.asarray(list(points) if not isinstance(points, np.ndarray) else points)
        return cls(d, a, cell_size=max(a, 1.0), points=array.reshape(-1, d))

    @classmethod
    def from_spec(cls, spec: FieldSpec) -> ObstacleField:
        return field_create(spec.d, spec.nu, spec.a, spec.master_seed, spec.cell_size)

    def superpose(self, extra_nu: float, seed: int) -> ObstacleField:
        """This field plus an independent Poisson layer of intensity ``extra_nu``."""
        return ObstacleField(
            self.d,
            self.a,
            self.cell_size,
            self.layers + ((extra_nu, seed),),
            self.points,
        )

    def with_radius(self, a: float) -> ObstacleField:
        """The same points with a different obstacle radius."""
        other = ObstacleField(self.d, a, self.cell_size, self.layers, self.points)
        other._cells = self._cells
        return other

    def __getstate__(self) -> dict[str, Any]:
        state = self.__dict__.copy()
        del state["_lock"]
        del state["_points_tree"]
        state["_cells"] = {}
        state["_near"] = {}
        return state

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.__dict__.update(state)
        self._lock = threading.Lock()
        self._points_tree = cKDTree(self.points) if len(self.points) else None

    # -- cells -----------------------------------------------------------

    def cell_of(self, x: np.ndarray) -> Cell:
        return tuple(math.floor(v / self.cell_size) for v in np.asarray(x, dtype=float))

    def cell_points(self, cell: Cell) -> np.ndarray:
        """The Poisson points of one cell, realizing it if necessary."""
        points = self._cells.get(cell)
        if points is not None:
            return points
        volume = self.cell_size**self.d
        origin = np.asarray(cell, dtype=float)
        chunks = []
        for nu, seed in self.layers:
            rng = stream(seed, TAG_CELL, *cell)
            count = rng.poisson(nu * volume)
            chunks.append((origin + rng.random((count, self.d))) * self.cell_size)
        points = np.concatenate(chunks) if chunks else np.empty((0, self.d))
        with self._lock:
            return self._cells.setdefault(cell, points)

    def _cell_ranges(self, lower: np.ndarray, upper: np.ndarray) -> list[range]:
        low = np.floor(np.asarray(lower) / self.cell_size).astype(int)
        high = np.floor(np.asarray(upper) / self.cell_size).astype(int)
        return [range(lo, hi + 1) for lo, hi in zip(low, high)]

    def cells_in_box(self, lower: Sequence[float], upper: Sequence[float]) -> Iterator[Cell]:
        yield from itertools.product(*self._cell_ranges(lower, upper))

    def cell_counts(self, cells: Iterable[Cell]) -> np.ndarray:
        return np.array([len(self.cell_points(cell)) for cell in cells], dtype=int)

    def _poisson_points_in_box(self, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
        if not self.layers:
            return np.empty((0, self.d))
        chunks = [self.cell_points(cell) for cell in self.cells_in_box(lower, upper)]
        return np.concatenate(chunks) if chunks else np.empty((0, self.d))

    def points_in_box(self, lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
        """All obstacle points in the half-open box [lower, upper)."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(upper <= lower):
            return np.empty((0, self.d))
        candidates = np.concatenate(
            [self._poisson_points_in_box(lower, upper), self.points]
        )
        inside = np.all((candidates >= lower) & (candidates < upper), axis=1)
        return candidates[inside]

    # -- queries ---------------------------------------------------------

    def _fixed_distance(self, x: np.ndarray) -> float:
        if self._points_tree is None:
            return math.inf
        distance, _ = self._points_tree.query(x)
        return float(distance)

    def _near_points(self, cell: Cell) -> np.ndarray:
        """Poisson points of ``cell`` and of every cell within reach ``a``."""
        near = self._near.get(cell)
        if near is not None:
            return near
        reach = math.ceil(self.a / self.cell_size)
        chunks = [
            self.cell_points(tuple(c + o for c, o in zip(cell, offset)))
            for offset in itertools.product(range(-reach, reach + 1), repeat=self.d)
        ]
        near = np.concatenate(chunks)
        with self._lock:
            return self._near.setdefault(cell, near)

    def is_blocked(self, x: Sequence[float] | float) -> bool:
        """Whether ``x`` lies in K (closed balls)."""
        x = as_point(x, self.d)
        if self._points_tree is not None and self._fixed_distance(x) <= self.a:
            return True
        if not self.layers:
            return False
        near = self._near_points(self.cell_of(x))
        if not len(near):
            return False
        if self.d == 1:
            return bool(np.min(np.abs(near[:, 0] - x[0])) <= self.a)
        return bool(np.min(np.linalg.norm(near - x, axis=1)) <= self.a)

    def nearest_obstacle_distance(
        self, x: Sequence[float] | float, search_cap: float = math.inf
    ) -> float:
        """Distance from ``x`` to the nearest obstacle point.

        Returns ``math.inf`` when no point lies within ``search_cap``.
        """
        x = as_point(x, self.d)
        if not search_cap > 0:
            raise ConfigError(f"Search cap must be positive, got {search_cap}")
        best = self._fixed_distance(x)
        if self.layers:
            home = np.asarray(self.cell_of(x))
            ring = 0
            while True:
                for offset in _ring_offsets(self.d, ring):
                    points = self.cell_points(tuple(int(v) for v in home + offset))
                    if len(points):
                        best = min(best, float(np.min(np.linalg.norm(points - x, axis=1))))
                # Points in cells beyond this ring are at least this far away.
                reach = ring * self.cell_size
                if best <= reach or reach > search_cap:
                    break
                ring += 1
        return best if best <= search_cap else math.inf

    def nearest_distances(self, xs: np.ndarray, search_cap: float) -> np.ndarray:
        """Vectorized nearest distances, ``inf`` beyond ``search_cap``."""
        xs = np.asarray(xs, dtype=float).reshape(-1, self.d)
        result = np.full(len(xs), math.inf)
        if not len(xs):
            return result
        if self._points_tree is not None:
            fixed, _ = self._points_tree.query(xs, distance_upper_bound=search_cap)
            result = np.minimum(result, fixed)
        if self.layers:
            if not math.isfinite(search_cap):
                raise ConfigError("A finite search cap is needed for Poisson fields")
            points = self._poisson_points_in_box(
                xs.min(axis=0) - search_cap, xs.max(axis=0) + search_cap
            )
            if len(points):
                found, _ = cKDTree(points).query(xs, distance_upper_bound=search_cap)
                result = np.minimum(result, found)
        result[result > search_cap] = math.inf
        return result

    def blocked_mask(self, xs: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`is_blocked` over an ``(n, d)`` array."""
        bound = np.nextafter(self.a, math.inf)
        return self.nearest_distances(xs, bound) <= self.a

    def largest_clearing(self, ell: float, resolution: float) -> Clearing:
        """The largest clearing centred on the grid ``resolution * Z^d``
        within distance ``ell`` of the origin.

        This is a lower bound of the largest clearing with centre in
        B(0, ell).
        """
        if not ell > 0 or not resolution > 0:
            raise ConfigError("ell and resolution must be positive")
        if self.d == 1:
            center, distance = self._best_center_1d(ell, resolution)
        else:
            center, distance = self._best_center_grid(ell, resolution)
        return Clearing(center=tuple(float(v) for v in center), radius=max(distance - self.a, 0.0))

    def _neighbourhood_points(self, ell: float) -> tuple[np.ndarray, float]:
        """Points in the cube of half-width ``ell + margin``, the margin grown
        until every centre in B(0, ell) has a point on each side (1-d) or a
        point within the cube."""
        margin = 2 * self.cell_size
        while True:
            half = ell + margin
            points = np.concatenate(
                [
                    self._poisson_points_in_box(
                        np.full(self.d, -half), np.full(self.d, half)
                    ),
                    self.points,
                ]
            )
            if not self.layers:
                return points, math.inf
            if self.d == 1:
                if np.any(points[:, 0] < -ell) and np.any(points[:, 0] > ell):
                    return points, half
            elif len(points):
                return points, half
            margin *= 2

    def _best_center_1d(self, ell: float, resolution: float) -> tuple[np.ndarray, float]:
        # In one dimension the nearest obstacle of a centre is one of the two
        # points bracketing it, so each gap only needs its best grid centre.
        points, _ = self._neighbourhood_points(ell)
        edges = np.concatenate([[-math.inf], np.sort(points[:, 0]), [math.inf]])
        left, right = edges[:-1], edges[1:]
        n = math.floor(ell / resolution)
        lo_index = np.maximum(np.ceil(np.maximum(left, -ell) / resolution), -n)
        hi_index = np.minimum(np.floor(np.minimum(right, ell) / resolution), n)
        usable = lo_index <= hi_index
        left, right = left[usable], right[usable]
        lo_index, hi_index = lo_index[usable], hi_index[usable]
        with np.errstate(invalid="ignore"):
            target = np.select(
                [
                    np.isfinite(left) & np.isfinite(right),
                    np.isfinite(right),
                    np.isfinite(left),
                ],
                [(left + right) / 2, -math.inf, math.inf],
                0.0,
            )
        centers = np.concatenate(
            [
                np.clip(shift(target / resolution), lo_index, hi_index) * resolution
                for shift in (np.floor, np.ceil)
            ]
        )
        left, right = np.tile(left, 2), np.tile(right, 2)
        distance = np.minimum(centers - left, right - centers)
        k = _best_index(distance, np.abs(centers))
        return centers[k : k + 1], float(distance[k])

    def _best_center_grid(self, ell: float, resolution: float) -> tuple[np.ndarray, float]:
        points, half = self._neighbourhood_points(ell)
        tree = cKDTree(points) if len(points) else None
        n = math.floor(ell / resolution)
        ticks = np.arange(-n, n + 1) * resolution
        rest = np.stack(np.meshgrid(*[ticks] * (self.d - 1), indexing="ij"), -1)
        rest = rest.reshape(-1, self.d - 1)
        block = max(1, _CHUNK // len(rest))
        best_center, best_distance = np.zeros(self.d), -math.inf
        for start in range(0, len(ticks), block):
            first = ticks[start : start + block]
            centers = np.column_stack(
                [np.repeat(first, len(rest)), np.tile(rest, (len(first), 1))]
            )
            centers = centers[np.linalg.norm(centers, axis=1) <= ell]
            if not len(centers):
                continue
            if tree is None:
                return np.zeros(self.d), math.inf
            distance, _ = tree.query(centers)
            # A nearer point may lie outside the realized cube.
            unsure = distance > half - np.abs(centers).max(axis=1)
            for i in np.flatnonzero(unsure):
                distance[i] = self.nearest_obstacle_distance(centers[i])
            norms = np.linalg.norm(centers, axis=1)
            k = _best_index(distance, norms)
            if (distance[k], -norms[k]) > (best_distance, -np.linalg.norm(best_center)):
                best_center, best_distance = centers[k], float(distance[k])
        return best_center, best_distance


def _best_index(distance: np.ndarray, norms: np.ndarray) -> int:
    """Index of the largest distance, ties going to the centre nearest 0."""
    return int(np.lexsort((norms, -distance))[0])


def _ring_offsets(d: int, ring: int) -> Iterator[np.ndarray]:
    if ring == 0:
        yield np.zeros(d, dtype=int)
        return
    for offset in itertools.product(range(-ring, ring + 1), repeat=d):
        if max(abs(v) for v in offset) == ring:
            yield np.asarray(offset)


def field_create(
    d: int,
    nu: float,
    a: float,
    master_seed: int,
    cell_size: float | None = None,
) -> ObstacleField:
    """A lazily realized Poisson field of intensity ``nu``."""
    if not nu > 0:
        raise ConfigError(f"Intensity must be positive, got {nu}")
    if cell_size is None:
        cell_size = max(a, 1.0)
    field = ObstacleField(d, a, cell_size, layers=[(nu, master_seed)])
    field.spec = FieldSpec(d, float(nu), float(a), int(master_seed), float(cell_size))
    return field


def load_points(path: str | Path, d: int | None = None) -> np.ndarray:
    """Read a point fixture: one point per line, comma-separated
    coordinates, ``#`` comments. ``.json`` files hold a list of points."""
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read points from {path}: {e}") from e
    try:
        if path.suffix == ".json":
            rows = json.loads(text)
        else:
            rows = [
                [float(v) for v in line.split(",")]
                for line in (raw.split("#")[0].strip() for raw in text.splitlines())
                if line
            ]
        if not rows:
            return np.empty((0, d or 1))
        points = np.asarray(rows, dtype=float)
    except ValueError as e:
        raise ConfigError(f"Malformed point fixture {path}: {e}") from e
    if points.ndim != 2 or (d is not None and points.shape[1] != d):
        raise ConfigError(f"Malformed point fixture {path}")
    return points


def dump_points(path: str | Path, points: np.ndarray, header: str = "") -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.asarray(points), fmt="%.17g", delimiter=",", header=header)
    except OSError as e:
        raise ConfigError(f"Cannot write points to {path}: {e}") from e
    return path
