"""Yule process genealogy and the exact coalescence laws.

For two individuals picked at random from a rate-1 Yule population at
time t (given at least two individuals), the death time s of their most
recent common ancestor has CDF

    F(u) = [1 - 2u e^-u - e^-2u + e^-t (2u - 3 + 4e^-u - e^-2u)]
           / [(1 - e^-t)(1 - e^-u)^2],                 0 < u <= t,

and the population size I just after that split, given j individuals at
time t, has P(I = i) = 2(j+1) / ((j-1) i (i+1)). A rate-β population run
to time t is a rate-1 population run to βt, so general β follows by
rescaling time.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union, overload

import numpy as np
import pandas as pd
from scipy import stats

from bbm_obstacles._branching import BIRTH_ROOT, BRANCH, GenealogyLog
from bbm_obstacles._errors import ConfigError, DomainError, TruncationError
from bbm_obstacles._utils import TAG_TREE, stream

logger = logging.getLogger(__name__)

# Below this argument (in rate-1 time) the closed forms lose digits to
# cancellation and the Taylor series are used instead.
_SERIES_BELOW = 0.5
_SERIES_TERMS = 30
MAX_BETA_T = 12.0

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class MrcaLaw:
    t: float
    beta: float = 1.0

    def __post_init__(self) -> None:
        if not self.t > 0 or not self.beta > 0:
            raise ConfigError(f"MrcaLaw needs t > 0 and beta > 0, got {self}")


def _series(u: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    # Horner on sum_n c_n u^n, c_0 first
    result = np.zeros_like(u)
    for c in coefficients[::-1]:
        result = result * u + c
    return result


def _taylor(make) -> np.ndarray:
    n = np.arange(_SERIES_TERMS, dtype=float)
    factorial = np.array([math.factorial(int(k)) for k in n], dtype=float)
    return make(n) / factorial


def _cdf_numerator(u: np.ndarray, tail: float) -> np.ndarray:
    # 1 - 2u e^-u - e^-2u + e^-t (2u - 3 + 4 e^-u - e^-2u)
    direct = (
        1
        - 2 * u * np.exp(-u)
        - np.exp(-2 * u)
        + tail * (2 * u - 3 + 4 * np.exp(-u) - np.exp(-2 * u))
    )
    coefficients = _taylor(
        lambda n: (-1) ** n * ((2 * n - 2**n) + tail * (4 - 2**n))
    )
    coefficients[:3] = 0.0
    return np.where(u < _SERIES_BELOW, _series(u, coefficients), direct)


def _density_numerator(u: np.ndarray, tail: float) -> np.ndarray:
    # e^-u (u - 2 + (u + 2) e^-u) + e^-t (1 - 2u e^-u - e^-2u)
    direct = np.exp(-u) * (u - 2 + (u + 2) * np.exp(-u)) + tail * (
        1 - 2 * u * np.exp(-u) - np.exp(-2 * u)
    )
    coefficients = _taylor(
        lambda n: (-1) ** n
        * ((-n - 2 - n * 2 ** (n - 1) + 2 ** (n + 1)) + tail * (2 * n - 2**n))
    )
    coefficients[:3] = 0.0
    return np.where(u < _SERIES_BELOW, _series(u, coefficients), direct)


def _check_support(u: np.ndarray, t: float, closed: bool) -> None:
    upper_ok = np.all(u <= t) if closed else np.all(u < t)
    if not (np.all(u > 0) and upper_ok):
        bracket = "]" if closed else ")"
        raise DomainError(f"u must lie in (0, {t}{bracket}")


@overload
def mrca_cdf(law: MrcaLaw, u: float) -> float:
    ...


@overload
def mrca_cdf(law: MrcaLaw, u: np.ndarray) -> np.ndarray:
    ...


def mrca_cdf(law: MrcaLaw, u: ArrayLike) -> ArrayLike:
    """P(s <= u) for the MRCA death time of a random pair."""
    values = np.asarray(u, dtype=float)
    _check_support(values, law.t, closed=True)
    x, t = law.beta * values, law.beta * law.t
    tail = math.exp(-t)
    result = _cdf_numerator(x, tail) / (-math.expm1(-t) * np.expm1(-x) ** 2)
    result = np.minimum(result, 1.0)
    return float(result) if np.ndim(u) == 0 else result


def mrca_density(law: MrcaLaw, u: ArrayLike) -> ArrayLike:
    """Density of the MRCA death time on (0, t)."""
    values = np.asarray(u, dtype=float)
    _check_support(values, law.t, closed=False)
    x, t = law.beta * values, law.beta * law.t
    tail = math.exp(-t)
    result = (
        2
        * _density_numerator(x, tail)
        / (-math.expm1(-t) * (-np.expm1(-x)) ** 3)
        * law.beta
    )
    return float(result) if np.ndim(u) == 0 else result


def pre_coalescence_size_pmf(
    i: int, j: int, *, exact: bool = False
) -> float | Fraction:
    """P(I = i) given j individuals at the horizon."""
    if not 2 <= i <= j:
        raise DomainError(f"Need 2 <= i <= j, got i={i}, j={j}")
    value = Fraction(2 * (j + 1), (j - 1) * i * (i + 1))
    return value if exact else float(value)


def yule_count_pmf(i: int, j: int, u: float, beta: float = 1.0) -> float:
    """P(Y_u = j) for a Yule population started from i individuals:
    a negative binomial law with success probability e^{-βu}."""
    if not 1 <= i <= j or u < 0:
        raise DomainError(f"Need 1 <= i <= j and u >= 0, got i={i}, j={j}, u={u}")
    return float(stats.nbinom.pmf(j - i, i, math.exp(-beta * u)))


@dataclass
class YuleTree:
    """A binary genealogy grown up to a horizon.

    Node ids are assigned in birth order; roots come first. ``events``
    holds ``(time, parent, child, child)`` in time order.
    """

    horizon: float
    roots: int = 1
    parent: list[int] = field(default_factory=list)
    birth: list[float] = field(default_factory=list)
    death: list[float] = field(default_factory=list)
    events: list[tuple[float, int, int, int]] = field(default_factory=list)
    leaves: list[int] = field(default_factory=list)

    def _add(self, parent: int, time: float) -> int:
        self.parent.append(parent)
        self.birth.append(time)
        self.death.append(math.inf)
        return len(self.parent) - 1

    @classmethod
    def from_log(cls, log: GenealogyLog, horizon: float | None = None) -> YuleTree:
        """The genealogy of a free BBM run, read from its branch records."""
        if horizon is None:
            horizon = log.observed_times[-1]
        tree = cls(horizon=horizon, roots=0)
        index: dict[int, int] = {}
        pending: list[int] = []
        for r in log.records:
            if r.event_time > horizon:
                break
            if r.kind == BIRTH_ROOT:
                index[r.particle_id] = tree._add(-1, 0.0)
                tree.roots += 1
            elif r.kind == BRANCH:
                parent = index[r.parent_id]
                index[r.particle_id] = tree._add(parent, r.event_time)
                pending.append(index[r.particle_id])
                if len(pending) == 2:
                    tree.death[parent] = r.event_time
                    tree.events.append((r.event_time, parent, pending[0], pending[1]))
                    pending.clear()
        tree.leaves = [k for k, d in enumerate(tree.death) if d == math.inf]
        return tree

    def population_after(self, event_index: int) -> int:
        return self.roots + event_index + 1


def simulate_yule_tree(
    beta: float,
    t: float,
    rng: np.random.Generator,
    roots: int = 1,
    cap: int = 10**6,
) -> YuleTree:
    """Grow a rate-β pure birth genealogy up to time t."""
    tree = YuleTree(horizon=t, roots=roots)
    clocks: list[tuple[float, int]] = []
    for _ in range(roots):
        node = tree._add(-1, 0.0)
        heapq.heappush(clocks, (rng.exponential(1 / beta), node))
    while clocks and clocks[0][0] <= t:
        time, node = heapq.heappop(clocks)
        tree.death[node] = time
        children = [tree._add(node, time), tree._add(node, time)]
        tree.events.append((time, node, *children))
        for child in children:
            heapq.heappush(clocks, (time + rng.exponential(1 / beta), child))
        if len(clocks) > cap:
            raise TruncationError(f"Yule population exceeded {cap} at t={time:.6g}")
    tree.leaves = sorted(node for _, node in clocks)
    return tree


def sample_pair_mrca(
    tree: YuleTree, rng: np.random.Generator | int
) -> tuple[float, int]:
    """Death time of the MRCA of a uniformly chosen leaf pair, and the
    population size right after that death. An integer ``rng`` is a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = stream(rng, TAG_TREE, 2)
    if len(tree.leaves) < 2:
        raise DomainError("Need at least two leaves to sample a pair")
    first, second = rng.choice(len(tree.leaves), size=2, replace=False)
    ancestors = set()
    node = tree.leaves[first]
    while node >= 0:
        ancestors.add(node)
        node = tree.parent[node]
    node = tree.leaves[second]
    while node not in ancestors:
        node = tree.parent[node]
        if node < 0:
            raise DomainError("The two leaves descend from different roots")
    s = tree.death[node]
    event_index = next(k for k, event in enumerate(tree.events) if event[1] == node)
    return s, tree.population_after(event_index)


def sample_mrca_pairs(
    beta: float,
    t: float,
    n_pairs: int,
    seed: int,
    *,
    leaves: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pair per independent tree, conditioned on at least two leaves
    (or on exactly ``leaves`` leaves). Returns (s, i, j) arrays."""
    if leaves is not None and leaves < 2:
        raise DomainError(f"Conditioning needs at least two leaves, got {leaves}")
    rng = stream(seed, TAG_TREE)
    s = np.empty(n_pairs)
    sizes = np.empty(n_pairs, dtype=int)
    totals = np.empty(n_pairs, dtype=int)
    rejected = 0
    k = 0
    while k < n_pairs:
        tree = simulate_yule_tree(beta, t, rng)
        j = len(tree.leaves)
        if j < 2 or (leaves is not None and j != leaves):
            rejected += 1
            continue
        s[k], sizes[k] = sample_pair_mrca(tree, rng)
        totals[k] = j
        k += 1
    logger.debug("Sampled %d pairs, rejected %d trees", n_pairs, rejected)
    return s, sizes, totals


def martingale_limit_samples(
    beta: float, t: float, runs: int, seed: int
) -> np.ndarray:
    """Samples of e^{-βt} X_t for a Yule process X started from one
    individual, simulated through its holding times."""
    if beta * t > MAX_BETA_T:
        raise DomainError(f"beta * t must be at most {MAX_BETA_T}, got {beta * t}")
    rng = stream(seed, TAG_TREE, 1)
    samples = np.empty(runs)
    size = max(16, int(4 * math.exp(beta * t)))
    for k in range(runs):
        elapsed, n = 0.0, 0
        while True:
            # Holding time in state m is Exp(βm); drawn gaps are never discarded.
            rates = beta * np.arange(n + 1, n + size + 1)
            times = elapsed + np.cumsum(rng.standard_exponential(size) / rates)
            passed = int(np.searchsorted(times, t, side="right"))
            if passed < size:
                jumps = n + passed
                break
            elapsed, n = float(times[-1]), n + size
        samples[k] = (jumps + 1) * math.exp(-beta * t)
    return samples


def cdf_table(law: MrcaLaw, points: int = 200) -> pd.DataFrame:
    u = np.linspace(law.t / points, law.t, points)
    return pd.DataFrame({"u": u, "F(u)": mrca_cdf(law, u)})


def size_pmf_table(j: int) -> pd.DataFrame:
    i = np.arange(2, j + 1)
    return pd.DataFrame({"i": i, "p(i)": [pre_coalescence_size_pmf(k, j) for k in i]})
