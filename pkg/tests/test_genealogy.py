import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate, stats

from bbm_obstacles import (
    ConfigError,
    DomainError,
    MrcaLaw,
    SimConfig,
    TruncationError,
    YuleTree,
    cdf_table,
    martingale_limit_samples,
    mrca_cdf,
    mrca_density,
    pre_coalescence_size_pmf,
    run_free_bbm,
    sample_mrca_pairs,
    sample_pair_mrca,
    simulate_yule_tree,
    size_pmf_table,
    yule_count_pmf,
)


@pytest.mark.parametrize("t", [0.3, 1.0, 5.0, 20.0])
def test_cdf_reaches_one_at_horizon(t: float) -> None:
    assert mrca_cdf(MrcaLaw(t), t) == pytest.approx(1.0, rel=1e-12)


def test_cdf_is_monotone() -> None:
    law = MrcaLaw(4.0)
    values = mrca_cdf(law, np.linspace(1e-4, 4.0, 2000))
    assert np.all(np.diff(values) >= -1e-15)
    assert 0.0 < values[0] < 1e-3


def test_cdf_is_continuous_where_series_takes_over() -> None:
    law = MrcaLaw(3.0)
    below = mrca_cdf(law, 0.5 - 1e-9)
    above = mrca_cdf(law, 0.5 + 1e-9)
    assert below == pytest.approx(above, abs=1e-8)
    assert mrca_density(law, 0.5 - 1e-9) == pytest.approx(
        mrca_density(law, 0.5 + 1e-9), abs=1e-7
    )


@pytest.mark.parametrize("t", [0.4, 2.0, 8.0])
def test_density_integrates_to_one(t: float) -> None:
    law = MrcaLaw(t)
    total, _ = integrate.quad(lambda u: mrca_density(law, u), 0.0, t)
    assert total == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("u", [0.2, 1.0, 2.5])
def test_density_is_derivative_of_cdf(u: float) -> None:
    law = MrcaLaw(3.0)
    h = 1e-6
    slope = (mrca_cdf(law, u + h) - mrca_cdf(law, u - h)) / (2 * h)
    assert mrca_density(law, u) == pytest.approx(slope, rel=1e-5)


def test_rate_rescales_time() -> None:
    fast = MrcaLaw(2.0, beta=1.5)
    unit = MrcaLaw(3.0)
    assert mrca_cdf(fast, 1.0) == pytest.approx(mrca_cdf(unit, 1.5), rel=1e-14)
    assert mrca_density(fast, 1.0) == pytest.approx(1.5 * mrca_density(unit, 1.5), rel=1e-14)


def test_law_support() -> None:
    law = MrcaLaw(2.0)
    with pytest.raises(DomainError):
        mrca_cdf(law, 0.0)
    with pytest.raises(DomainError):
        mrca_cdf(law, np.array([0.5, 2.1]))
    with pytest.raises(DomainError):
        mrca_density(law, 2.0)
    with pytest.raises(ConfigError):
        MrcaLaw(0.0)


@pytest.mark.parametrize("j", [2, 3, 5, 17, 100])
def test_size_pmf_sums_to_one(j: int) -> None:
    total = sum(pre_coalescence_size_pmf(i, j, exact=True) for i in range(2, j + 1))
    assert total == 1


def test_size_pmf_values() -> None:
    assert pre_coalescence_size_pmf(2, 5, exact=True) == Fraction(1, 2)
    assert pre_coalescence_size_pmf(2, 2) == 1.0
    with pytest.raises(DomainError):
        pre_coalescence_size_pmf(1, 5)
    with pytest.raises(DomainError):
        pre_coalescence_size_pmf(6, 5)


def test_yule_count_pmf() -> None:
    assert yule_count_pmf(1, 1, 1.0) == pytest.approx(math.exp(-1.0))
    total = sum(yule_count_pmf(2, j, 1.0) for j in range(2, 400))
    assert total == pytest.approx(1.0, rel=1e-9)
    assert yule_count_pmf(3, 3, 0.0) == 1.0
    with pytest.raises(DomainError):
        yule_count_pmf(3, 2, 1.0)


@pytest.mark.parametrize("i", [2, 3])
def test_yule_count_pmf_is_a_convolution_of_geometric_laws(i: int) -> None:
    # Each of the i founders grows an independent Yule family.
    u, beta = 0.7, 1.5
    single = stats.geom.pmf(np.arange(60), math.exp(-beta * u))
    law = single
    for _ in range(i - 1):
        law = np.convolve(law, single)
    for j in range(i, 40):
        assert yule_count_pmf(i, j, u, beta) == pytest.approx(law[j], rel=1e-9, abs=1e-15)


def test_sampled_mrca_times_follow_the_law() -> None:
    s, sizes, totals = sample_mrca_pairs(1.0, 3.0, 20_000, seed=4)
    law = MrcaLaw(3.0)
    assert np.all((s > 0) & (s <= 3.0))
    assert np.all((sizes >= 2) & (sizes <= totals))
    assert stats.kstest(s, lambda u: mrca_cdf(law, u)).pvalue > 0.001


def test_sampled_sizes_follow_the_law() -> None:
    # Two of three independent seeds must pass.
    i = np.arange(2, 6)
    expected = [3000 * pre_coalescence_size_pmf(v, 5) for v in i]
    pvalues = []
    for seed in (8, 9, 10):
        _, sizes, totals = sample_mrca_pairs(1.0, 2.0, 3000, seed=seed, leaves=5)
        assert np.all(totals == 5)
        observed = [np.count_nonzero(sizes == v) for v in i]
        pvalues.append(stats.chisquare(observed, expected).pvalue)
    assert sum(p > 0.01 for p in pvalues) >= 2


@pytest.mark.parametrize("beta", [0.5, 2.0])
def test_rate_change_is_a_time_change(beta: float) -> None:
    # A rate-β tree up to t is a rate-1 tree up to βt with time divided by β.
    reference, _, _ = sample_mrca_pairs(1.0, 2.0, 5000, seed=12)
    s, _, _ = sample_mrca_pairs(beta, 2.0 / beta, 5000, seed=13)
    assert stats.ks_2samp(beta * s, reference).pvalue > 0.001


def test_conditioning_needs_two_leaves() -> None:
    with pytest.raises(DomainError):
        sample_mrca_pairs(1.0, 2.0, 10, seed=0, leaves=1)


def test_martingale_limit_has_unit_mean() -> None:
    samples = martingale_limit_samples(1.0, 6.0, 2000, seed=2)
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    assert abs(samples.mean() - 1.0) < 4 * se
    assert np.all(samples > 0)


def test_martingale_limit_is_exponential() -> None:
    samples = martingale_limit_samples(1.0, 8.0, 2000, seed=4)
    assert stats.kstest(samples, "expon").pvalue > 0.001


def test_yule_population_is_geometric() -> None:
    # X_t is geometric with parameter e^{-βt}, tail included.
    beta, t, runs = 1.0, 3.0, 5000
    law = stats.geom(math.exp(-beta * t))
    counts = np.rint(martingale_limit_samples(beta, t, runs, seed=6) * math.exp(beta * t))
    block = int(4 * math.exp(beta * t))
    assert stats.binomtest(int(np.sum(counts > block)), runs, law.sf(block)).pvalue > 0.001
    edges = np.array([0, 9, 19, 29, 39, 49, 59, np.inf])
    observed = np.histogram(counts, bins=edges + 0.5)[0]
    assert stats.chisquare(observed, runs * np.diff(law.cdf(edges))).pvalue > 0.001


def test_martingale_limit_horizon() -> None:
    with pytest.raises(DomainError):
        martingale_limit_samples(1.0, 13.0, 10, seed=0)


def test_tree_from_log_matches_population() -> None:
    config = SimConfig(d=1, beta=1.0, t_max=3.0, obs_times=(3.0,), seed=9)
    curve, log = run_free_bbm(config)
    tree = YuleTree.from_log(log)
    assert tree.roots == 1
    assert len(tree.leaves) == curve.counts[-1]
    assert len(tree.events) == len(tree.leaves) - 1
    if len(tree.leaves) >= 2:
        s, size = sample_pair_mrca(tree, 0)
        assert 0 < s <= 3.0
        assert 2 <= size <= len(tree.leaves)


def test_simulated_tree_shape() -> None:
    tree = simulate_yule_tree(1.0, 2.0, np.random.default_rng(3))
    assert len(tree.leaves) == 1 + len(tree.events)
    times = [event[0] for event in tree.events]
    assert times == sorted(times)
    assert all(tree.death[leaf] == math.inf for leaf in tree.leaves)


def test_simulated_tree_cap() -> None:
    with pytest.raises(TruncationError):
        simulate_yule_tree(1.0, 10.0, np.random.default_rng(0), cap=10)


def test_pair_needs_two_leaves() -> None:
    tree = simulate_yule_tree(1.0, 1e-9, np.random.default_rng(0))
    assert tree.leaves == [0]
    with pytest.raises(DomainError):
        sample_pair_mrca(tree, 0)


def test_tables() -> None:
    table = cdf_table(MrcaLaw(2.0), points=50)
    assert list(table.columns) == ["u", "F(u)"]
    assert table["F(u)"].iloc[-1] == pytest.approx(1.0)
    sizes = size_pmf_table(6)
    assert sizes["i"].tolist() == [2, 3, 4, 5, 6]
    assert sizes["p(i)"].sum() == pytest.approx(1.0)
