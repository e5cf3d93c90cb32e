import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from betacoal.coalescent import (
    GenealogyTree,
    IncompleteTreeWarning,
    Partition,
    Stop,
    block_count_at,
    coalescence_time_matrix,
    largest_block_frequency,
    simulate_coalescent,
    time_to_m_blocks,
    total_tree_length,
)
from betacoal.rates import LambdaMeasure
from betacoal.rng import RngStream

BETA = LambdaMeasure.beta(1.5)


def _fixture_tree():
    # 6 leaves: {0,3} at 1, {1,4,5} at 2, {2,7} at 3, root at 4
    return GenealogyTree(
        n=6, times=np.array([1.0, 2.0, 3.0, 4.0]),
        merged=[(0, 3), (1, 4, 5), (2, 7), (6, 8)], end_time=4.0,
    )


def test_fixture_views():
    tree = _fixture_tree()
    assert tree.counts.tolist() == [6, 5, 3, 2, 1]
    assert tree.size[6:].tolist() == [2, 3, 4, 6]
    assert tree.t_mrca == 4.0
    assert block_count_at(tree, 2.0) == 3
    assert block_count_at(tree, 1.999) == 5
    assert tree.partition_at(2.5).canonical() == ((0, 3), (1, 4, 5), (2,))
    assert largest_block_frequency(tree, 3.5) == pytest.approx(4 / 6)
    assert total_tree_length(tree) == pytest.approx(6 + 5 + 3 + 2)
    assert tree.branch_lengths().sum() == pytest.approx(16.0)


def test_coalescence_time_matrix_fixture():
    d = coalescence_time_matrix(_fixture_tree())
    assert d[0, 3] == 1.0 and d[1, 5] == 2.0 and d[4, 2] == 3.0 and d[0, 1] == 4.0
    np.testing.assert_array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)


def test_bad_event_logs_are_rejected():
    with pytest.raises(ValueError):
        GenealogyTree(n=3, times=np.array([1.0, 0.5]), merged=[(0, 1), (2, 3)], end_time=1.0)
    with pytest.raises(ValueError):
        GenealogyTree(n=3, times=np.array([1.0, 2.0]), merged=[(0, 1), (0, 2)], end_time=2.0)
    with pytest.raises(ValueError):
        GenealogyTree(n=3, times=np.array([1.0]), merged=[(0,)], end_time=1.0)
    with pytest.raises(ValueError):
        simulate_coalescent(1, BETA, 0)
    with pytest.raises(ValueError):
        simulate_coalescent(5, BETA, 0, stop=Stop.at_blocks(9))


def test_text_and_json_round_trip():
    tree = simulate_coalescent(40, BETA, RngStream(3, 1))
    assert tree.seed == 3
    back = GenealogyTree.from_text(tree.to_text())
    assert back.to_text() == tree.to_text()
    np.testing.assert_array_equal(back.times, tree.times)
    again = GenealogyTree.from_json(tree.to_json())
    assert again.merged == tree.merged and again.alpha == 1.5
    stopped = simulate_coalescent(40, BETA, 4, stop=Stop.at_time(0.01))
    assert GenealogyTree.from_text(stopped.to_text()).end_time == 0.01


def test_same_seed_same_tree():
    a = simulate_coalescent(300, BETA, RngStream(11, 0))
    b = simulate_coalescent(300, BETA, RngStream(11, 0))
    c = simulate_coalescent(300, BETA, RngStream(11, 1))
    assert a.to_text() == b.to_text()
    assert a.to_text() != c.to_text()


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 200), seed=st.integers(0, 2**32 - 1), alpha=st.floats(1.05, 1.95))
def test_simulated_trees_are_consistent(n, seed, alpha):
    tree = simulate_coalescent(n, LambdaMeasure.beta(alpha), seed)
    assert tree.reached_mrca and tree.size[-1] == n
    d = coalescence_time_matrix(tree)
    # ultrametric: the two largest of d_ij, d_jk, d_ik coincide
    idx = np.random.default_rng(seed).integers(0, n, size=(20, 3))
    for i, j, k in idx:
        x = sorted([d[i, j], d[j, k], d[i, k]])
        assert x[1] == x[2]
    # partitions only coarsen
    ts = np.sort(np.random.default_rng(seed).uniform(0, tree.t_mrca, 4))
    parts = [tree.partition_at(t) for t in ts]
    for early, late in zip(parts, parts[1:]):
        assert late.is_coarsening_of(early)


def test_stop_rules():
    tree = simulate_coalescent(500, BETA, 1, stop=Stop.at_blocks(20))
    assert tree.n_blocks_final <= 20 and not tree.reached_mrca
    with pytest.raises(ValueError):
        tree.t_mrca
    tree = simulate_coalescent(500, BETA, 1, stop=Stop.at_time(0.05))
    assert tree.end_time == 0.05 and tree.times[-1] <= 0.05
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        total_tree_length(tree)
    assert any(issubclass(x.category, IncompleteTreeWarning) for x in w)
    assert time_to_m_blocks(tree, 1) == (None, False)


def test_time_to_m_blocks_edges():
    tree = _fixture_tree()
    assert time_to_m_blocks(tree, 6) == (0.0, True)
    assert time_to_m_blocks(tree, 1) == (4.0, True)
    assert time_to_m_blocks(tree, 4) == (2.0, False)
    assert time_to_m_blocks(tree, 3) == (2.0, True)


def test_partition_coarsening_check():
    fine = Partition(4, np.array([0, 1, 2, 3]))
    coarse = Partition(4, np.array([0, 0, 2, 2]))
    assert coarse.is_coarsening_of(fine) and not fine.is_coarsening_of(coarse)
    assert coarse.block_sizes().tolist() == [2, 2]


def _mean(values):
    v = np.asarray(values)
    return v.mean(), v.std(ddof=1) / math.sqrt(len(v))


def test_pair_coalescence_time_is_unit_exponential():
    m, se = _mean([simulate_coalescent(2, BETA, s).t_mrca for s in range(4000)])
    assert abs(m - 1.0) < 4 * se


def test_kingman_three_leaves():
    trees = [simulate_coalescent(3, LambdaMeasure.kingman(), s) for s in range(4000)]
    m, se = _mean([t.t_mrca for t in trees])
    assert abs(m - 4 / 3) < 4 * se
    m, se = _mean([total_tree_length(t) for t in trees])
    assert abs(m - 3.0) < 4 * se


def test_beta_three_leaves_mean_height():
    # rate 2.5 to leave 3 blocks, triple merger w.p. 0.1, else one more Exp(1)
    m, se = _mean([simulate_coalescent(3, BETA, s).t_mrca for s in range(4000)])
    assert abs(m - (1 / 2.5 + 0.9)) < 4 * se


def test_uniform_measure_runs_through_table_sampler():
    tree = simulate_coalescent(50, LambdaMeasure.uniform(), 2)
    assert tree.reached_mrca and tree.alpha is None


def test_first_merger_law_at_three_leaves():
    # exact enumeration: triple w.p. 0.25/2.5, each of the three pairs w.p. 0.3
    reps = 20_000
    counts = {}
    for s in range(reps):
        first = simulate_coalescent(3, BETA, s).merged[0]
        counts[first] = counts.get(first, 0) + 1
    for pattern, p in {(0, 1, 2): 0.1, (0, 1): 0.3, (0, 2): 0.3, (1, 2): 0.3}.items():
        se = math.sqrt(p * (1 - p) / reps)
        assert abs(counts.get(pattern, 0) / reps - p) < 3 * se


@pytest.mark.slow
def test_first_merged_subset_is_uniform():
    from scipy.stats import chisquare

    from betacoal.rates import RateTable

    reps = 100_000
    counts = {}
    for s in range(reps):
        first = simulate_coalescent(4, BETA, s).merged[0]
        counts[first] = counts.get(first, 0) + 1
    size_p = RateTable(4, BETA).merger_size_probs(4)  # index k - 2
    for k, n_sub in ((2, 6), (3, 4)):
        obs = [v for key, v in counts.items() if len(key) == k]
        assert len(obs) == n_sub
        assert chisquare(obs).pvalue > 0.001
        assert abs(sum(obs) / reps - size_p[k - 2]) < 4 * math.sqrt(size_p[k - 2] / reps)


def _coin_flip_merger(b, alpha, gen):
    """One event of the x-merger construction, thinned to events that change b blocks.

    Events (t, x) arrive at rate x^-2 Lambda(dx) dt and every block joins with
    probability x. Only events with two or more participants matter; their rate
    is bounded by C(b, 2) Lambda(dx), so proposing x ~ Lambda and accepting with
    P(>= 2 heads) / (C(b, 2) x^2) is exact, with no truncation of small x.
    """
    pairs = b * (b - 1) / 2
    tries = 0
    while True:
        tries += 1
        x = gen.beta(2 - alpha, alpha)
        p2 = 1 - (1 - x) ** b - b * x * (1 - x) ** (b - 1)
        if gen.random() * pairs * x * x < p2:
            # Binomial(b, x) given k >= 2, drawn from its pmf (x can be tiny)
            k = np.arange(2, b + 1)
            w = np.exp(binom.logpmf(k, b, x))
            return int(gen.choice(k, p=w / w.sum())), tries


def test_jump_chain_matches_coin_flip_construction():
    from betacoal.rates import RateTable
    from betacoal.stats import chi2_gof

    b, a, reps = 10, 1.5, 40_000
    gen = np.random.default_rng(17)
    draws = [_coin_flip_merger(b, a, gen) for _ in range(reps)]
    ks = np.array([d[0] for d in draws])
    table = RateTable(b, LambdaMeasure.beta(a))
    probs = table.merger_size_probs(b)
    obs = np.bincount(ks, minlength=b + 1)[2:]
    assert chi2_gof(obs, probs)[2] > 0.001
    # acceptance rate times C(b, 2) estimates the total event rate G_b
    acc = reps / sum(d[1] for d in draws)
    G = acc * b * (b - 1) / 2
    se = G * math.sqrt((1 - acc) / reps)
    assert abs(G - table.total_rates[b]) < 4 * se


def test_kingman_block_counting_is_pure_death():
    from scipy.stats import ks_2samp

    n, m, reps = 10, 3, 3000
    sim = []
    for s in range(reps):
        t, hit = time_to_m_blocks(simulate_coalescent(n, LambdaMeasure.kingman(), s), m)
        assert hit
        sim.append(t)
    gen = np.random.default_rng(5)
    rates = np.array([b * (b - 1) / 2 for b in range(m + 1, n + 1)])
    death = gen.exponential(1 / rates, size=(reps, len(rates))).sum(axis=1)
    assert ks_2samp(sim, death).pvalue > 0.001


@pytest.mark.slow
def test_time_to_hundred_blocks():
    # T_m ~ alpha Gamma(alpha) m^{1-alpha}; at alpha = 1.5, m = 100 this is 0.1329
    target = 1.5 * math.gamma(1.5) * 100 ** -0.5
    t = [time_to_m_blocks(simulate_coalescent(10_000, BETA, RngStream(7, s), stop=Stop.at_blocks(100)), 100)[0]
         for s in range(200)]
    assert abs(np.mean(t) / target - 1) < 0.15


@pytest.mark.slow
def test_scaled_total_length():
    target = 1.5 * 0.5 * math.gamma(1.5) / 0.5
    lengths = [total_tree_length(simulate_coalescent(2000, BETA, RngStream(8, s))) for s in range(100)]
    assert abs(2000 ** -0.5 * np.mean(lengths) / target - 1) < 0.2


def _exact_mean_length(n, measure):
    # E[L_n] from the block-counting chain: visit probabilities times b / G_b
    from betacoal.rates import RateTable

    table = RateTable(n, measure)
    visit = np.zeros(n + 1)
    visit[n] = 1.0
    total = 0.0
    for b in range(n, 1, -1):
        total += visit[b] * b / table.total_rates[b]
        k = np.arange(2, b + 1)
        np.add.at(visit, b - k + 1, visit[b] * table.merger_size_probs(b))
    return total


def test_mean_total_length_matches_block_counting_chain():
    assert _exact_mean_length(3, LambdaMeasure.kingman()) == pytest.approx(3.0)
    n, reps = 60, 3000
    m, se = _mean([total_tree_length(simulate_coalescent(n, BETA, RngStream(12, s))) for s in range(reps)])
    assert abs(m - _exact_mean_length(n, BETA)) < 4 * se
