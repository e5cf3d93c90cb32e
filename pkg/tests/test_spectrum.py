import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betacoal.coalescent import GenealogyTree, Partition, simulate_coalescent
from betacoal.rates import LambdaMeasure
from betacoal.spectrum import (
    MutationSet,
    SpectrumCounts,
    allele_frequency_spectrum,
    ewens_probability,
    integer_partitions,
    mutations_with_mutated_descendant,
    sample_family_size,
    scatter_mutations,
    site_frequency_spectrum,
    spectrum_counts,
    wrapped_spectrum,
)


def _tree():
    return GenealogyTree(
        n=6, times=np.array([1.0, 2.0, 3.0, 4.0]),
        merged=[(0, 3), (1, 4, 5), (2, 7), (6, 8)], end_time=4.0,
    )


def _marks():
    # one mark on each of the blocks {0,3}, {3}, {1,2,4,5}, {1,4,5}
    return MutationSet.from_pairs([(6, 2.0), (3, 0.5), (8, 3.5), (7, 2.5)], theta=1.0)


def test_hand_built_fixture():
    tree, muts = _tree(), _marks()
    muts.validate(tree)
    sc = spectrum_counts(tree, muts)
    assert sc.M_k.tolist() == [1, 1, 1, 1, 0]
    assert sc.M_total == 4
    assert sc.allelic_partition.canonical() == ((0,), (1, 4, 5), (2,), (3,))
    assert sc.N_k.tolist() == [3, 0, 1, 0, 0, 0]
    assert sc.ancestral_size == 0
    assert sc.K == 2


def test_fixture_with_ancestral_leaves():
    tree = _tree()
    muts = MutationSet.from_pairs([(7, 2.5)])
    sc = spectrum_counts(tree, muts)
    # {1,4,5} mutant, {0,2,3} ancestral
    assert sc.ancestral_size == 3
    assert sc.N_k.tolist() == [0, 0, 2, 0, 0, 0]
    assert sc.N_k_derived.tolist() == [0, 0, 1, 0, 0, 0]
    assert sc.K == 0


def test_marks_off_the_tree_are_rejected():
    tree = _tree()
    with pytest.raises(ValueError):
        MutationSet.from_pairs([(6, 0.5)]).validate(tree)
    with pytest.raises(ValueError):
        MutationSet.from_pairs([(9, 4.5)]).validate(tree)
    with pytest.raises(ValueError):
        site_frequency_spectrum(tree, MutationSet.from_pairs([(9, 4.0)]))


def test_two_marks_on_one_branch():
    tree = _tree()
    muts = MutationSet.from_pairs([(8, 3.2), (8, 3.7)])
    assert mutations_with_mutated_descendant(tree, muts) == 1
    assert allele_frequency_spectrum(tree, muts).tolist() == [0, 1, 0, 1, 0, 0]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 120), seed=st.integers(0, 2**32 - 1), theta=st.floats(0.1, 5.0))
def test_spectrum_identities_on_random_trees(n, seed, theta):
    gen = np.random.default_rng(seed)
    tree = simulate_coalescent(n, LambdaMeasure.beta(1.5), gen)
    muts = scatter_mutations(tree, theta, gen)
    muts.validate(tree)
    sc = spectrum_counts(tree, muts)
    k = np.arange(1, n + 1)
    assert sc.M_k.sum() == sc.M_total
    assert np.dot(k, sc.N_k) == n
    assert 0 <= sc.K <= sc.M_total
    assert np.all(np.abs(sc.M_k - sc.N_k_derived[: n - 1]) <= sc.K)
    assert sc.N_k_derived.sum() <= sc.M_total


def test_zero_rate_gives_no_marks():
    tree = simulate_coalescent(30, LambdaMeasure.beta(1.5), 1)
    sc = spectrum_counts(tree, scatter_mutations(tree, 0.0, 2))
    assert sc.M_total == 0 and sc.K == 0
    assert sc.ancestral_size == 30 and sc.N_k[-1] == 1
    assert sample_family_size(sc, 0) is None


def test_ewens_small_cases():
    assert ewens_probability((3, 0, 0), 1.0) == pytest.approx(1 / 6)
    assert ewens_probability((1, 1, 0), 1.0) == pytest.approx(1 / 2)
    assert ewens_probability((0, 0, 1), 1.0) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        ewens_probability((1, 0), 0.0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), theta=st.floats(0.05, 20.0))
def test_ewens_sums_to_one(n, theta):
    total = math.fsum(ewens_probability(a, theta) for a in integer_partitions(n))
    assert total == pytest.approx(1.0, rel=1e-10)


def test_integer_partition_counts():
    assert [len(list(integer_partitions(n))) for n in range(1, 9)] == [1, 2, 3, 5, 7, 11, 15, 22]


def _counts(n, M_k):
    M_k = np.asarray(M_k)
    return SpectrumCounts(n=n, M_k=M_k, N_k=np.zeros(n, dtype=int), M_total=int(M_k.sum()),
                          allelic_partition=Partition(n, np.zeros(n, dtype=int)), ancestral_size=0, K=0)


def test_wrapped_spectrum():
    assert wrapped_spectrum(_counts(5, [1, 0, 0, 0])).tolist() == [1, 0]
    assert wrapped_spectrum(_counts(5, [2, 0, 0, 3])).tolist() == [5, 0]
    # even n: the middle class is not doubled
    assert wrapped_spectrum(_counts(6, [0, 1, 4, 2, 0])).tolist() == [0, 3, 4]


def test_family_size_sampling():
    sc = _counts(6, [0, 5, 0, 0, 0])
    assert {sample_family_size(sc, s) for s in range(20)} == {2}
    sc = _counts(6, [3, 0, 1, 0, 0])
    draws = [sample_family_size(sc, s) for s in range(4000)]
    assert set(draws) == {1, 3}
    assert abs(np.mean(np.array(draws) == 3) - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 4000)


def test_csv_output():
    text = spectrum_counts(_tree(), _marks()).to_csv()
    lines = text.splitlines()
    assert lines[0] == "k,M_k,N_k"
    assert lines[1] == "1,1,3" and lines[-1] == "6,0,0"
    wrapped = spectrum_counts(_tree(), _marks()).to_csv(wrapped=True).splitlines()
    assert wrapped == ["k,M_hat_k", "1,1", "2,2", "3,1"]


def test_mark_count_is_poisson_in_tree_length():
    tree = simulate_coalescent(20, LambdaMeasure.beta(1.5), 9)
    L = tree.branch_lengths().sum()
    counts = np.array([len(scatter_mutations(tree, 2.0, s)) for s in range(3000)])
    assert abs(counts.mean() - 2.0 * L) < 4 * math.sqrt(2.0 * L / 3000)


def test_family_size_uniform_on_two_classes():
    sc = _counts(5, [1, 1, 0, 0])
    draws = np.array([sample_family_size(sc, s) for s in range(4000)])
    assert set(draws.tolist()) == {1, 2}
    assert abs(np.mean(draws == 1) - 0.5) < 4 * math.sqrt(0.25 / 4000)


def test_single_sample_ewens():
    assert ewens_probability((1,), 0.7) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def large_sample_spectra():
    from betacoal.rng import RngStream

    out = []
    for r in range(400):
        gen = RngStream(31, r).generator()
        tree = simulate_coalescent(2000, LambdaMeasure.beta(1.5), gen)
        sc = spectrum_counts(tree, scatter_mutations(tree, 1.0, gen))
        out.append((sc, sample_family_size(sc, gen)))
    return out


def test_scaled_allele_class_two(large_sample_spectra):
    from betacoal.rates import limit_constants

    target = limit_constants(1.5, 1.0).spectrum_const(2)
    assert target == pytest.approx(0.1662, abs=1e-4)
    n2 = np.mean([sc.N_k_derived[1] for sc, _ in large_sample_spectra]) * 2000 ** -0.5
    assert abs(n2 / target - 1) < 0.2


def test_wrapped_and_plain_ratios_agree(large_sample_spectra):
    M = np.array([sc.M_total for sc, _ in large_sample_spectra], dtype=float)
    for k in (1, 2, 3):
        plain = np.array([sc.M_k[k - 1] for sc, _ in large_sample_spectra], dtype=float)
        wrapped = np.array([wrapped_spectrum(sc)[k - 1] for sc, _ in large_sample_spectra], dtype=float)
        r = plain.sum() / M.sum()
        # marks within a tree are dependent: ratio-estimator SE over trees
        se = np.std(plain - r * M, ddof=1) / (math.sqrt(len(M)) * M.mean())
        assert abs(wrapped.sum() / M.sum() - r) < 1.96 * se


def test_family_size_law_is_xi_tau(large_sample_spectra):
    from betacoal.rates import xi_tau_pmf
    from betacoal.stats import chi2_gof

    draws = np.array([f for _, f in large_sample_spectra if f is not None])
    probs = xi_tau_pmf(np.arange(1, 4), 1.5)
    obs = [np.sum(draws == 1), np.sum(draws == 2), np.sum(draws == 3), np.sum(draws > 3)]
    assert chi2_gof(obs, np.append(probs, 1 - probs.sum()))[2] > 0.001
