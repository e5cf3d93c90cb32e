import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betacoal.gw import (
    PopulationCapError,
    _truncated_poisson,
    gw_pgf,
    kesten_stigum_estimate,
    kesten_stigum_laplace,
    simulate_gw,
    simulate_marked_gw,
    simulate_queue,
    simulate_xi_tau,
    simulate_xi_tau_batch,
)
from betacoal.rates import xi_tau_pmf
from betacoal.stats import chi2_gof


def test_pgf_boundaries_and_mean():
    assert gw_pgf(0.3, 0.0, 1.5) == pytest.approx(0.3)
    assert gw_pgf(1.0, 2.0, 1.5) == 1.0
    # d/dr at r = 1 is E[xi_t] = e^{t/(alpha-1)}; the one-sided difference is off by O(h^{alpha-1})
    h = 1e-10
    slope = (1 - gw_pgf(1 - h, 0.7, 1.5)) / h
    assert slope == pytest.approx(math.exp(1.4), rel=1e-3)


def test_pgf_solves_backward_equation():
    from scipy.integrate import solve_ivp

    from betacoal.rates import chi_pgf

    a, r = 1.5, 0.4
    sol = solve_ivp(lambda _, F: [chi_pgf(F[0], a) - F[0]], (0, 1.2), [r], rtol=1e-11, atol=1e-13)
    assert gw_pgf(r, 1.2, a) == pytest.approx(sol.y[0, -1], rel=1e-8)


def test_population_matches_pgf():
    a, t, reps = 1.5, 0.5, 4000
    pops = np.array([simulate_gw(a, 1, t, s).population_at(t) for s in range(reps)])
    for r in (0.3, 0.7):
        vals = r ** pops
        se = vals.std(ddof=1) / math.sqrt(reps)
        assert abs(vals.mean() - gw_pgf(r, t, a)) < 4 * se
    # P(xi_t = 1) = e^{-t}
    assert abs(np.mean(pops == 1) - math.exp(-t)) < 4 * math.sqrt(math.exp(-t) * (1 - math.exp(-t)) / reps)


def test_tree_bookkeeping():
    tree = simulate_gw(1.5, 3, 1.0, 7)
    times, values = tree.population_curve()
    assert values[0] == 3 and values[-1] == tree.population_at(1.0)
    assert np.all(np.diff(values) >= 1)
    assert np.all(tree.birth[tree.parent >= 0] == tree.death[tree.parent[tree.parent >= 0]])
    assert kesten_stigum_estimate(tree, 1.5) == pytest.approx(math.exp(-2.0) * tree.population_at(1.0))
    with pytest.raises(ValueError):
        tree.population_at(2.0)


def test_cap_raises_with_partial_tree():
    with pytest.raises(PopulationCapError) as err:
        simulate_gw(1.5, 1, 50.0, 1, cap=500)
    assert err.value.partial is not None and len(err.value.partial) > 500


def test_normalised_transform_converges_to_limit():
    a = 1.5
    # at t = 10 the lag is O(e^{-t}) and 1 - r is still far above rounding
    t = 10.0
    for s in (0.5, 1.0, 3.0):
        r = math.exp(-s * math.exp(-t / (a - 1)))
        assert gw_pgf(r, t, a) == pytest.approx(kesten_stigum_laplace(s, a), rel=2e-4)


def test_kesten_stigum_laplace_by_simulation():
    a, t, reps = 1.5, 2.0, 1500
    w = np.array([kesten_stigum_estimate(simulate_gw(a, 1, t, s), a) for s in range(reps)])
    for s in (0.5, 2.0):
        v = np.exp(-s * w)
        exact = gw_pgf(math.exp(-s * math.exp(-t / (a - 1))), t, a)
        assert abs(v.mean() - exact) < 4 * v.std(ddof=1) / math.sqrt(reps)


def test_xi_tau_simulation_matches_pmf():
    a, reps = 1.5, 40_000
    x = simulate_xi_tau_batch(a, reps, 3)
    k = np.arange(1, 6)
    probs = xi_tau_pmf(k, a)
    obs = np.concatenate([[np.sum(x == j) for j in k], [np.sum(x > 5)]])
    _, _, p = chi2_gof(obs, np.concatenate([probs, [1 - probs.sum()]]))
    assert p > 1e-4
    single = [simulate_xi_tau(1.9, s, cap=1000) for s in range(3000)]
    assert abs(np.mean(np.array(single) == 1) - 0.1) < 4 * math.sqrt(0.09 / 3000)


def test_truncated_poisson():
    gen = np.random.default_rng(0)
    mu = np.full(50_000, 0.8)
    k = _truncated_poisson(mu, gen.random(mu.size))
    assert k.min() >= 1
    mean = 0.8 / -math.expm1(-0.8)
    var = mean * (1 + 0.8 - mean)
    assert abs(k.mean() - mean) < 4 * math.sqrt(var / mu.size)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), theta=st.floats(0.1, 3.0), t=st.floats(0.5, 3.0))
def test_marked_tree_identities(seed, theta, t):
    s = simulate_marked_gw(1.5, theta, t, seed)
    assert s.identity_violations() == 0
    assert sum(s.L_k.values()) + s.K_t == s.M_t
    assert sum(k * v for k, v in s.N_k_gw.items()) + s.ancestral_size == s.population


def test_unmarked_tree():
    s = simulate_marked_gw(1.5, 0.0, 3.0, 4)
    assert s.M_t == 0 and s.K_t == 0 and not s.M_k_gw
    assert s.ancestral_size == s.population


def test_marks_on_later_lineages_grow_K():
    # K_t keeps growing as old marks acquire marked descendants
    a, reps = 1.5, 300
    K4 = np.mean([simulate_marked_gw(a, 1.0, 4.0, s).K_t for s in range(reps)])
    K6 = np.mean([simulate_marked_gw(a, 1.0, 6.0, s).K_t for s in range(reps)])
    assert K6 > K4 > 0


def test_queue_without_arrivals_only_drains():
    q = simulate_queue(0.0, 1.0, 1.0, 5.0, 2, initial=40)
    assert q.length[0] == 40
    assert np.all(np.diff(q.length) <= 0)
    assert q.at(0.0) == 40 and q.final() == q.length[-1]


def test_queue_stationary_start_is_poisson():
    A, c, lam, t, reps = 2.0, 1.0, 0.5, 1.5, 3000
    final = np.array([simulate_queue(A, c, lam, t, s, initial="stationary").final() for s in range(reps)])
    mean = A * math.exp(c * t) / (lam + c)
    assert abs(final.mean() - mean) < 4 * math.sqrt(mean / reps)
    assert abs(final.var(ddof=1) / mean - 1) < 0.1


def test_queue_time_varying_service():
    # a constant function should agree in law with the constant rate
    A, c, t, reps = 1.0, 1.0, 2.0, 1500
    const = np.array([simulate_queue(A, c, 1.0, t, s).final() for s in range(reps)])
    func = np.array([simulate_queue(A, c, lambda v: 1.0, t, s + 10**6).final() for s in range(reps)])
    se = math.sqrt(const.var(ddof=1) / reps + func.var(ddof=1) / reps)
    assert abs(const.mean() - func.mean()) < 4 * se
    with pytest.raises(ValueError):
        simulate_queue(1.0, 1.0, lambda v: 1.0, 1.0, 0, initial="stationary")
    assert simulate_queue(1.0, 1.0, 1.0, 1.0, 0).to_csv().startswith("t,Q\n0.0,0\n")


def test_zero_horizon():
    tree = simulate_gw(1.5, 1, 0.0, 0)
    assert len(tree) == 1 and tree.population_at(0.0) == 1
    assert kesten_stigum_estimate(tree, 1.5) == 1.0


def test_no_birth_by_time_one():
    reps = 20_000
    none = np.mean([len(simulate_gw(1.5, 1, 1.0, s)) == 1 for s in range(reps)])
    p = math.exp(-1)
    assert abs(none - p) < 3 * math.sqrt(p * (1 - p) / reps)


def test_offspring_law():
    from betacoal.rates import chi_pmf

    kids = np.concatenate([simulate_gw(1.5, 1, 3.0, s).offspring for s in range(60)])
    assert kids.size >= 10_000
    k = np.arange(2, 8)
    probs = chi_pmf(k, 1.5)
    obs = np.append([np.sum(kids == j) for j in k], np.sum(kids > 7))
    assert chi2_gof(obs, np.append(probs, 1 - probs.sum()))[2] > 0.001


@pytest.mark.slow
def test_mean_population_and_martingale():
    # the population has infinite variance (chi does), so these CIs are optimistic
    reps = 10_000
    trees = [simulate_gw(1.5, 1, 3.0, s) for s in range(reps)]
    pop2 = np.array([t.population_at(2.0) for t in trees], dtype=float)
    assert abs(pop2.mean() - math.exp(4)) < 3 * pop2.std(ddof=1) / math.sqrt(reps)
    for t in (1.0, 2.0, 3.0):
        w = np.array([kesten_stigum_estimate(tr, 1.5, t) for tr in trees])
        assert abs(w.mean() - 1.0) < 3 * w.std(ddof=1) / math.sqrt(reps)


@pytest.mark.slow
def test_normalised_population_settles():
    reps = 400
    w = np.array([[kesten_stigum_estimate(tr, 1.5, t) for t in (2.0, 3.0, 4.0)]
                  for tr in (simulate_gw(1.5, 1, 4.0, s) for s in range(reps))])
    assert np.corrcoef(w[:, 1], w[:, 2])[0, 1] > 0.9
    # heavy tails make the sample variance unstable; the mean absolute step is used instead
    assert np.mean(np.abs(w[:, 2] - w[:, 1])) < np.mean(np.abs(w[:, 1] - w[:, 0]))


@pytest.mark.slow
def test_mark_ratio_tends_to_xi_tau():
    stats = [simulate_marked_gw(1.5, 1.0, 6.0, s) for s in range(1000)]
    M = np.array([s.M_t for s in stats], dtype=float)
    for k in (1, 2, 3):
        Mk = np.array([s.M_k_gw.get(k, 0) for s in stats], dtype=float)
        ratio = Mk.sum() / M.sum()
        # marks within a tree are dependent: ratio-estimator SE over trees
        se = np.std(Mk - ratio * M, ddof=1) / (math.sqrt(len(M)) * M.mean())
        assert abs(ratio - xi_tau_pmf(k, 1.5)) < 3 * se
