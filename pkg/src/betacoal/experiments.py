"""Named experiments: configuration, replicate orchestration and run directories.

Every experiment is a function ``(config, files) -> StatReport``; ``files``
collects CSV text keyed by file name, written next to ``config.json`` and
``report.json`` when the run has an output directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats as sps

from . import csbp as cs
from .coalescent import (
    Stop,
    coalescence_time_matrix,
    largest_block_frequency,
    rate_table_for,
    scaled_block_count_average,
    simulate_coalescent,
)
from .gw import simulate_marked_gw, simulate_queue, simulate_xi_tau_batch
from .rates import (
    LambdaMeasure,
    ModelConstants,
    RateTable,
    collision_rate,
    csbp_laplace_u,
    limit_constants,
    xi_tau_pmf,
    xi_tau_pmf_recursive,
)
from .rng import RngStream
from .spectrum import (
    allele_partition,
    ewens_probability,
    integer_partitions,
    scatter_mutations,
    spectra_summary_json,
    spectrum_counts,
)
from .stats import (
    DERIVED,
    ELEMENTARY,
    STATED,
    Metric,
    StatReport,
    chi2_gof,
    chi2_two_sample,
    mean_se,
    two_proportion_test,
    z_p_value,
)


class UnknownExperimentError(KeyError):
    pass


class ExperimentError(RuntimeError):
    """A module-level failure, re-raised with the experiment it happened in."""


@dataclass
class ExperimentConfig:
    """Parameters of one run. Unset fields fall back to the experiment's defaults."""

    experiment: str
    seed: int
    alpha: float | None = None
    theta: float | None = None
    n: int | None = None
    epsilon: float | None = None
    horizons: tuple[float, ...] | None = None
    replicates: int | None = None
    out: str | None = None
    tolerance: dict[str, float] = field(default_factory=dict)
    workers: int = 1
    wrapped: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise UnknownExperimentError(f"unknown experiment {self.experiment!r}; try 'list'")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.alpha is not None and not 1 < self.alpha < 2:
            raise ValueError("alpha must lie in (1, 2)")
        if self.theta is not None and self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.n is not None and self.n < 2:
            raise ValueError("n must be at least 2")
        if self.epsilon is not None and not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.replicates is not None and self.replicates < 1:
            raise ValueError("replicates must be positive")
        if self.horizons is not None:
            self.horizons = tuple(float(h) for h in self.horizons)
            if any(h < 0 for h in self.horizons):
                raise ValueError("horizons must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        unknown = set(self.tolerance) - set(EXPERIMENTS[self.experiment].tolerances)
        if unknown:
            raise ValueError(f"unknown tolerance key(s) {sorted(unknown)} for {self.experiment}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown config key(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizons"] = list(self.horizons) if self.horizons is not None else None
        return d

    def get(self, name: str):
        v = getattr(self, name)
        return EXPERIMENTS[self.experiment].defaults.get(name) if v is None else v

    def tol(self, key: str) -> float:
        return self.tolerance.get(key, EXPERIMENTS[self.experiment].tolerances[key])


@dataclass(frozen=True)
class Experiment:
    name: str
    group: str
    criterion: int
    summary: str
    run: Callable[[ExperimentConfig, dict], StatReport]
    defaults: dict
    tolerances: dict


EXPERIMENTS: dict[str, Experiment] = {}
GROUPS = ("rates", "coalescent", "spectrum", "gw", "csbp", "lookdown")


def register(name: str, group: str, criterion: int, summary: str, defaults: dict, tolerances: dict):
    def wrap(fn):
        EXPERIMENTS[name] = Experiment(name, group, criterion, summary, fn, defaults, tolerances)
        return fn

    return wrap


def list_experiments() -> list[Experiment]:
    return list(EXPERIMENTS.values())


def _map(fn, items, workers: int) -> list:
    """Order-preserving map, optionally over worker processes."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def rerun_seed(seed: int) -> int:
    """An independent seed derived from ``seed``, used for the narrow-failure rerun."""
    return int(np.random.SeedSequence([int(seed), 0x5EED]).generate_state(1, np.uint64)[0] >> 1)


def run_experiment(config: ExperimentConfig) -> StatReport:
    """Run one experiment, rerun it once on an independent seed after a narrow failure, write artifacts."""
    exp = EXPERIMENTS[config.experiment]
    files: dict[str, str] = {}
    report = _guarded(exp, config, files)
    if not report.passed and any(m.rerun_worthy for m in report.metrics):
        second_cfg = replace(config, seed=rerun_seed(config.seed))
        second_files: dict[str, str] = {}
        second = _guarded(exp, second_cfg, second_files)
        second.reruns = [report]
        second.notes.append(
            f"seed {config.seed} failed with a p-value in [0.001, 0.01]; this is the rerun on seed {second_cfg.seed}"
        )
        report, files = second, second_files
        config = second_cfg
    report.config = config.to_dict()
    if config.out:
        write_run(Path(config.out) / config.experiment, report, files)
    return report


def _guarded(exp: Experiment, config: ExperimentConfig, files: dict) -> StatReport:
    try:
        report = exp.run(config, files)
    except (ValueError, ArithmeticError, RuntimeError) as err:
        raise ExperimentError(f"{exp.name} (seed {config.seed}): {err}") from err
    report.seeds = [int(config.seed)]
    return report


def write_run(directory: Path, report: StatReport, files: dict[str, str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    (directory / "report.json").write_text(report.to_json() + "\n")
    for name, text in sorted(files.items()):
        (directory / name).write_text(text)


# ---------------------------------------------------------------- rates


@register(
    "rates", "rates", 1,
    "consistency of collision rates and closed form vs quadrature",
    defaults={"n": 200, "alphas": (1.2, 1.5, 1.8), "quad_b": 25},
    tolerances={"consistency": 1e-10, "quadrature": 1e-8},
)
def _rates(cfg: ExperimentConfig, files: dict) -> StatReport:
    alphas = (cfg.alpha,) if cfg.alpha else EXPERIMENTS["rates"].defaults["alphas"]
    b_max = cfg.get("n")
    quad_b = EXPERIMENTS["rates"].defaults["quad_b"]
    metrics = []
    rows = []
    for a in alphas:
        m = LambdaMeasure.beta(a)
        table = RateTable(b_max + 1, m, verify=False)
        worst_c = table.verify(b_max + 1, rtol=math.inf)
        dens = LambdaMeasure.from_density(m.beta_density)
        worst_q = 0.0
        for b in range(2, quad_b + 1):
            for k in range(2, b + 1):
                exact = collision_rate(b, k, m)
                quad = collision_rate(b, k, dens)
                worst_q = max(worst_q, abs(quad - exact) / exact)
                rows.append((a, b, k, exact, quad))
        metrics.append(Metric(f"consistency rel err, alpha={a}, b<={b_max}", worst_c, 0.0, ELEMENTARY,
                              passed=worst_c < cfg.tol("consistency")))
        metrics.append(Metric(f"closed form vs quadrature, alpha={a}, b<={quad_b}", worst_q, 0.0, ELEMENTARY,
                              passed=worst_q < cfg.tol("quadrature")))
    files["rates.csv"] = _csv(["alpha", "b", "k", "closed_form", "quadrature"], rows)
    return StatReport("rates", [], metrics)


# ---------------------------------------------------------------- coalescent


@register(
    "triple-merger", "coalescent", 2,
    "probability that three lineages first meet in a triple merger",
    defaults={"n": 3, "alpha": 1.5, "replicates": 100_000},
    tolerances={"z": 3.0},
)
def _triple(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, n, reps = cfg.get("alpha"), cfg.get("n"), cfg.get("replicates")
    m = LambdaMeasure.beta(a)
    table = rate_table_for(n, m)
    target = n * (n - 1) * (n - 2) / 6 * table.rate(n, 3) / table.total_rates[n] if n >= 3 else 0.0
    gen = RngStream(cfg.seed).generator()
    hits = 0
    for _ in range(reps):
        tree = simulate_coalescent(n, m, gen, stop=Stop.at_blocks(n - 1), table=table)
        hits += len(tree.merged[0]) == 3
    p = hits / reps
    se = math.sqrt(target * (1 - target) / reps)
    metric = Metric("P(first merger is triple)", p, target, DERIVED, se=se, z_max=cfg.tol("z"),
                    p_value=z_p_value(p, target, se))
    files["triple_merger.csv"] = _csv(["replicates", "triples", "estimate", "target"], [(reps, hits, p, target)])
    return StatReport("triple-merger", [], [metric])


def _block_count_one(args) -> float:
    seed, sid, n, alpha, lo, hi = args
    tree = simulate_coalescent(n, LambdaMeasure.beta(alpha), RngStream(seed, sid), stop=Stop.at_blocks(lo))
    return scaled_block_count_average(tree, alpha, lo, hi)


@register(
    "block-counts", "coalescent", 4,
    "t^(1/(alpha-1)) N(t) averaged over the window 50 <= N(t) <= 500",
    defaults={"n": 10_000, "alphas": (1.5, 1.3), "replicates": 100, "window": (50, 500), "diagnostic_replicates": 20},
    tolerances={"rel": 0.15},
)
def _block_counts(cfg: ExperimentConfig, files: dict) -> StatReport:
    d = EXPERIMENTS["block-counts"].defaults
    alphas = (cfg.alpha,) if cfg.alpha else d["alphas"]
    n, reps = cfg.get("n"), cfg.get("replicates")
    lo, hi = d["window"]
    if n < hi:
        raise ValueError(f"n must be at least the window top {hi}")
    metrics, rows = [], []
    info = {}
    for i, a in enumerate(alphas):
        jobs = [(cfg.seed, i * 1_000_000 + r, n, a, lo, hi) for r in range(reps)]
        vals = np.array(_map(_block_count_one, jobs, cfg.workers))
        est, se = mean_se(vals)
        target = limit_constants(a).block_count_const
        metrics.append(Metric(f"scaled block count, alpha={a}", est, target, DERIVED, se=se, rel_tol=cfg.tol("rel")))
        rows += [(a, n, r, v) for r, v in enumerate(vals)]
        if d["diagnostic_replicates"]:
            # a start of n lineages lags the process from infinity; a 10x larger start shows the trend
            jobs = [(cfg.seed, (10 + i) * 1_000_000 + r, 10 * n, a, lo, hi) for r in range(d["diagnostic_replicates"])]
            big = np.array(_map(_block_count_one, jobs, cfg.workers))
            info[f"alpha={a}, n={10 * n}"] = dict(zip(("mean", "se"), mean_se(big)))
            rows += [(a, 10 * n, r, v) for r, v in enumerate(big)]
    files["block_counts.csv"] = _csv(["alpha", "n", "replicate", "scaled_average"], rows)
    return StatReport("block-counts", [], metrics, info=info)


def _largest_block_one(args) -> float:
    seed, r, n, alpha, t = args
    tree = simulate_coalescent(n, LambdaMeasure.beta(alpha), RngStream(seed, r), stop=Stop.at_time(t))
    return largest_block_frequency(tree, t)


@register(
    "largest-block", "coalescent", 5,
    "rescaled largest-block frequency against the Frechet law exp(-x^-alpha)",
    defaults={"n": 100_000, "alpha": 1.5, "replicates": 1000, "horizons": (0.002,)},
    tolerances={"p_min": 0.01},
)
def _largest_block(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, n, reps = cfg.get("alpha"), cfg.get("n"), cfg.get("replicates")
    t = cfg.get("horizons")[0]
    scale = limit_constants(a).frechet_scale * t ** (-1.0 / a)
    w = np.array(_map(_largest_block_one, [(cfg.seed, r, n, a, t) for r in range(reps)], cfg.workers))
    x = scale * w
    ks = sps.kstest(x, lambda v: np.exp(-np.asarray(v, dtype=float) ** (-a)))
    metrics = [
        Metric("KS distance to Frechet", float(ks.statistic), 0.0, STATED, p_value=float(ks.pvalue),
               p_min=cfg.tol("p_min")),
    ]
    info = {"median": float(np.median(x)), "frechet_median": math.log(2) ** (-1.0 / a), "t": t}
    files["largest_block.csv"] = _csv(["replicate", "frequency", "rescaled"], [(r, w[r], x[r]) for r in range(reps)])
    return StatReport("largest-block", [], metrics, info=info)


@register(
    "invariants", "coalescent", 12,
    "exact structural checks: ultrametric distances, coarsening, spectrum sums, lookdown fixture, R inverse",
    defaults={"n": 30, "alpha": 1.5, "replicates": 20, "epsilon": 0.01},
    tolerances={"inverse": 1e-9},
)
def _invariants(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, n, reps, eps = cfg.get("alpha"), cfg.get("n"), cfg.get("replicates"), cfg.get("epsilon")
    measures = [LambdaMeasure.beta(a), LambdaMeasure.kingman()]
    ultra = coarse = sums = 0
    checked = 0
    for r in range(reps):
        for j, m in enumerate(measures):
            stream = RngStream(cfg.seed, 2 * r + j)
            tree = simulate_coalescent(n, m, stream)
            d = coalescence_time_matrix(tree)
            # d(i,k) <= max(d(i,j), d(j,k)) for every triple
            ultra += int(np.sum(d[:, None, :] > np.maximum(d[:, :, None], d[None, :, :])))
            grid = np.concatenate([[0.0], tree.times])
            parts = [tree.partition_at(t) for t in grid]
            coarse += sum(not parts[i + 1].is_coarsening_of(parts[i]) for i in range(len(parts) - 1))
            muts = scatter_mutations(tree, 2.0, stream.child(10_000 + 2 * r + j))
            sc = spectrum_counts(tree, muts)
            sums += int(sc.M_k.sum() != sc.M_total)
            sums += int(np.dot(np.arange(1, n + 1), sc.N_k) != n)
            checked += 1
    # lookdown fixture: levels 2, 4, 5 (1-based) take part
    post = cs.lookdown_relabel(list("abcde"), (1, 3, 4))
    fixture_ok = post == list("abcbb")
    log = cs.LookdownLog(5, np.arange(5), np.array([1.0]), [(1, 3, 4)])
    part = cs.ancestral_partition(log, 0.5, 1.5)
    fixture_ok &= sorted(map(sorted, part.blocks)) == [[0], [1, 3, 4], [2]]
    # ancestral partitions coarsen as the earlier time decreases
    path = cs.simulate_csbp(a, 1.0, eps, 2.0, RngStream(cfg.seed, 900_001), absorb=0)
    log = cs.run_lookdown(path, 8, RngStream(cfg.seed, 900_002))
    T = path.end
    lookdown_coarse = 0
    prev = None
    for s in np.linspace(T, 0.0, 21):
        p = cs.ancestral_partition(log, s, T)
        if prev is not None and not p.is_coarsening_of(prev):
            lookdown_coarse += 1
        prev = p
    tc = cs.time_change_R(path)
    rs = np.linspace(0.0, tc.R_end, 1001)
    inv_err = max(abs(tc.R(tc.inverse(r)) - r) / max(1.0, r) for r in rs)
    metrics = [
        Metric("ultrametric violations", ultra, 0, ELEMENTARY, passed=ultra == 0),
        Metric("coalescent coarsening violations", coarse, 0, ELEMENTARY, passed=coarse == 0),
        Metric("spectrum sum identity violations", sums, 0, ELEMENTARY, passed=sums == 0),
        Metric("lookdown relabel fixture", float(fixture_ok), 1, STATED, passed=bool(fixture_ok)),
        Metric("lookdown coarsening violations", lookdown_coarse, 0, ELEMENTARY, passed=lookdown_coarse == 0),
        Metric("max |R(R^-1(r)) - r|", inv_err, 0.0, ELEMENTARY, passed=inv_err <= cfg.tol("inverse")),
    ]
    return StatReport("invariants", [], metrics, info={"trees": checked})


# ---------------------------------------------------------------- spectra


@register(
    "ewens", "spectrum", 3,
    "Kingman allelic partitions against the Ewens sampling formula",
    defaults={"ns": (3, 4, 5, 6), "thetas": (0.5, 1.0, 2.0), "replicates": 100_000},
    tolerances={"p_min": 0.001},
)
def _ewens(cfg: ExperimentConfig, files: dict) -> StatReport:
    d = EXPERIMENTS["ewens"].defaults
    ns = (cfg.n,) if cfg.n else d["ns"]
    thetas = (cfg.theta,) if cfg.theta else d["thetas"]
    reps = cfg.get("replicates")
    king = LambdaMeasure.kingman()
    metrics, rows = [], []
    cell = 0
    for n in ns:
        table = rate_table_for(n, king)
        parts = sorted(integer_partitions(n), key=lambda a: -ewens_probability(a, 1.0))
        index = {p: i for i, p in enumerate(parts)}
        for theta_e in thetas:
            gen = RngStream(cfg.seed, cell).generator()
            cell += 1
            counts = np.zeros(len(parts), dtype=np.int64)
            for _ in range(reps):
                tree = simulate_coalescent(n, king, gen, table=table)
                # theta_e / 2 per lineage, with pairs coalescing at rate 1
                muts = scatter_mutations(tree, theta_e / 2.0, gen)
                sizes = allele_partition(tree, muts).block_sizes()
                counts[index[tuple(np.bincount(sizes, minlength=n + 1)[1:])]] += 1
            probs = np.array([ewens_probability(p, theta_e) for p in parts])
            order = np.argsort(-probs)
            stat, df, p = chi2_gof(counts[order], probs[order])
            metrics.append(Metric(f"chi-square p, n={n}, theta={theta_e}", stat, None, STATED, p_value=p,
                                  p_min=cfg.tol("p_min"), note=f"df={df}"))
            rows += [(n, theta_e, "-".join(map(str, parts[i])), counts[i], probs[i] * reps) for i in range(len(parts))]
    files["ewens.csv"] = _csv(["n", "theta", "multiplicities", "observed", "expected"], rows)
    return StatReport("ewens", [], metrics)


def _spectrum_one(args):
    seed, r, n, alpha, theta, k_max = args
    stream = RngStream(seed, r)
    gen = stream.generator()
    tree = simulate_coalescent(n, LambdaMeasure.beta(alpha), gen)
    sc = spectrum_counts(tree, scatter_mutations(tree, theta, gen))
    bound_bad = int(np.sum(np.abs(sc.M_k - sc.N_k_derived[: n - 1]) > sc.K))
    return sc, bound_bad


def ratio_wald_test(counts: np.ndarray, totals: np.ndarray, probs: np.ndarray) -> tuple[float, int, float]:
    """Wald chi-square that pooled ratios ``sum counts[:, k] / sum totals`` equal ``probs``.

    Rows are independent units (trees); items within a row may be dependent,
    so the covariance is the ratio-estimator (cluster) one.
    """
    n_units = len(totals)
    r = counts.sum(axis=0) / totals.sum()
    infl = (counts - np.outer(totals, r)) / totals.mean()
    cov = np.cov(infl, rowvar=False, ddof=1) / n_units
    diff = r - probs
    stat = float(diff @ np.linalg.solve(np.atleast_2d(cov), diff))
    df = len(probs)
    return stat, df, float(sps.chi2.sf(stat, df))


@register(
    "spectrum", "spectrum", 7,
    "small-frequency site and allele spectra of the Beta coalescent at large n",
    defaults={"n": 2000, "alpha": 1.5, "theta": 1.0, "replicates": 100, "k_max": 5},
    tolerances={"rel": 0.2, "p_min": 0.001},
)
def _spectrum(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, n, theta, reps = cfg.get("alpha"), cfg.get("n"), cfg.get("theta"), cfg.get("replicates")
    k_max = EXPERIMENTS["spectrum"].defaults["k_max"]
    lc = limit_constants(a, theta)
    out = _map(_spectrum_one, [(cfg.seed, r, n, a, theta, k_max) for r in range(reps)], cfg.workers)
    spectra = [o[0] for o in out]
    Mk = np.array([sc.M_k[:k_max] for sc in spectra])
    N1 = np.array([sc.N_k[0] for sc in spectra], dtype=float)
    M = np.array([sc.M_total for sc in spectra], dtype=float)
    bad = sum(o[1] for o in out)
    scale = n ** (a - 2)
    m1, se1 = mean_se(scale * Mk[:, 0])
    n1, sen = mean_se(scale * N1)
    mt, set_ = mean_se(scale * M)
    tol = cfg.tol("rel")
    probs = np.asarray(xi_tau_pmf(np.arange(1, k_max + 1), a))
    stat, df, p = ratio_wald_test(Mk.astype(float), M, probs)
    ratios = Mk.sum(axis=0) / M.sum()
    metrics = [
        Metric("n^(alpha-2) M_1", m1, lc.spectrum_const(1), DERIVED, se=se1, rel_tol=tol),
        Metric("n^(alpha-2) N_1", n1, lc.spectrum_const(1), DERIVED, se=sen, rel_tol=tol),
        Metric("n^(alpha-2) M", mt, lc.M_total_const, STATED, se=set_, rel_tol=tol),
        Metric(f"M_k/M vs P(xi_tau=k), k<={k_max}", stat, None, STATED, p_value=p, p_min=cfg.tol("p_min"),
               note=f"df={df}, tree-clustered Wald chi-square"),
        Metric("|M_k - N_k| > K violations", bad, 0, ELEMENTARY, passed=bad == 0),
    ]
    rows = [(r, *Mk[r].tolist(), int(N1[r]), int(M[r])) for r in range(reps)]
    files["spectrum.csv"] = _csv(["replicate", *[f"M_{k}" for k in range(1, k_max + 1)], "N_1", "M"], rows)
    pooled = spectra[0]
    pooled = type(pooled)(
        n=n, M_k=sum(sc.M_k for sc in spectra), N_k=sum(sc.N_k for sc in spectra), M_total=int(M.sum()),
        allelic_partition=pooled.allelic_partition, ancestral_size=0, K=sum(sc.K for sc in spectra),
    )
    files["spectrum_pooled.csv"] = pooled.to_csv(wrapped=cfg.wrapped)
    files["spectrum_summary.json"] = spectra_summary_json(pooled, a, theta, [cfg.seed], replicates=reps) + "\n"
    info = {"ratio_observed": ratios.tolist(), "ratio_target": probs.tolist()}
    return StatReport("spectrum", [], metrics, info=info)


# ---------------------------------------------------------------- Galton-Watson


@register(
    "xi-tau", "gw", 6,
    "law of the GW population at an exponential time: closed form, recursion, Monte Carlo",
    defaults={"alphas": (1.2, 1.5, 1.8), "replicates": 100_000, "k_max": 200, "cap": 1000},
    tolerances={"agree": 1e-10, "p_min": 0.001, "spot": 1e-12},
)
def _xi_tau(cfg: ExperimentConfig, files: dict) -> StatReport:
    d = EXPERIMENTS["xi-tau"].defaults
    alphas = (cfg.alpha,) if cfg.alpha else d["alphas"]
    reps, k_max, cap = cfg.get("replicates"), d["k_max"], d["cap"]
    metrics, rows = [], []
    ks = np.arange(1, k_max + 1)
    for i, a in enumerate(alphas):
        closed = np.asarray(xi_tau_pmf(ks, a))
        rec = xi_tau_pmf_recursive(k_max, a)
        err = float(np.max(np.abs(closed - rec) / closed))
        metrics.append(Metric(f"closed form vs recursion, alpha={a}", err, 0.0, DERIVED, passed=err < cfg.tol("agree")))
        draws = simulate_xi_tau_batch(a, reps, RngStream(cfg.seed, i).generator(), cap=cap)
        observed = np.bincount(np.minimum(draws, k_max + 1), minlength=k_max + 2)[1:]
        probs = np.concatenate([closed, [1.0 - closed.sum()]])
        stat, df, p = chi2_gof(observed, probs)
        metrics.append(Metric(f"Monte Carlo chi-square, alpha={a}", stat, None, DERIVED, p_value=p,
                              p_min=cfg.tol("p_min"), note=f"df={df}"))
        rows += [(a, k, observed[k - 1], closed[k - 1] * reps) for k in range(1, 11)]
    spot = np.asarray(xi_tau_pmf(np.arange(1, 4), 1.5))
    want = np.array([0.5, 0.125, 0.0625])
    err = float(np.max(np.abs(spot - want)))
    metrics.append(Metric("P(xi_tau = 1, 2, 3) at alpha=1.5", err, 0.0, DERIVED, passed=err < cfg.tol("spot")))
    files["xi_tau.csv"] = _csv(["alpha", "k", "observed", "expected"], rows)
    return StatReport("xi-tau", [], metrics)


def _marked_one(args):
    seed, r, alpha, theta, t, k_max = args
    s = simulate_marked_gw(alpha, theta, t, RngStream(seed, r))
    return s.dense("M_k_gw", k_max), s.identity_violations(), s.K_t, s.M_t


@register(
    "gw-marks", "gw", 8,
    "mutation counts on the GW tree: expectations and the exact per-tree sandwich",
    defaults={"alpha": 1.5, "theta": 1.0, "replicates": 10_000, "horizons": (6.0,), "k_max": 3},
    tolerances={"rel": 0.15},
)
def _gw_marks(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, theta, reps = cfg.get("alpha"), cfg.get("theta"), cfg.get("replicates")
    t = cfg.get("horizons")[0]
    k_max = EXPERIMENTS["gw-marks"].defaults["k_max"]
    c = ModelConstants.of(a, theta).c
    out = _map(_marked_one, [(cfg.seed, r, a, theta, t, k_max) for r in range(reps)], cfg.workers)
    Mk = np.array([o[0] for o in out], dtype=float) * math.exp(-c * t)
    viol = sum(o[1] for o in out)
    metrics = []
    for k in range(1, k_max + 1):
        est, se = mean_se(Mk[:, k - 1])
        target = theta / c * float(xi_tau_pmf(k, a))
        metrics.append(Metric(f"e^(-ct) E[M_{k}]", est, target, STATED, se=se, rel_tol=cfg.tol("rel")))
    metrics.append(Metric("identity and sandwich violations", viol, 0, ELEMENTARY, passed=viol == 0))
    K = np.array([o[2] for o in out], dtype=float) * math.exp(-c * t)
    rows = [(r, *[int(round(v * math.exp(c * t))) for v in Mk[r]], out[r][2], out[r][3]) for r in range(reps)]
    files["gw_marks.csv"] = _csv(["replicate", *[f"M_{k}" for k in range(1, k_max + 1)], "K", "M"], rows)
    return StatReport("gw-marks", [], metrics, info={"e^(-ct) E[K]": float(K.mean()), "t": t})


@register(
    "queue", "gw", 9,
    "infinite-server queue with exponentially growing arrivals",
    defaults={"cases": ((1.0, 1.0, 1.0), (2.0, 1.0, 3.0)), "replicates": 200, "horizons": (12.0,)},
    tolerances={"rel": 0.10},
)
def _queue(cfg: ExperimentConfig, files: dict) -> StatReport:
    reps = cfg.get("replicates")
    t = cfg.get("horizons")[0]
    metrics, rows = [], []
    for i, (A, c, lam) in enumerate(EXPERIMENTS["queue"].defaults["cases"]):
        vals = np.array([simulate_queue(A, c, lam, t, RngStream(cfg.seed, i * 1_000_000 + r)).final()
                         for r in range(reps)], dtype=float) * math.exp(-c * t)
        est, se = mean_se(vals)
        metrics.append(Metric(f"e^(-ct) Q_t, A={A}, c={c}, lambda={lam}", est, A / (lam + c), STATED, se=se,
                              rel_tol=cfg.tol("rel")))
        rows += [(A, c, lam, r, v) for r, v in enumerate(vals)]
    files["queue.csv"] = _csv(["A", "c", "lambda", "replicate", "scaled_length"], rows)
    return StatReport("queue", [], metrics)


# ---------------------------------------------------------------- CSBP and lookdown


@register(
    "csbp-laplace", "csbp", 10,
    "truncated CSBP marginals: Laplace transform, extinction, and the eps-halving trend",
    defaults={"alpha": 1.5, "epsilon": 0.005, "replicates": 20_000, "pairs": ((1.0, 1.0), (0.5, 2.0))},
    tolerances={"rel": 0.02, "z": 1.96, "p_min": 0.001},
)
def _csbp_laplace(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, eps, reps = cfg.get("alpha"), cfg.get("epsilon"), cfg.get("replicates")
    pairs = EXPERIMENTS["csbp-laplace"].defaults["pairs"]
    if cfg.horizons is not None:
        if len(cfg.horizons) % 2:
            raise ValueError("horizons for csbp-laplace are (t, lambda) pairs")
        pairs = tuple(zip(cfg.horizons[::2], cfg.horizons[1::2]))
    levels = (eps, eps / 2)
    metrics, rows = [], []
    by_t: dict[float, dict] = {}
    for i, t in enumerate(sorted({p[0] for p in pairs} | {1.0})):
        by_t[t] = cs.csbp_marginals(a, 1.0, levels, t, reps, RngStream(cfg.seed, i).generator())
    info = {}
    for t, lam in pairs:
        target = math.exp(-csbp_laplace_u(t, lam, a))
        err = {}
        for e in levels:
            z, _ = by_t[t][e]
            v = np.exp(-lam * z)
            est, se = mean_se(v)
            err[e] = est / target - 1
            oracle = math.exp(-cs.truncated_laplace_u(t, lam, a, e))
            rows.append((t, lam, e, est, se, target, oracle))
            if e == eps:
                metrics.append(Metric(f"E exp(-lambda Z_t), t={t}, lambda={lam}", est, target, DERIVED, se=se,
                                      rel_tol=cfg.tol("rel")))
                metrics.append(Metric(f"simulator vs truncated transform, t={t}, lambda={lam}", est, oracle,
                                      DERIVED, se=se, p_value=z_p_value(est, oracle, se), p_min=cfg.tol("p_min")))
        shrinks = abs(err[levels[1]]) < abs(err[levels[0]])
        metrics.append(Metric(f"halving eps shrinks Laplace error, t={t}, lambda={lam}", abs(err[levels[1]]),
                              abs(err[levels[0]]), DERIVED, passed=shrinks))
        info[f"relative error t={t} lambda={lam}"] = {str(e): err[e] for e in levels}
    # P(Z_1 = 0) = exp(-z0 lim_{lambda -> inf} u_1(lambda)) = exp(-(alpha-1)^{-1/(alpha-1)})
    target = math.exp(-((a - 1) ** (-1.0 / (a - 1))))
    ext = {}
    for e in levels:
        _, dead = by_t[1.0][e]
        ext[e] = float(np.mean(dead))
    se = math.sqrt(target * (1 - target) / reps)
    metrics.append(Metric("extinct by t=1", ext[eps], target, DERIVED, se=se, z_max=cfg.tol("z"),
                          p_value=z_p_value(ext[eps], target, se)))
    metrics.append(Metric("halving eps shrinks extinction error", abs(ext[levels[1]] - target),
                          abs(ext[levels[0]] - target), DERIVED,
                          passed=abs(ext[levels[1]] - target) < abs(ext[levels[0]] - target)))
    info["extinct fraction"] = {str(e): ext[e] for e in levels}
    info["absorb level"] = {str(e): cs.default_absorb_level(a, e) for e in levels}
    files["csbp_laplace.csv"] = _csv(["t", "lambda", "epsilon", "estimate", "se", "target", "truncated_target"], rows)
    return StatReport("csbp-laplace", [], metrics, info=info)


def _lookdown_one(args):
    """Lookdown side of one replicate: block count and pair indicator at each lag, plus discards."""
    seed, r, alpha, eps, n_levels, t_R, lags = args
    discards = 0
    sub = 0
    while True:
        stream = RngStream(seed, r * 1000 + sub)
        gen = stream.generator()
        path = cs.simulate_csbp(alpha, 1.0, eps, 1e6, gen, until_R=t_R)
        if not path.extinct:
            break
        discards += 1
        sub += 1
        if sub >= 1000:
            raise RuntimeError("every attempt went extinct before the time change reached its target")
    tc = cs.time_change_R(path)
    T = path.end
    log = cs.run_lookdown(path, n_levels, gen)
    out = []
    budget = 0.0
    for s in lags:
        start = tc.inverse(t_R - s)
        part = cs.ancestral_partition(log, start, T)
        out.append((len(part), bool(part.block_of[0] == part.block_of[1])))
        # dropped jumps join a given pair of levels at rate ~ int_0^eps x^2 nu(dx) / Z
        pairs = n_levels * (n_levels - 1) / 2
        budget += pairs * cs.small_jump_variance(alpha, eps) * cs.inverse_z_integral(path, start, T)
    return out, discards, budget / len(lags)


def _direct_one(args):
    seed, r, alpha, n_levels, lags = args
    tree = simulate_coalescent(n_levels, LambdaMeasure.beta(alpha), RngStream(seed, r), stop=Stop.at_time(max(lags)))
    out = []
    for s in lags:
        part = tree.partition_at(s)
        out.append((len(part), bool(part.block_of[0] == part.block_of[1])))
    return out


@register(
    "lookdown", "lookdown", 11,
    "ancestral partitions of the lookdown levels vs the Beta coalescent run for the same time",
    defaults={"alpha": 1.5, "epsilon": 0.002, "n": 5, "replicates": 2000, "horizons": (0.6, 0.2, 0.5)},
    tolerances={"p_min": 0.001},
)
def _lookdown(cfg: ExperimentConfig, files: dict) -> StatReport:
    a, eps, n_levels, reps = cfg.get("alpha"), cfg.get("epsilon"), cfg.get("n"), cfg.get("replicates")
    h = cfg.get("horizons")
    t_R, lags = h[0], tuple(h[1:])
    if not lags or max(lags) > t_R:
        raise ValueError("horizons are (t, s1, s2, ...) with every s <= t")
    look = _map(_lookdown_one, [(cfg.seed, r, a, eps, n_levels, t_R, lags) for r in range(reps)], cfg.workers)
    direct = _map(_direct_one, [(cfg.seed, 10_000_000 + r, a, n_levels, lags) for r in range(reps)], cfg.workers)
    pmin = cfg.tol("p_min")
    metrics, rows = [], []
    for j, s in enumerate(lags):
        lb = np.bincount([o[0][j][0] for o in look], minlength=n_levels + 1)[1:]
        db = np.bincount([o[j][0] for o in direct], minlength=n_levels + 1)[1:]
        stat, df, p = chi2_two_sample(lb, db)
        metrics.append(Metric(f"block-count law, s={s}", stat, None, STATED, p_value=p, p_min=pmin, note=f"df={df}"))
        lp = sum(o[0][j][1] for o in look)
        dp = sum(o[j][1] for o in direct)
        z, p2 = two_proportion_test(lp, reps, dp, reps)
        metrics.append(Metric(f"pair coalesced, lookdown vs direct, s={s}", lp / reps, dp / reps, STATED,
                              p_value=p2, p_min=pmin))
        exact = -math.expm1(-s)  # two blocks merge at rate lambda_{2,2} = 1
        se = math.sqrt(exact * (1 - exact) / reps)
        metrics.append(Metric(f"pair coalesced vs 1 - e^-s, s={s}", lp / reps, exact, DERIVED, se=se,
                              p_value=z_p_value(lp / reps, exact, se), p_min=pmin))
        rows += [(s, k + 1, int(lb[k]), int(db[k])) for k in range(n_levels)]
    discards = sum(o[1] for o in look)
    budget = float(np.mean([o[2] for o in look]))
    files["lookdown_blocks.csv"] = _csv(["s", "blocks", "lookdown", "direct"], rows)
    info = {"discarded paths": discards, "expected pair participations in dropped jumps": budget, "t": t_R}
    return StatReport("lookdown", [], metrics, info=info)
