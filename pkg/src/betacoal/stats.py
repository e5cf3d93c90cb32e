"""Statistical tests and the report records experiments produce."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

# where a target value comes from
STATED = "stated"  # quoted directly by the theory being checked
DERIVED = "derived"  # computed from stated formulas
ELEMENTARY = "elementary"  # follows from a definition


class DuplicateSeedError(ValueError):
    """Reports to be pooled share a seed, so they are not independent."""


class SchemaMismatchError(ValueError):
    """Reports to be pooled do not describe the same experiment and metrics."""


@dataclass
class Metric:
    """One checked quantity.

    A metric passes on a relative band (``rel_tol``), on a standard-error band
    (``z_max``: within ``z_max * se`` of the target), on a p-value floor
    (``p_min``), or as an exact check (none set, ``passed`` given directly).
    """

    name: str
    estimate: float
    target: float | None = None
    provenance: str = DERIVED
    se: float | None = None
    ci: tuple[float, float] | None = None
    p_value: float | None = None
    rel_tol: float | None = None
    z_max: float | None = None
    p_min: float | None = None
    passed: bool | None = None
    note: str = ""

    def __post_init__(self):
        if self.passed is None:
            self.passed = self.evaluate()
        if self.ci is None and self.se is not None and math.isfinite(self.se):
            self.ci = (self.estimate - 1.96 * self.se, self.estimate + 1.96 * self.se)

    def evaluate(self) -> bool:
        ok = True
        if self.rel_tol is not None:
            ok &= abs(self.estimate - self.target) <= self.rel_tol * abs(self.target)
        if self.z_max is not None:
            ok &= abs(self.estimate - self.target) <= self.z_max * self.se
        if self.p_min is not None:
            ok &= self.p_value is not None and self.p_value > self.p_min
        return bool(ok)

    @property
    def rerun_worthy(self) -> bool:
        """Failed only narrowly on a statistical test (p in [0.001, 0.01])."""
        return (not self.passed) and self.p_value is not None and 0.001 <= self.p_value <= 0.01


@dataclass
class StatReport:
    experiment: str
    seeds: list[int]
    metrics: list[Metric]
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    reruns: list["StatReport"] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.metrics)

    def metric(self, name: str) -> Metric:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = {
            "experiment": self.experiment,
            "passed": self.passed,
            "seeds": list(self.seeds),
            "config": self.config,
            "metrics": [asdict(m) for m in self.metrics],
            "notes": self.notes,
            "info": self.info,
        }
        if self.reruns:
            d["reruns"] = [r.to_dict() for r in self.reruns]
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2)

    def table(self) -> str:
        rows = [f"{self.experiment}: {'PASS' if self.passed else 'FAIL'}"]
        for m in self.metrics:
            tgt = "" if m.target is None else f" target={m.target:.6g}"
            se = "" if m.se is None else f" se={m.se:.3g}"
            p = "" if m.p_value is None else f" p={m.p_value:.3g}"
            rows.append(f"  [{'ok' if m.passed else 'XX'}] {m.name}: {m.estimate:.6g}{se}{tgt}{p} ({m.provenance})")
        return "\n".join(rows)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def merge_reports(reports: list[StatReport]) -> StatReport:
    """Pool independent runs: inverse-variance weighted estimates, Fisher-combined p-values."""
    if not reports:
        raise ValueError("nothing to merge")
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    names = [m.name for m in first.metrics]
    seen: set[int] = set()
    for r in reports:
        if r.experiment != first.experiment or [m.name for m in r.metrics] != names:
            raise SchemaMismatchError("reports describe different experiments or metrics")
        dup = seen.intersection(r.seeds)
        if dup:
            raise DuplicateSeedError(f"seed(s) {sorted(dup)} appear in more than one report")
        seen.update(r.seeds)
    pooled = []
    for i, name in enumerate(names):
        ms = [r.metrics[i] for r in reports]
        est, se = ms[0].estimate, ms[0].se
        if all(m.se is not None and m.se > 0 for m in ms):
            w = np.array([1.0 / m.se**2 for m in ms])
            est = float(np.sum(w * [m.estimate for m in ms]) / w.sum())
            se = float(1.0 / math.sqrt(w.sum()))
        else:
            est = float(np.mean([m.estimate for m in ms]))
        p = None
        if all(m.p_value is not None for m in ms):
            p = float(stats.combine_pvalues([max(m.p_value, 1e-300) for m in ms], method="fisher")[1])
        exact = ms[0].rel_tol is None and ms[0].z_max is None and ms[0].p_min is None
        pooled.append(
            Metric(
                name=name,
                estimate=est,
                target=ms[0].target,
                provenance=ms[0].provenance,
                se=se,
                p_value=p,
                rel_tol=ms[0].rel_tol,
                z_max=ms[0].z_max,
                p_min=ms[0].p_min,
                passed=all(m.passed for m in ms) if exact else None,
                note=ms[0].note,
            )
        )
    return StatReport(first.experiment, sorted(seen), pooled, dict(first.config), notes=["pooled"])


# ---------------------------------------------------------------- tests

def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf


def pool_tail(observed, expected, min_expected: float = 5.0):
    """Merge trailing bins until every expected count is at least ``min_expected``."""
    obs = list(np.asarray(observed, dtype=float))
    exp = list(np.asarray(expected, dtype=float))
    while len(exp) > 1 and exp[-1] < min_expected:
        e, o = exp.pop(), obs.pop()
        exp[-1] += e
        obs[-1] += o
    # leading sparse bins are folded forward as well
    while len(exp) > 1 and exp[0] < min_expected:
        e, o = exp.pop(0), obs.pop(0)
        exp[0] += e
        obs[0] += o
    return np.array(obs), np.array(exp)


def chi2_gof(observed, probs, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Chi-square goodness of fit; ``probs`` must sum to one (put the tail in the last bin)."""
    observed = np.asarray(observed, dtype=float)
    probs = np.asarray(probs, dtype=float)
    total = observed.sum()
    obs, exp = pool_tail(observed, probs * total, min_expected)
    stat = float(np.sum((obs - exp) ** 2 / exp))
    df = len(obs) - 1
    return stat, df, float(stats.chi2.sf(stat, df)) if df > 0 else 1.0


def chi2_two_sample(a, b, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Chi-square test that two count vectors over the same categories share one law."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    keep = (a + b) > 0
    a, b = a[keep], b[keep]
    pooled = (a + b) / (a.sum() + b.sum())
    # merge sparse categories on the smaller sample's expected counts
    exp_small = pooled * min(a.sum(), b.sum())
    order = np.argsort(-exp_small)
    a, b, exp_small = a[order], b[order], exp_small[order]
    while len(exp_small) > 2 and exp_small[-1] < min_expected:
        exp_small[-2] += exp_small[-1]
        a[-2] += a[-1]
        b[-2] += b[-1]
        exp_small, a, b = exp_small[:-1], a[:-1], b[:-1]
    if len(a) < 2:
        return 0.0, 0, 1.0
    stat, p, df, _ = stats.chi2_contingency(np.vstack([a, b]), correction=False)
    return float(stat), int(df), float(p)


def two_proportion_test(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sided z-test for equal success probabilities; returns (z, p)."""
    p1, p2 = x1 / n1, x2 / n2
    p = (x1 + x2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (p1 - p2) / se
    return z, float(2 * stats.norm.sf(abs(z)))


def binomial_p_value(successes: int, trials: int, prob: float) -> float:
    return float(stats.binomtest(successes, trials, prob).pvalue)


def z_p_value(estimate: float, target: float, se: float) -> float:
    if se <= 0:
        return 1.0 if estimate == target else 0.0
    return float(2 * stats.norm.sf(abs(estimate - target) / se))
