"""Collision rates of Lambda-coalescents and the closed forms built on them.

Everything here is deterministic: rates ``lambda_{b,k}``, total jump rates,
the offspring law ``chi`` of the reduced Galton-Watson tree, the law of the
killed population ``xi_tau``, the stable CSBP Laplace exponent and the limit
constants the Monte Carlo checks aim at.

Gamma and Beta ratios are always formed in log space so that ``b`` in the
hundreds of thousands does not overflow.
"""

from __future__ import annotations

import bisect
import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import gammaln

KINGMAN = "kingman"
BETA = "beta"
UNIFORM = "uniform"
DENSITY = "density"

# rows of the rate table are materialised up to this b; larger Beta tables are lazy
DENSE_LIMIT = 2000
CONSISTENCY_RTOL = 1e-10
QUAD_RTOL = 1e-8


class QuadratureError(ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, abserr: float):
        super().__init__(f"{message} (achieved error estimate {abserr:.3g})")
        self.abserr = abserr


class ConsistencyError(ArithmeticError):
    """A rate table violates lambda_{b,k} = lambda_{b+1,k} + lambda_{b+1,k+1}."""


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 1.0 < alpha < 2.0:
        raise ValueError(f"alpha must lie strictly between 1 and 2, got {alpha}")
    return alpha


@dataclass(frozen=True)
class LambdaMeasure:
    """The finite measure on [0, 1] that drives a Lambda-coalescent.

    Build one with :meth:`kingman`, :meth:`beta`, :meth:`uniform` or
    :meth:`from_density` rather than calling the constructor.
    """

    variant: str
    alpha: float | None = None
    density: Callable[[float], float] | None = field(default=None, compare=False)
    quadrature_points: int = 200
    mass: float = 1.0

    @classmethod
    def kingman(cls) -> "LambdaMeasure":
        return cls(KINGMAN)

    @classmethod
    def beta(cls, alpha: float) -> "LambdaMeasure":
        return cls(BETA, alpha=_check_alpha(alpha))

    @classmethod
    def uniform(cls) -> "LambdaMeasure":
        return cls(UNIFORM)

    @classmethod
    def from_density(cls, density: Callable[[float], float], quadrature_points: int = 200) -> "LambdaMeasure":
        """A measure ``density(x) dx`` on (0, 1).

        The total mass is computed once by quadrature and must be finite and
        positive.
        """
        if quadrature_points < 1:
            raise ValueError("quadrature_points must be positive")
        mass = _integrate_01(density, quadrature_points)
        if not (math.isfinite(mass) and mass > 0):
            raise ValueError(f"density must have finite positive mass, got {mass}")
        return cls(DENSITY, density=density, quadrature_points=quadrature_points, mass=mass)

    def beta_density(self, x: float) -> float:
        """Beta(2 - alpha, alpha) density; only meaningful for the Beta variant."""
        a = self.alpha
        return math.exp((1 - a) * math.log(x) + (a - 1) * math.log1p(-x) - _log_beta(2 - a, a))

    def label(self) -> str:
        if self.variant == BETA:
            return f"beta({self.alpha!r})"
        return self.variant


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _integrate_01(f: Callable[[float], float], limit: int) -> float:
    # split at 1/2 so that each piece carries at most one endpoint singularity
    total = 0.0
    for lo, hi in ((0.0, 0.5), (0.5, 1.0)):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=QUAD_RTOL, limit=limit)
            except integrate.IntegrationWarning:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    val, err = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=QUAD_RTOL, limit=limit)
                raise QuadratureError(f"quadrature on [{lo}, {hi}] did not converge", err) from None
        total += val
    return total


def collision_rate(b: int, k: int, measure: LambdaMeasure) -> float:
    """Rate ``lambda_{b,k}`` at which one given k-tuple among b blocks merges.

    ``lambda_{b,k} = int x^(k-2) (1-x)^(b-k) Lambda(dx)``.
    """
    if not 2 <= k <= b:
        raise ValueError(f"need 2 <= k <= b, got b={b}, k={k}")
    v = measure.variant
    if v == KINGMAN:
        return 1.0 if k == 2 else 0.0
    if v == BETA:
        a = measure.alpha
        return math.exp(_log_beta(k - a, b - k + a) - _log_beta(2 - a, a))
    if v == UNIFORM:
        return math.exp(_log_beta(k - 1, b - k + 1))
    f = measure.density
    return _integrate_01(lambda x: x ** (k - 2) * (1 - x) ** (b - k) * f(x), measure.quadrature_points)


def _log_beta_row(b: int, alpha: float) -> np.ndarray:
    k = np.arange(2, b + 1, dtype=float)
    return gammaln(k - alpha) + gammaln(b - k + alpha) - math.lgamma(b) - _log_beta(2 - alpha, alpha)


def _log_uniform_row(b: int) -> np.ndarray:
    k = np.arange(2, b + 1, dtype=float)
    return gammaln(k - 1) + gammaln(b - k + 1) - math.lgamma(b)


def _log_binom_row(b: int) -> np.ndarray:
    k = np.arange(2, b + 1, dtype=float)
    return math.lgamma(b + 1) - gammaln(k + 1) - gammaln(b - k + 1)


def beta_total_rate(b: int, alpha: float) -> float:
    """Closed form of ``G_b`` for the Beta(2 - alpha, alpha) measure.

    ``G_b = (b - 1) Gamma(b + alpha - 1) / (alpha Gamma(alpha) Gamma(b))``, obtained by
    integrating ``1 - (1-x)^b - b x (1-x)^(b-1)`` against ``x^-2 Lambda(dx)``.
    """
    if b < 2:
        return 0.0
    return (b - 1) * math.exp(math.lgamma(b + alpha - 1) - math.lgamma(b) - math.lgamma(alpha)) / alpha


class RateTable:
    """Memoised ``lambda_{b,k}`` for ``2 <= k <= b <= n_max`` and total rates ``G_b``.

    Rows up to ``DENSE_LIMIT`` are stored and checked for consistency when the
    table is built. Beta tables beyond that size keep only ``G_b`` (closed form)
    and compute rows on request, since the full triangle would not fit in memory.
    """

    def __init__(self, n_max: int, measure: LambdaMeasure, verify: bool = True):
        if n_max < 2:
            raise ValueError("n_max must be at least 2")
        self.n_max = n_max
        self.measure = measure
        self._log_rows: dict[int, np.ndarray] = {}
        self._cdfs: dict[int, list[float]] = {}
        dense = n_max <= DENSE_LIMIT
        if not dense and measure.variant not in (BETA, KINGMAN, UNIFORM):
            raise ValueError(f"tables for {measure.variant} measures are limited to n_max <= {DENSE_LIMIT}")
        self.total_rates = np.zeros(n_max + 1)
        if dense:
            for b in range(2, n_max + 1):
                log_row = self._compute_log_row(b)
                self._log_rows[b] = log_row
                self.total_rates[b] = np.exp(_log_binom_row(b) + log_row).sum()
        else:
            bs = np.arange(2, n_max + 1)
            if measure.variant == BETA:
                a = measure.alpha
                self.total_rates[2:] = (bs - 1) * np.exp(gammaln(bs + a - 1) - gammaln(bs) - math.lgamma(a)) / a
            elif measure.variant == KINGMAN:
                self.total_rates[2:] = bs * (bs - 1) / 2.0
            else:
                self.total_rates[2:] = bs - 1.0
        if verify:
            self.verify(min(n_max, DENSE_LIMIT))

    @property
    def entries(self) -> dict[int, np.ndarray]:
        """Stored rows: ``entries[b][k - 2] = lambda_{b,k}``."""
        return {b: np.exp(r) for b, r in self._log_rows.items()}

    def _compute_log_row(self, b: int) -> np.ndarray:
        v = self.measure.variant
        if v == BETA:
            return _log_beta_row(b, self.measure.alpha)
        if v == UNIFORM:
            return _log_uniform_row(b)
        if v == KINGMAN:
            row = np.full(b - 1, -np.inf)
            row[0] = 0.0
            return row
        with np.errstate(divide="ignore"):
            return np.log([collision_rate(b, k, self.measure) for k in range(2, b + 1)])

    def log_row(self, b: int) -> np.ndarray:
        """``log lambda_{b,k}`` for ``k = 2..b``; entries far below 1e-308 stay finite here."""
        if not 2 <= b <= self.n_max:
            raise ValueError(f"b={b} outside table range [2, {self.n_max}]")
        r = self._log_rows.get(b)
        return r if r is not None else self._compute_log_row(b)

    def row(self, b: int) -> np.ndarray:
        """``lambda_{b,k}`` for ``k = 2..b``."""
        return np.exp(self.log_row(b))

    def rate(self, b: int, k: int) -> float:
        if not 2 <= k <= b:
            raise ValueError(f"need 2 <= k <= b, got b={b}, k={k}")
        return float(self.row(b)[k - 2])

    def merger_size_probs(self, b: int) -> np.ndarray:
        """``P(k blocks merge | b blocks, a merger happens)`` for ``k = 2..b``."""
        w = np.exp(_log_binom_row(b) + self.log_row(b))
        return w / w.sum()

    def merger_size_cdf(self, b: int) -> list[float]:
        cdf = self._cdfs.get(b)
        if cdf is None:
            cdf = np.cumsum(self.merger_size_probs(b)).tolist()
            cdf[-1] = 1.0
            self._cdfs[b] = cdf
        return cdf

    def sample_merger_size(self, b: int, u: float) -> int:
        """Inverse-CDF draw of the merger size from a uniform ``u``."""
        return 2 + bisect.bisect_right(self.merger_size_cdf(b), u)

    def verify(self, upto: int, rtol: float = CONSISTENCY_RTOL) -> float:
        """Check the consistency relation on rows ``b < upto``; return the worst relative error.

        Compared in log space, so rates that underflow a double are still checked.
        Raises ``ConsistencyError`` when an error exceeds ``rtol``.
        """
        worst = 0.0
        for b in range(2, upto):
            lo, hi = self.log_row(b), self.log_row(b + 1)
            with np.errstate(invalid="ignore"):
                rhs = np.logaddexp(hi[:-1], hi[1:])
            both_zero = np.isneginf(lo) & np.isneginf(rhs)
            if np.any(np.isnan(lo)) or np.any(np.isnan(rhs[~both_zero])):
                raise ConsistencyError(f"invalid rate in row {b}")
            d = lo[~both_zero] - rhs[~both_zero]
            if d.size:
                err = float(np.max(np.abs(np.expm1(d))))
                worst = max(worst, err)
                if not err <= rtol:
                    raise ConsistencyError(f"row {b}: relative consistency error {err:.3g}")
        if np.any(self.total_rates[2:upto + 1] <= 0):
            raise ConsistencyError("non-positive total rate")
        return worst


def build_rate_table(n_max: int, measure: LambdaMeasure) -> RateTable:
    return RateTable(n_max, measure)


# ---------------------------------------------------------------- offspring law

def chi_pmf(k, alpha: float):
    """``P(chi = k) = alpha Gamma(k - alpha) / (k! Gamma(2 - alpha))`` for ``k >= 2``, zero below.

    Accepts an integer or an integer array.
    """
    alpha = _check_alpha(alpha)
    k_arr = np.asarray(k)
    kf = np.maximum(k_arr, 2).astype(float)
    p = alpha * np.exp(gammaln(kf - alpha) - gammaln(kf + 1) - math.lgamma(2 - alpha))
    p = np.where(k_arr >= 2, p, 0.0)
    return float(p) if p.ndim == 0 else p


def chi_survival(k, alpha: float):
    """``P(chi > k) = Gamma(k + 1 - alpha) / (k! Gamma(2 - alpha))`` for ``k >= 1`` (one for ``k < 1``).

    Telescoping identity: ``Gamma(j - alpha)/j!`` is the difference of
    consecutive ``Gamma(j + 1 - alpha)/(alpha j!)`` terms.
    """
    alpha = _check_alpha(alpha)
    k_arr = np.asarray(k)
    kf = np.maximum(k_arr, 1).astype(float)
    s = np.exp(gammaln(kf + 1 - alpha) - gammaln(kf + 1) - math.lgamma(2 - alpha))
    s = np.where(k_arr >= 1, s, 1.0)
    return float(s) if s.ndim == 0 else s


def chi_pgf(r: float, alpha: float) -> float:
    """``E[r^chi] = ((1 - r)^alpha - 1 + alpha r) / (alpha - 1)``."""
    alpha = _check_alpha(alpha)
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    return ((1.0 - r) ** alpha - 1.0 + alpha * r) / (alpha - 1.0)


def chi_mean(alpha: float) -> float:
    return 1.0 + 1.0 / (_check_alpha(alpha) - 1.0)


class ChiSampler:
    """Inverse-CDF sampler for ``chi``.

    A table of ``P(chi > k)`` covers ``k <= table_size``; beyond it the exact
    survival function is inverted by bisection in log space, so there is no
    truncation of the heavy tail.
    """

    def __init__(self, alpha: float, table_size: int = 1 << 14):
        self.alpha = _check_alpha(alpha)
        self.table_size = table_size
        ks = np.arange(1, table_size + 1)
        self._surv = chi_survival(ks, alpha)
        self._neg_surv = -self._surv
        self._neg_surv_list = self._neg_surv.tolist()
        self._lg2a = math.lgamma(2 - alpha)

    def _log_surv(self, k: float) -> float:
        return math.lgamma(k + 1 - self.alpha) - math.lgamma(k + 1) - self._lg2a

    def _tail(self, u: float) -> int:
        # smallest k > table_size with P(chi > k) < u
        lu = math.log(u)
        lo = self.table_size
        hi = max(lo + 1, int((u * math.exp(self._lg2a)) ** (-1.0 / self.alpha)) + 1)
        while self._log_surv(hi) >= lu:
            lo, hi = hi, 2 * hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._log_surv(mid) < lu:
                hi = mid
            else:
                lo = mid
        return hi

    def one(self, u: float) -> int:
        """Draw from a uniform ``u`` in (0, 1]."""
        i = bisect.bisect_right(self._neg_surv_list, -u)
        if i < self.table_size:
            return i + 1
        return self._tail(u)

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        u = 1.0 - gen.random(size)
        out = np.searchsorted(self._neg_surv, -u, side="right") + 1
        far = np.flatnonzero(out > self.table_size)
        for i in far:
            out[i] = self._tail(float(u[i]))
        return out


@functools.lru_cache(maxsize=16)
def chi_sampler(alpha: float) -> ChiSampler:
    """Shared sampler per alpha; building the table dominates short simulations."""
    return ChiSampler(alpha)


# ---------------------------------------------------------------- killed population

def xi_tau_pmf(k, alpha: float):
    """``P(xi_tau = k) = (2 - alpha) Gamma(k + alpha - 2) / (Gamma(alpha - 1) k!)`` for ``k >= 1``."""
    alpha = _check_alpha(alpha)
    k_arr = np.asarray(k)
    kf = np.maximum(k_arr, 1).astype(float)
    p = (2 - alpha) * np.exp(gammaln(kf + alpha - 2) - math.lgamma(alpha - 1) - gammaln(kf + 1))
    p = np.where(k_arr >= 1, p, 0.0)
    return float(p) if p.ndim == 0 else p


def xi_tau_pmf_recursive(k_max: int, alpha: float) -> np.ndarray:
    """``P(xi_tau = k)`` for ``k = 1..k_max`` from the birth/kill balance recursion.

    ``P(k) = (k + c)^-1 sum_{j<k} j P(j) P(chi = k - j + 1)`` with ``P(1) = c/(1 + c)``.
    """
    alpha = _check_alpha(alpha)
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    c = (2 - alpha) / (alpha - 1)
    chi = chi_pmf(np.arange(0, k_max + 1), alpha)
    p = np.zeros(k_max + 1)
    p[1] = c / (1 + c)
    for k in range(2, k_max + 1):
        j = np.arange(1, k)
        p[k] = float(np.dot(j * p[1:k], chi[k - j + 1])) / (k + c)
    return p[1:]


# ---------------------------------------------------------------- CSBP and constants

def csbp_laplace_u(t: float, lam: float, alpha: float) -> float:
    """``u_t(lam) = (lam^(1-alpha) + (alpha-1) t)^(-1/(alpha-1))``, solving ``u' = -u^alpha``."""
    alpha = _check_alpha(alpha)
    if t < 0 or lam <= 0:
        raise ValueError("need t >= 0 and lam > 0")
    return (lam ** (1 - alpha) + (alpha - 1) * t) ** (-1.0 / (alpha - 1))


@dataclass(frozen=True)
class ModelConstants:
    alpha: float
    theta: float
    m: float
    c: float
    K_const: float

    @classmethod
    def of(cls, alpha: float, theta: float = 1.0) -> "ModelConstants":
        alpha = _check_alpha(alpha)
        if theta < 0:
            raise ValueError("theta must be nonnegative")
        return cls(
            alpha=alpha,
            theta=float(theta),
            m=1.0 + 1.0 / (alpha - 1.0),
            c=(2.0 - alpha) / (alpha - 1.0),
            K_const=(alpha - 1.0) ** (-1.0 / (alpha - 1.0)),
        )


@dataclass(frozen=True)
class LimitConstants:
    alpha: float
    theta: float
    block_count_const: float
    M_total_const: float
    frechet_scale: float

    def spectrum_const(self, k: int) -> float:
        """Limit of ``n^(alpha-2) M_k(n)`` (and of ``n^(alpha-2) N_k(n)``)."""
        a = self.alpha
        return self.theta * a * (a - 1) ** 2 * math.exp(math.lgamma(k + a - 2) - math.lgamma(k + 1))


def limit_constants(alpha: float, theta: float = 1.0) -> LimitConstants:
    a = _check_alpha(alpha)
    ga = math.gamma(a)
    return LimitConstants(
        alpha=a,
        theta=float(theta),
        block_count_const=(a * ga) ** (1.0 / (a - 1.0)),
        M_total_const=theta * a * (a - 1.0) * ga / (2.0 - a),
        frechet_scale=(a * ga * math.gamma(2.0 - a)) ** (1.0 / a),
    )
