"""Alpha-stable continuous-state branching process, its lookdown particle system and time change.

The CSBP with branching mechanism ``psi(q) = q^alpha`` has Levy measure
``nu(dx) = alpha (alpha - 1) / Gamma(2 - alpha) x^{-1-alpha} dx``, fully
compensated. Jumps below ``eps`` are dropped; the retained ones arrive at rate
``Z nu_eps`` and are compensated by the linear drift ``-c_eps Z``, so between
jumps the process decays exponentially.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from scipy import integrate

from .coalescent import Partition
from .rng import UniformBuffer, as_generator


def truncation_rates(alpha: float, eps: float) -> tuple[float, float]:
    """``(nu_eps, c_eps)``: mass of ``nu`` on ``[eps, inf)`` and its first moment there."""
    if not 1 < alpha < 2 or eps <= 0:
        raise ValueError("need 1 < alpha < 2 and eps > 0")
    g = math.gamma(2 - alpha)
    return (alpha - 1) * eps ** (-alpha) / g, alpha * eps ** (1 - alpha) / g


def small_jump_variance(alpha: float, eps: float) -> float:
    """``int_0^eps x^2 nu(dx)``, the variance rate carried by the dropped jumps."""
    return alpha * (alpha - 1) * eps ** (2 - alpha) / ((2 - alpha) * math.gamma(2 - alpha))


def default_absorb_level(alpha: float, eps: float) -> float:
    """Level below which a truncated path is treated as extinct.

    Decaying from ``eps`` to this level at rate ``c_eps`` takes
    ``eps^{alpha-1}/(alpha-1)``, the natural extinction time scale of the full
    process started from ``eps``.
    """
    return eps * math.exp(-alpha / ((alpha - 1) * math.gamma(2 - alpha)))


def truncated_mechanism(q: float, alpha: float, eps: float) -> float:
    """``psi_eps(q) = int_eps^inf (e^{-qx} - 1 + qx) nu(dx)``, the mechanism of the truncated process.

    Computed as ``q^alpha`` minus the small-jump part, which is expanded in
    powers of ``q eps`` when that is small and integrated numerically otherwise.
    """
    C = alpha * (alpha - 1) / math.gamma(2 - alpha)
    qe = q * eps
    if qe <= 1.0:
        small = 0.0
        term = 1.0
        for j in range(2, 60):
            term *= -qe / j if j > 2 else qe * qe / 2
            small += term / (j - alpha)
            if abs(term) < 1e-18:
                break
        small *= C * eps ** (-alpha)
    else:
        # x^{-1-alpha} (e^{-qx} - 1 + qx) behaves like q^2 x^{1-alpha}/2 at 0
        f = lambda x: (math.expm1(-q * x) + q * x) * x ** (-1 - alpha)
        small = C * integrate.quad(f, 0.0, eps, limit=200)[0]
    return q**alpha - small


def truncated_laplace_u(t: float, lam: float, alpha: float, eps: float) -> float:
    """``u`` with ``E[exp(-lam Z_t)] = exp(-z0 u)`` for the eps-truncated process.

    Solves ``u' = -psi_eps(u)``, ``u(0) = lam``. Paths never hit zero, so there
    is no extinction mass here.
    """
    sol = integrate.solve_ivp(
        lambda _, u: [-truncated_mechanism(u[0], alpha, eps)],
        (0.0, t),
        [lam],
        rtol=1e-11,
        atol=1e-14,
    )
    return float(sol.y[0, -1])


@dataclass
class CsbpPath:
    """Jump skeleton of a truncated CSBP path.

    ``z_pre[i]`` is the value just before the jump at ``t[i]``, ``dz[i]`` its size
    and ``y[i] = dz / (z_pre + dz)``. Between jumps ``Z`` decays at rate ``c_eps``.
    ``end`` is the time the simulation stopped; ``extinct`` is set when the path
    fell below ``absorb`` before that.
    """

    alpha: float
    z0: float
    epsilon: float
    c_eps: float
    nu_eps: float
    t: np.ndarray
    z_pre: np.ndarray
    dz: np.ndarray
    end: float
    extinct: bool = False
    absorb: float = 0.0
    extinction_time: float | None = None

    @property
    def y(self) -> np.ndarray:
        return self.dz / (self.z_pre + self.dz)

    def value_at(self, s: float) -> float:
        if s > self.end:
            raise ValueError("time beyond the simulated span")
        if self.extinction_time is not None and s >= self.extinction_time:
            return 0.0
        i = int(np.searchsorted(self.t, s, side="right"))
        if i == 0:
            base_t, base_z = 0.0, self.z0
        else:
            base_t, base_z = float(self.t[i - 1]), float(self.z_pre[i - 1] + self.dz[i - 1])
        return base_z * math.exp(-self.c_eps * (s - base_t))

    def final_value(self) -> float:
        return self.value_at(self.end)

    def sum_y2(self, upto: float | None = None) -> float:
        y = self.y if upto is None else self.y[self.t <= upto]
        return float(np.sum(y * y))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "Z_pre", "dZ", "y"])
        for row in zip(self.t.tolist(), self.z_pre.tolist(), self.dz.tolist(), self.y.tolist()):
            w.writerow([repr(v) for v in row])
        return buf.getvalue()


def time_change_constant(alpha: float) -> float:
    """``alpha (alpha - 1) Gamma(alpha)``."""
    return alpha * (alpha - 1) * math.gamma(alpha)


def simulate_csbp(
    alpha: float,
    z0: float,
    epsilon: float,
    horizon: float,
    rng,
    absorb: float | None = None,
    until_R: float | None = None,
) -> CsbpPath:
    """One path of the eps-truncated CSBP on ``[0, horizon]``.

    After a jump at ``t_i`` to level ``z``, the next one comes after the time u
    solving ``z nu_eps (1 - e^{-c u}) / c = E`` with ``E ~ Exp(1)``; when E is
    too large there are no more jumps at all. Sizes are ``eps U^{-1/alpha}``.

    :param absorb: extinction level; ``None`` uses :func:`default_absorb_level`, 0 disables.
    :param until_R: also stop once the time change ``R`` reaches this value.
    """
    if not 0 < epsilon < z0:
        raise ValueError("need 0 < epsilon < z0")
    nu, c = truncation_rates(alpha, epsilon)
    if absorb is None:
        absorb = default_absorb_level(alpha, epsilon)
    gen = as_generator(rng)
    unif = UniformBuffer(gen)
    inv_alpha = -1.0 / alpha
    kR = c * (alpha - 1)
    CR = time_change_constant(alpha)
    R_cap = math.inf if until_R is None else until_R
    log, exp, log1p = math.log, math.exp, math.log1p
    ts: list[float] = []
    zp: list[float] = []
    dzs: list[float] = []
    t, z, R = 0.0, float(z0), 0.0
    end = horizon
    extinct = False
    t_ext = None
    while True:
        e = -log(unif.positive())
        x = c * e / (z * nu)
        u = -log1p(-x) / c if x < 1.0 else math.inf
        t_next = t + u
        stop_t = horizon
        if absorb > 0 and z > absorb:
            t_abs = t + log(z / absorb) / c
            if t_abs < stop_t:
                stop_t = t_abs
        if until_R is not None:
            # R gained on [t, t + v] is CR z^{1-alpha} (e^{kR v} - 1) / kR
            need = R_cap - R
            v_R = log1p(need * kR / (CR * z ** (1 - alpha))) / kR
            if t + v_R < stop_t:
                stop_t = t + v_R
        if t_next >= stop_t:
            if until_R is not None and stop_t == t + v_R:
                end = stop_t
            elif stop_t < horizon:
                extinct = True
                t_ext = stop_t
                end = stop_t
            else:
                end = horizon
            break
        pre = z * exp(-c * u)
        if until_R is not None:
            R += CR * z ** (1 - alpha) * (exp(kR * u) - 1) / kR
        jump = epsilon * unif.positive() ** inv_alpha
        ts.append(t_next)
        zp.append(pre)
        dzs.append(jump)
        t = t_next
        z = pre + jump
    return CsbpPath(
        alpha=alpha,
        z0=float(z0),
        epsilon=epsilon,
        c_eps=c,
        nu_eps=nu,
        t=np.array(ts),
        z_pre=np.array(zp),
        dz=np.array(dzs),
        end=end,
        extinct=extinct,
        absorb=absorb,
        extinction_time=t_ext,
    )


def csbp_marginals(
    alpha: float,
    z0: float,
    epsilons,
    horizon: float,
    size: int,
    rng,
    absorb_factor: float | None = None,
    block: int = 4096,
) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    """``Z_horizon`` for ``size`` paths at several truncation levels, coupled.

    In the clock ``theta = int_0^t Z ds`` the truncated process is the Levy
    process ``X(theta) = z0 + (sum of jumps) - c_eps theta`` with jumps at rate
    ``nu_eps``. One skeleton for the smallest eps, thinned to jumps of size at
    least eps, drives every level; real time is recovered segment by segment
    as ``dt = log(X_start / X_end) / c_eps``. Each level on its own has exactly
    the law produced by :func:`simulate_csbp`.

    Returns ``{eps: (Z_T, extinct)}``; extinct paths have ``Z_T = 0``.
    """
    eps_sorted = sorted(float(e) for e in epsilons)
    base = eps_sorted[0]
    if not (0 < base and eps_sorted[-1] < z0):
        raise ValueError("need 0 < eps < z0")
    gen = as_generator(rng)
    nu_base, _ = truncation_rates(alpha, base)
    levels = []
    for e in eps_sorted:
        _, c = truncation_rates(alpha, e)
        absorb = default_absorb_level(alpha, e) if absorb_factor is None else absorb_factor * e
        levels.append((e, c, absorb))
    out = {e: (np.zeros(size), np.zeros(size, dtype=bool)) for e in eps_sorted}
    inv_alpha = -1.0 / alpha
    for p in range(size):
        # per level: current value right after the last skeleton point, and real time there
        z = [float(z0)] * len(levels)
        t = [0.0] * len(levels)
        open_levels = list(range(len(levels)))
        while open_levels:
            dtheta = gen.standard_exponential(block) / nu_base
            jumps = base * (1.0 - gen.random(block)) ** inv_alpha
            theta = np.cumsum(dtheta)
            still = []
            for li in open_levels:
                e, c, absorb = levels[li]
                kept = np.where(jumps >= e, jumps, 0.0)
                # level just before / after each skeleton point, relative to the block start
                post = z[li] + np.cumsum(kept) - c * theta
                pre = post - kept
                start = np.concatenate([[z[li]], post[:-1]])
                with np.errstate(divide="ignore", invalid="ignore"):
                    dt = np.log(start / pre) / c
                bad = np.flatnonzero(~(pre > absorb))
                stop_at = bad[0] if bad.size else block
                times = t[li] + np.cumsum(dt[:stop_at])
                over = np.flatnonzero(times >= horizon)
                if over.size:
                    i = over[0]
                    t0 = t[li] if i == 0 else times[i - 1]
                    z_start = start[i]
                    out[e][0][p] = z_start * math.exp(-c * (horizon - t0))
                    continue
                if bad.size:
                    i = stop_at
                    t0 = t[li] if i == 0 else times[i - 1]
                    z_start = start[i]
                    t_abs = t0 + math.log(z_start / absorb) / c
                    if t_abs <= horizon:
                        out[e][1][p] = True
                    else:
                        out[e][0][p] = z_start * math.exp(-c * (horizon - t0))
                    continue
                z[li] = float(post[-1])
                t[li] = float(times[-1])
                still.append(li)
            open_levels = still
    return out


def inverse_z_integral(path: CsbpPath, a: float, b: float) -> float:
    """``int_a^b ds / Z_s`` along the path, exact between jumps."""
    if not 0 <= a <= b <= path.end:
        raise ValueError("need 0 <= a <= b <= path end")
    knots = np.concatenate([[0.0], path.t])
    ends = np.concatenate([path.t, [path.end]])
    z_post = np.concatenate([[path.z0], path.z_pre + path.dz])
    lo = np.clip(a, knots, ends)
    hi = np.clip(b, knots, ends)
    c = path.c_eps
    return float(np.sum((np.exp(c * (hi - knots)) - np.exp(c * (lo - knots))) / (c * z_post)))


# ---------------------------------------------------------------- lookdown

def lookdown_relabel(types: list, participants) -> list:
    """Types after a birth event in which the given levels (0-based) participate.

    Participants take the type of the lowest participant. The individuals that
    sat above the lowest participant keep their order and move into the free
    (non-participating) levels above it; whatever is pushed past the top level
    is lost.
    """
    n = len(types)
    p = sorted(set(participants))
    if len(p) < 2:
        return list(types)
    i1 = p[0]
    pset = set(p)
    out = list(types)
    movers = iter(types[i1 + 1:])
    for level in range(i1 + 1, n):
        if level in pset:
            out[level] = types[i1]
        else:
            out[level] = next(movers)
    return out


def lookdown_source(level: int, participants) -> int:
    """Level just before a birth event that the individual at ``level`` just after it comes from."""
    p = sorted(participants)
    i1 = p[0]
    if level <= i1:
        return level
    if level in set(p):
        return i1
    # r-th free level above i1 takes the individual from level i1 + r
    r = level - i1 - sum(1 for q in p if i1 < q < level)
    return i1 + r


@dataclass
class LookdownLog:
    """Birth events touching the first ``n_levels`` levels (0-based), in time order.

    Only events with at least two participants among those levels are kept;
    the others leave every level unchanged.
    """

    n_levels: int
    initial_types: np.ndarray
    times: np.ndarray
    participants: list[tuple[int, ...]]
    span: tuple[float, float] = (0.0, math.inf)
    types: list = field(default=None, repr=False)

    def replay(self, upto: float | None = None) -> list:
        """Types on the first levels at time ``upto`` (default: end of log)."""
        cur = self.initial_types.tolist()
        for t, p in zip(self.times.tolist(), self.participants):
            if upto is not None and t > upto:
                break
            cur = lookdown_relabel(cur, p)
        return cur

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_levels": self.n_levels,
                "initial_types": self.initial_types.tolist(),
                "events": [{"t": t, "levels": list(p)} for t, p in zip(self.times.tolist(), self.participants)],
            }
        )


def run_lookdown(path: CsbpPath, n_levels: int, rng) -> LookdownLog:
    """Drive the first ``n_levels`` levels with the path's jumps: each level joins a jump with probability y."""
    gen = as_generator(rng)
    init = gen.random(n_levels)
    y = path.y
    heads = gen.random((len(y), n_levels)) < y[:, None]
    rows = np.flatnonzero(heads.sum(axis=1) >= 2)
    parts = [tuple(np.flatnonzero(heads[r]).tolist()) for r in rows]
    log = LookdownLog(n_levels, init, path.t[rows], parts, span=(0.0, path.end))
    log.types = log.replay()
    return log


def ancestral_partition(log: LookdownLog, s: float, T: float) -> Partition:
    """Levels at time T grouped by the level they descend from at time s."""
    if s > T:
        raise ValueError("need s <= T")
    src = list(range(log.n_levels))
    lo = np.searchsorted(log.times, s, side="right")
    hi = np.searchsorted(log.times, T, side="right")
    for i in range(hi - 1, lo - 1, -1):
        p = log.participants[i]
        src = [lookdown_source(x, p) for x in src]
    return Partition(log.n_levels, np.array(src, dtype=np.int64))


# ---------------------------------------------------------------- time change

@dataclass
class TimeChange:
    """``R_t = alpha (alpha - 1) Gamma(alpha) int_0^t Z_s^{1-alpha} ds`` on a jump skeleton.

    ``knots`` are the path's jump times (with 0 first), ``z_post`` the value
    right after each knot and ``R_knots`` the integral up to each knot.
    """

    alpha: float
    c: float
    knots: np.ndarray
    z_post: np.ndarray
    R_knots: np.ndarray
    end: float

    def _piece(self, i: int, v):
        # R gained over a time v after knot i
        a = self.alpha
        base = time_change_constant(a) * self.z_post[i] ** (1 - a)
        k = self.c * (a - 1)
        if k == 0:
            return base * v
        return base * np.expm1(k * v) / k

    def R(self, s: float) -> float:
        if s < 0 or s > self.end:
            raise ValueError("time outside the path span")
        i = int(np.searchsorted(self.knots, s, side="right")) - 1
        return float(self.R_knots[i] + self._piece(i, s - self.knots[i]))

    @property
    def R_end(self) -> float:
        return self.R(self.end)

    def inverse(self, r: float) -> float:
        """The time s with ``R(s) = r``."""
        if r < 0 or r > self.R_end:
            raise ValueError(f"R^-1({r}) lies beyond the path's lifetime or span")
        i = int(np.searchsorted(self.R_knots, r, side="right")) - 1
        a = self.alpha
        base = time_change_constant(a) * self.z_post[i] ** (1 - a)
        k = self.c * (a - 1)
        gap = r - self.R_knots[i]
        v = gap / base if k == 0 else math.log1p(k * gap / base) / k
        return float(min(self.knots[i] + v, self.end))


def time_change_R(path: CsbpPath) -> TimeChange:
    knots = np.concatenate([[0.0], path.t])
    z_post = np.concatenate([[path.z0], path.z_pre + path.dz])
    tc = TimeChange(path.alpha, path.c_eps, knots, z_post, np.zeros(len(knots)), path.end)
    if len(knots) > 1:
        gains = np.array([tc._piece(i, knots[i + 1] - knots[i]) for i in range(len(knots) - 1)])
        tc.R_knots = np.concatenate([[0.0], np.cumsum(gains)])
    return tc
