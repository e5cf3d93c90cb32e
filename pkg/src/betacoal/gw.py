"""Continuous-time Galton-Watson trees with offspring law ``chi``.

Individuals live an Exp(1) time and are then replaced by ``chi >= 2``
children. The module covers the plain tree, the Kesten-Stigum normalisation,
the population at an independent exponential killing time, the tree carrying
mutation marks at rate ``theta e^{-s}``, and the infinite-server queue with
exponentially growing arrival rate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rates import ModelConstants, chi_sampler
from .rng import UniformBuffer, as_generator

DEFAULT_CAP = 10**6


class PopulationCapError(RuntimeError):
    """The population outgrew the configured cap; ``partial`` holds what was simulated."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class GWTree:
    """Individuals as parallel arrays; ``death`` is ``inf`` for those alive at the horizon."""

    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    horizon: float
    z0: int
    offspring: np.ndarray = field(repr=False, default=None)

    def population_at(self, t: float) -> int:
        if t > self.horizon:
            raise ValueError("t is beyond the simulated horizon")
        return int(np.sum((self.birth <= t) & (self.death > t)))

    def population_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Jump times of ``xi_t`` and its value right after each jump (starting at time 0)."""
        deaths = self.death[np.isfinite(self.death)]
        order = np.argsort(deaths)
        jumps = (self.offspring - 1)[order] if self.offspring is not None else None
        times = np.concatenate([[0.0], deaths[order]])
        values = self.z0 + np.concatenate([[0], np.cumsum(jumps)])
        return times, values

    def __len__(self) -> int:
        return len(self.birth)


def simulate_gw(alpha: float, z0: int, horizon: float, rng, cap: int = DEFAULT_CAP) -> GWTree:
    """Event-driven simulation: with xi individuals alive the next death comes after Exp(xi)."""
    if z0 < 1:
        raise ValueError("z0 must be at least 1")
    if not horizon >= 0 or math.isinf(horizon):
        raise ValueError("horizon must be finite and nonnegative")
    gen = as_generator(rng)
    unif = UniformBuffer(gen)
    chi = chi_sampler(alpha)
    parent = [-1] * z0
    birth = [0.0] * z0
    death = [math.inf] * z0
    offspring: list[int] = []
    alive = list(range(z0))
    t = 0.0
    log = math.log
    while True:
        t -= log(unif.positive()) / len(alive)
        if t > horizon:
            break
        i = int(unif() * len(alive))
        who = alive[i]
        alive[i] = alive[-1]
        alive.pop()
        death[who] = t
        k = chi.one(1.0 - unif())
        offspring.append(k)
        first = len(birth)
        parent.extend([who] * k)
        birth.extend([t] * k)
        death.extend([math.inf] * k)
        alive.extend(range(first, first + k))
        if len(alive) > cap:
            partial = GWTree(np.array(parent), np.array(birth), np.array(death), t, z0, np.array(offspring))
            raise PopulationCapError(f"population {len(alive)} exceeds cap {cap} at t={t:.4g}", partial)
    return GWTree(np.array(parent), np.array(birth), np.array(death), float(horizon), z0, np.array(offspring, dtype=np.int64))


def kesten_stigum_estimate(tree: GWTree, alpha: float, t: float | None = None) -> float:
    """``e^{-(m-1) t} xi_t`` with ``m - 1 = 1/(alpha - 1)``; t defaults to the horizon."""
    t = tree.horizon if t is None else t
    return math.exp(-t / (alpha - 1.0)) * tree.population_at(t)


def gw_pgf(r: float, t: float, alpha: float) -> float:
    """``E[r^{xi_t}]`` from one ancestor, in closed form.

    Solving the backward equation ``F' = f(F) - F`` with ``f`` the ``chi``
    generating function gives
    ``1 - (1 + ((1 - r)^{1-alpha} - 1) e^{-t})^{-1/(alpha-1)}``.
    """
    if r >= 1.0:
        return 1.0
    q = (1.0 - r) ** (1.0 - alpha)
    return 1.0 - (1.0 + (q - 1.0) * math.exp(-t)) ** (-1.0 / (alpha - 1.0))


def kesten_stigum_laplace(s: float, alpha: float) -> float:
    """``E[exp(-s W)]`` for the Kesten-Stigum limit W of one ancestor: ``1 - (1 + s^{1-alpha})^{-1/(alpha-1)}``."""
    return 1.0 - (1.0 + s ** (1.0 - alpha)) ** (-1.0 / (alpha - 1.0))


# ---------------------------------------------------------------- killed population

def simulate_xi_tau(alpha: float, rng, cap: int | None = None) -> int:
    """Population of a GW tree from one ancestor at an independent Exp(c) time.

    With ``cap`` set, the run stops as soon as the population exceeds it and the
    returned value is only known to be above ``cap`` (the population never shrinks).
    """
    gen = as_generator(rng)
    c = ModelConstants.of(alpha).c
    chi = chi_sampler(alpha)
    tau = gen.exponential(1.0 / c)
    pop = 1
    t = 0.0
    while True:
        t += gen.exponential(1.0 / pop)
        if t > tau:
            return pop
        pop += chi.one(1.0 - gen.random()) - 1
        if cap is not None and pop > cap:
            return pop


def simulate_xi_tau_batch(alpha: float, size: int, rng, cap: int = 1000) -> np.ndarray:
    """``size`` independent draws of ``xi_tau``, all chains advanced together.

    Values above ``cap`` are lower bounds (the chain is stopped there), so only
    the tail bin ``> cap`` is meaningful beyond it.
    """
    gen = as_generator(rng)
    c = ModelConstants.of(alpha).c
    chi = chi_sampler(alpha)
    tau = gen.exponential(1.0 / c, size)
    pop = np.ones(size, dtype=np.int64)
    clock = np.zeros(size)
    active = np.arange(size)
    while active.size:
        clock[active] += gen.standard_exponential(active.size) / pop[active]
        born = clock[active] <= tau[active]
        grow = active[born]
        pop[grow] += chi.sample(gen, grow.size) - 1
        active = grow[pop[grow] <= cap]
    return pop


# ---------------------------------------------------------------- marked tree

@dataclass
class MarkedGWStats:
    """Mutation statistics of one marked GW tree at horizon ``t``.

    Spectra are sparse ``{k: count}`` dicts. ``N_k_gw`` counts allele blocks
    carried by a mutation; the block of leaves with no mutation above them is
    reported as ``ancestral_size``.
    """

    t: float
    M_k_gw: dict[int, int]
    N_k_gw: dict[int, int]
    L_k: dict[int, int]
    K_t: int
    M_t: int
    ancestral_size: int
    population: int

    def dense(self, name: str, k_max: int) -> np.ndarray:
        """Counts for ``k = 1..k_max`` of ``M_k_gw``, ``N_k_gw`` or ``L_k``."""
        d = getattr(self, name)
        return np.array([d.get(k, 0) for k in range(1, k_max + 1)])

    def identity_violations(self) -> int:
        """Number of failures of ``sum L_k + K = M`` and of the two sandwich bounds."""
        bad = int(sum(self.L_k.values()) + self.K_t != self.M_t)
        for k in set(self.M_k_gw) | set(self.N_k_gw) | set(self.L_k):
            lk = self.L_k.get(k, 0)
            for d in (self.M_k_gw, self.N_k_gw):
                v = d.get(k, 0)
                bad += int(not lk <= v <= lk + self.K_t)
        return bad


def _sparse(values: np.ndarray) -> dict[int, int]:
    ks, cs = np.unique(values, return_counts=True)
    return dict(zip(ks.tolist(), cs.tolist()))


def _truncated_poisson(mu: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws of a Poisson(mu) conditioned to be at least one."""
    k = np.ones(len(mu), dtype=np.int64)
    p = mu / np.expm1(mu)  # P(K = 1 | K >= 1)
    cum = p.copy()
    todo = np.flatnonzero(u > cum)
    step = 1
    while todo.size:
        step += 1
        p[todo] *= mu[todo] / step
        cum[todo] += p[todo]
        k[todo] = step
        todo = todo[u[todo] > cum[todo]]
    return k


def simulate_marked_gw(alpha: float, theta: float, horizon: float, rng, cap: int | None = None, chunk: int = 1 << 18) -> MarkedGWStats:
    """Grow one GW tree to ``horizon`` with marks at rate ``theta e^{-s}`` per lineage.

    Individuals are processed in cohorts, never stored: each carries its birth
    time and the id of the latest mark on its ancestral line. Marks form their
    own tree (a mark's parent is the previous mark on the line), from which
    the descendant count of every mark and the allele blocks follow.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    gen = as_generator(rng)
    chi = chi_sampler(alpha)
    mark_parent = [np.array([-1], dtype=np.int64)]  # mark 0 stands for the ancestral type
    n_marks = 1
    direct = np.zeros(1024, dtype=np.int64)
    alive_total = 0
    stack = [(np.zeros(1), np.zeros(1, dtype=np.int64))]
    while stack:
        born, label = stack.pop()
        if born.size > chunk:
            half = born.size // 2
            stack.append((born[half:], label[half:]))
            born, label = born[:half], label[:half]
        size = born.size
        died = born + gen.standard_exponential(size)
        end = np.minimum(died, horizon)
        if theta > 0:
            eb = np.exp(-born)
            span = eb - np.exp(-end)
            mu = theta * span
            hit = np.flatnonzero(gen.random(size) < -np.expm1(-mu))
            if hit.size:
                per = _truncated_poisson(mu[hit], gen.random(hit.size))
                owner = np.repeat(hit, per)
                v = gen.random(owner.size)
                s = -np.log(eb[owner] - v * span[owner])
                order = np.lexsort((s, owner))
                owner = owner[order]
                ids = n_marks + np.arange(owner.size)
                first = np.ones(owner.size, dtype=bool)
                first[1:] = owner[1:] != owner[:-1]
                par = np.empty(owner.size, dtype=np.int64)
                par[first] = label[owner[first]]
                par[~first] = ids[:-1][~first[1:]]
                mark_parent.append(par)
                n_marks += owner.size
                last = np.ones(owner.size, dtype=bool)
                last[:-1] = owner[1:] != owner[:-1]
                label = label.copy()
                label[owner[last]] = ids[last]
        dying = died < horizon
        survivors = label[~dying]
        if survivors.size:
            if n_marks > direct.size:
                direct = np.concatenate([direct, np.zeros(max(n_marks, 2 * direct.size) - direct.size, dtype=np.int64)])
            direct += np.bincount(survivors, minlength=direct.size)
            alive_total += survivors.size
        if dying.any():
            kids = chi.sample(gen, int(dying.sum()))
            stack.append((np.repeat(died[dying], kids), np.repeat(label[dying], kids)))
            if cap is not None and alive_total + sum(b.size for b, _ in stack) > cap:
                raise PopulationCapError(f"marked tree exceeded cap {cap}")
    parents = np.concatenate(mark_parent)
    direct = direct[:n_marks]
    total = direct.copy()
    par_l = parents.tolist()
    tot_l = total.tolist()
    for m in range(n_marks - 1, 0, -1):
        tot_l[par_l[m]] += tot_l[m]
    total = np.array(tot_l, dtype=np.int64)
    real_total = total[1:]
    real_direct = direct[1:]
    # clean: no alive descendant carries a later mark (k = 0 counts as clean)
    clean = real_total == real_direct
    return MarkedGWStats(
        t=horizon,
        M_k_gw=_sparse(real_total),
        N_k_gw=_sparse(real_direct[real_direct > 0]),
        L_k=_sparse(real_total[clean]),
        K_t=int((~clean).sum()),
        M_t=n_marks - 1,
        ancestral_size=int(direct[0]),
        population=alive_total,
    )


# ---------------------------------------------------------------- queue

@dataclass
class QueueTrajectory:
    """Infinite-server queue path: ``length[i]`` holds on ``[times[i], times[i+1])``."""

    times: np.ndarray
    length: np.ndarray
    A: float
    c: float
    horizon: float

    def at(self, t: float) -> int:
        return int(self.length[np.searchsorted(self.times, t, side="right") - 1])

    def final(self) -> int:
        return int(self.length[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "Q"])
        for t, q in zip(self.times.tolist(), self.length.tolist()):
            w.writerow([repr(t), q])
        return buf.getvalue()


def _departures(start: np.ndarray, service, gen: np.random.Generator, horizon: float) -> np.ndarray:
    e = gen.standard_exponential(start.size)
    if not callable(service):
        if service < 0:
            raise ValueError("service rate must be nonnegative")
        with np.errstate(divide="ignore"):
            return start + e / service
    # cumulative hazard on a grid, inverted per customer
    grid = np.linspace(0.0, horizon, 20001)
    rate = np.array([service(v) for v in grid], dtype=float)
    if np.any(rate < 0):
        raise ValueError("service rate must be nonnegative")
    hazard = np.concatenate([[0.0], np.cumsum((rate[1:] + rate[:-1]) * np.diff(grid) / 2)])
    target = np.interp(start, grid, hazard) + e
    out = np.interp(target, hazard, grid, right=np.inf)
    out[target > hazard[-1]] = np.inf
    return out


def simulate_queue(
    A: float,
    c: float,
    service: float | Callable[[float], float],
    horizon: float,
    rng,
    initial: int | str = 0,
) -> QueueTrajectory:
    """Infinite-server queue with arrivals at rate ``A e^{ct}`` and Exp service.

    ``service`` is a constant rate or a function of time (a customer present at
    time v leaves at rate ``service(v)``). ``initial`` is a number of customers
    at time 0 or ``"stationary"`` for a Poisson(A/(lambda + c)) seed, which makes
    ``Q_t`` exactly Poisson with mean ``A e^{ct}/(lambda + c)`` for constant lambda.
    """
    if A < 0 or c <= 0 or horizon < 0:
        raise ValueError("need A >= 0, c > 0, horizon >= 0")
    gen = as_generator(rng)
    if initial == "stationary":
        if callable(service):
            raise ValueError("stationary start needs a constant service rate")
        q0 = int(gen.poisson(A / (service + c)))
    else:
        q0 = int(initial)
    mass = A * math.expm1(c * horizon) / c
    count = int(gen.poisson(mass))
    arrivals = np.sort(np.log1p(gen.random(count) * math.expm1(c * horizon)) / c)
    starts = np.concatenate([np.zeros(q0), arrivals])
    leave = _departures(starts, service, gen, horizon)
    dep = np.sort(leave[leave <= horizon])
    times = np.concatenate([arrivals, dep])
    steps = np.concatenate([np.ones(arrivals.size, dtype=np.int64), -np.ones(dep.size, dtype=np.int64)])
    order = np.argsort(times, kind="stable")
    times = np.concatenate([[0.0], times[order]])
    length = q0 + np.concatenate([[0], np.cumsum(steps[order])])
    return QueueTrajectory(times, length, A, c, horizon)
