"""Exact simulation of finite-sample Lambda-coalescents and statistics of the genealogy.

Block ids follow the usual tree-sequence convention: elements ``0..n-1`` start
in singleton blocks with the same ids, and the block created by the i-th merger
gets id ``n + i``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .rates import BETA, KINGMAN, LambdaMeasure, RateTable
from .rng import UniformBuffer, as_generator


class IncompleteTreeWarning(UserWarning):
    """A statistic that needs the full tree was asked of a tree stopped before its MRCA."""


@dataclass(frozen=True)
class Stop:
    """When to stop a simulation: ``Stop.at_time(t)``, ``Stop.at_blocks(m)`` or ``Stop.at_mrca()``."""

    kind: str = "mrca"
    value: float = 1.0

    @classmethod
    def at_time(cls, t: float) -> "Stop":
        if t < 0:
            raise ValueError("stop time must be nonnegative")
        return cls("time", float(t))

    @classmethod
    def at_blocks(cls, m: int) -> "Stop":
        return cls("blocks", int(m))

    @classmethod
    def at_mrca(cls) -> "Stop":
        return cls("mrca", 1)


class Event(NamedTuple):
    time: float
    merged: tuple[int, ...]
    into: int


@dataclass
class Partition:
    """A partition of ``{0..n-1}`` stored as a block label per element."""

    n: int
    block_of: np.ndarray

    @property
    def blocks(self) -> list[list[int]]:
        """Blocks as sorted element lists, ordered by their smallest element."""
        groups: dict[int, list[int]] = {}
        for i, b in enumerate(self.block_of.tolist()):
            groups.setdefault(b, []).append(i)
        return sorted(groups.values(), key=lambda g: g[0])

    def block_sizes(self) -> np.ndarray:
        _, counts = np.unique(self.block_of, return_counts=True)
        return counts

    def __len__(self) -> int:
        return len(np.unique(self.block_of))

    def canonical(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(b) for b in self.blocks)

    def is_coarsening_of(self, other: "Partition") -> bool:
        """True when every block of ``other`` sits inside one block of ``self``."""
        pairs = np.unique(np.stack([other.block_of, self.block_of]), axis=1)
        return len(np.unique(pairs[0])) == pairs.shape[1]


@dataclass
class GenealogyTree:
    """Append-only event log of a coalescent run plus per-block views.

    ``end_time`` is where the simulation stopped: the MRCA time, the time the
    block-count target was hit, or the requested horizon.
    """

    n: int
    times: np.ndarray
    merged: list[tuple[int, ...]]
    end_time: float
    alpha: float | None = None
    seed: int | None = None
    into: list[int] | None = None
    size: np.ndarray = field(init=False, repr=False)
    birth: np.ndarray = field(init=False, repr=False)
    death: np.ndarray = field(init=False, repr=False)
    parent: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        n_ev = len(self.merged)
        if len(self.times) != n_ev:
            raise ValueError("one time per event is required")
        if self.into is None:
            self.into = list(range(self.n, self.n + n_ev))
        if self.into != list(range(self.n, self.n + n_ev)):
            raise ValueError("new block ids must be n, n+1, ... in event order")
        if n_ev and np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        total = self.n + n_ev
        size = np.zeros(total, dtype=np.int64)
        size[: self.n] = 1
        birth = np.zeros(total)
        death = np.full(total, np.inf)
        parent = np.full(total, -1, dtype=np.int64)
        for i, (t, ids) in enumerate(zip(self.times.tolist(), self.merged)):
            new = self.n + i
            if len(ids) < 2:
                raise ValueError(f"event {i} merges fewer than two blocks")
            s = 0
            for b in ids:
                if not (0 <= b < new) or death[b] != np.inf:
                    raise ValueError(f"event {i} merges block {b}, which is not live")
                death[b] = t
                parent[b] = new
                s += size[b]
            size[new] = s
            birth[new] = t
        self.size, self.birth, self.death, self.parent = size, birth, death, parent
        k = np.fromiter((len(m) for m in self.merged), dtype=np.int64, count=n_ev)
        self.counts = self.n - np.concatenate([[0], np.cumsum(k - 1)])

    @property
    def events(self) -> Iterator[Event]:
        for i, (t, ids) in enumerate(zip(self.times.tolist(), self.merged)):
            yield Event(t, ids, self.n + i)

    @property
    def n_blocks_final(self) -> int:
        return int(self.counts[-1])

    @property
    def reached_mrca(self) -> bool:
        return self.n_blocks_final == 1

    @property
    def t_mrca(self) -> float:
        if not self.reached_mrca:
            raise ValueError("tree was stopped before its MRCA")
        return float(self.times[-1]) if len(self.times) else 0.0

    def live_blocks(self, t: float) -> np.ndarray:
        """Ids of blocks alive at time ``t`` (right-continuous)."""
        return np.flatnonzero((self.birth <= t) & (self.death > t))

    def branch_lengths(self) -> np.ndarray:
        """Per-block branch length; the root block and blocks alive at a stop time get the length up to ``end_time``."""
        top = np.minimum(self.death, self.end_time)
        lengths = np.maximum(top - self.birth, 0.0)
        if self.reached_mrca:
            lengths[-1 if len(self.times) else 0] = 0.0
        return lengths

    def partition_at(self, t: float) -> Partition:
        total = len(self.size)
        anc = np.arange(total)
        alive_at_t = self.death > t
        par = self.parent.tolist()
        alive = alive_at_t.tolist()
        anc_l = anc.tolist()
        for b in range(total - 1, -1, -1):
            if not alive[b]:
                anc_l[b] = anc_l[par[b]]
        return Partition(self.n, np.array(anc_l[: self.n], dtype=np.int64))

    # ---------------------------------------------------------- serialization

    def to_text(self) -> str:
        alpha = "none" if self.alpha is None else repr(float(self.alpha))
        seed = "none" if self.seed is None else str(int(self.seed))
        header = f"n={self.n} alpha={alpha} seed={seed}"
        if self._stopped_early():
            header += f" stop={self.end_time!r}"
        lines = [header]
        for ev in self.events:
            lines.append(f"t={ev.time!r} merge={','.join(map(str, ev.merged))} into={ev.into}")
        return "\n".join(lines) + "\n"

    def _stopped_early(self) -> bool:
        last = float(self.times[-1]) if len(self.times) else 0.0
        return self.end_time != last

    @classmethod
    def from_text(cls, text: str) -> "GenealogyTree":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty tree text")
        head = dict(tok.split("=", 1) for tok in lines[0].split())
        times, merged, into = [], [], []
        for ln in lines[1:]:
            rec = dict(tok.split("=", 1) for tok in ln.split())
            times.append(float(rec["t"]))
            merged.append(tuple(int(x) for x in rec["merge"].split(",")))
            into.append(int(rec["into"]))
        end = float(head["stop"]) if "stop" in head else (times[-1] if times else 0.0)
        return cls(
            n=int(head["n"]),
            times=np.array(times),
            merged=merged,
            end_time=end,
            alpha=None if head.get("alpha", "none") == "none" else float(head["alpha"]),
            seed=None if head.get("seed", "none") == "none" else int(head["seed"]),
            into=into,
        )

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "alpha": self.alpha,
            "seed": self.seed,
            "end_time": self.end_time,
            "events": [{"t": ev.time, "merge": list(ev.merged), "into": ev.into} for ev in self.events],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GenealogyTree":
        doc = json.loads(text)
        evs = doc["events"]
        return cls(
            n=doc["n"],
            times=np.array([e["t"] for e in evs], dtype=float),
            merged=[tuple(e["merge"]) for e in evs],
            end_time=doc["end_time"],
            alpha=doc.get("alpha"),
            seed=doc.get("seed"),
            into=[e["into"] for e in evs],
        )


# ---------------------------------------------------------------- simulation

_TABLES: dict[tuple, RateTable] = {}


def rate_table_for(n: int, measure: LambdaMeasure) -> RateTable:
    """A shared rate table covering ``n`` blocks (density measures are not cached)."""
    if measure.variant not in (BETA, KINGMAN) and measure.variant != "uniform":
        return RateTable(n, measure)
    key = (measure.variant, measure.alpha)
    table = _TABLES.get(key)
    if table is None or table.n_max < n:
        table = RateTable(max(n, 16), measure)
        _TABLES[key] = table
    return table


class _BetaMergerSize:
    """Exact merger-size draws for the Beta measure by rejection from ``chi``.

    Given b blocks, ``P(k) is proportional to P(chi = k) g(b - k)`` with
    ``g(m) = Gamma(m + alpha) / Gamma(m + 1)`` increasing in m, so accepting a
    ``chi`` proposal with probability ``g(b - k) / g(b - 2)`` is exact.
    """

    def __init__(self, alpha: float):
        from .rates import chi_sampler

        self.alpha = alpha
        self.chi = chi_sampler(alpha)

    def __call__(self, b: int, unif: UniformBuffer) -> int:
        if b == 2:
            return 2
        a = self.alpha
        lg = math.lgamma
        log_top = lg(b - 2 + a) - lg(b - 1)
        while True:
            k = self.chi.one(1.0 - unif())
            if k > b:
                continue
            if k == 2:
                return 2
            log_acc = lg(b - k + a) - lg(b - k + 1) - log_top
            if unif() < math.exp(log_acc):
                return k


def simulate_coalescent(
    n: int,
    measure: LambdaMeasure,
    rng,
    stop: Stop = Stop(),
    table: RateTable | None = None,
    seed: int | None = None,
) -> GenealogyTree:
    """Run the coalescent jump chain from n singletons.

    With b live blocks the chain waits an Exp(G_b) time, draws the merger size
    k with probability ``C(b,k) lambda_{b,k} / G_b`` and merges a uniform
    k-subset of the live blocks.

    :param rng: an ``RngStream``, ``numpy.random.Generator`` or integer seed.
    :param seed: recorded in the tree header; taken from ``rng`` when it is an ``RngStream``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    target = 1
    t_stop = math.inf
    if stop.kind == "blocks":
        target = int(stop.value)
        if not 1 <= target <= n:
            raise ValueError(f"block target must be in [1, {n}], got {target}")
    elif stop.kind == "time":
        t_stop = stop.value
    elif stop.kind != "mrca":
        raise ValueError(f"unknown stop rule {stop.kind!r}")
    if seed is None and hasattr(rng, "seed"):
        seed = rng.seed
    gen = as_generator(rng)
    unif = UniformBuffer(gen)
    table = table or rate_table_for(n, measure)
    G = table.total_rates.tolist()
    if measure.variant == BETA:
        draw_k = _BetaMergerSize(measure.alpha)
    elif measure.variant == KINGMAN:
        draw_k = None
    else:
        def draw_k(b, u):
            return table.sample_merger_size(b, u())

    live = list(range(n))
    b = n
    t = 0.0
    new_id = n
    times: list[float] = []
    merged: list[tuple[int, ...]] = []
    log = math.log
    while b > target:
        t -= log(unif.positive()) / G[b]
        if t > t_stop:
            break
        k = 2 if draw_k is None else draw_k(b, unif)
        # partial Fisher-Yates: move a uniform k-subset to the tail of `live`
        for i in range(k):
            last = b - 1 - i
            j = int(unif() * (last + 1))
            live[j], live[last] = live[last], live[j]
        chosen = live[b - k:]
        del live[b - k:]
        live.append(new_id)
        chosen.sort()
        times.append(t)
        merged.append(tuple(chosen))
        new_id += 1
        b -= k - 1
    end = t_stop if stop.kind == "time" and b > target else (times[-1] if times else 0.0)
    alpha = measure.alpha if measure.variant == BETA else None
    return GenealogyTree(n=n, times=np.array(times), merged=merged, end_time=end, alpha=alpha, seed=seed)


# ---------------------------------------------------------------- statistics

def block_count_at(tree: GenealogyTree, t: float) -> int:
    """Number of blocks at time t, counting an event at exactly t."""
    return int(tree.counts[np.searchsorted(tree.times, t, side="right")])


def time_to_m_blocks(tree: GenealogyTree, m: int) -> tuple[float | None, bool]:
    """First time the block count is at most m, and whether it equals m then.

    Returns ``(None, False)`` when the tree stops before reaching m blocks.
    """
    if not 1 <= m <= tree.n:
        raise ValueError(f"m must be in [1, {tree.n}]")
    if m >= tree.n:
        return 0.0, m == tree.n
    idx = int(np.argmax(tree.counts <= m))
    if tree.counts[idx] > m:
        return None, False
    return float(tree.times[idx - 1]), bool(tree.counts[idx] == m)


def largest_block_frequency(tree: GenealogyTree, t: float) -> float:
    """Size of the largest block at time t divided by n."""
    live = tree.live_blocks(t)
    return float(tree.size[live].max()) / tree.n


def coalescence_time_matrix(tree: GenealogyTree) -> np.ndarray:
    """``d[i, j]`` is the first time elements i and j share a block (``inf`` if never)."""
    n = tree.n
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    members: dict[int, np.ndarray] = {i: np.array([i]) for i in range(n)}
    for ev in tree.events:
        groups = [members.pop(b) for b in ev.merged]
        for a in range(len(groups)):
            for c in range(a + 1, len(groups)):
                d[np.ix_(groups[a], groups[c])] = ev.time
                d[np.ix_(groups[c], groups[a])] = ev.time
        members[ev.into] = np.concatenate(groups)
    return d


def total_tree_length(tree: GenealogyTree) -> float:
    """Sum over inter-event intervals of (live blocks) x (interval length).

    A tree stopped before its MRCA gives the length up to the last event and
    raises an ``IncompleteTreeWarning``.
    """
    if not tree.reached_mrca:
        warnings.warn("tree not run to its MRCA; length counted up to the last event", IncompleteTreeWarning)
    if len(tree.times) == 0:
        return 0.0
    dt = np.diff(np.concatenate([[0.0], tree.times]))
    return float(np.dot(tree.counts[:-1], dt))


def scaled_block_count_average(tree: GenealogyTree, alpha: float, lo: int, hi: int) -> float:
    """Log-time average of ``t^(1/(alpha-1)) N(t)`` while ``lo <= N(t) <= hi``.

    On each inter-event interval N is constant, so the average is the exact
    integral of ``N t^(p-1)`` divided by the log-length of the window.
    """
    p = 1.0 / (alpha - 1.0)
    counts = tree.counts
    starts = np.concatenate([[0.0], tree.times])
    ends = np.concatenate([tree.times, [tree.end_time]])
    mask = (counts >= lo) & (counts <= hi)
    if not mask.any():
        raise ValueError("the tree never has a block count inside the window")
    s, e, c = starts[mask], ends[mask], counts[mask]
    if not np.all(s > 0):
        raise ValueError("window includes t=0; choose hi below n")
    integral = float(np.sum(c * (e ** p - s ** p) / p))
    return integral / float(np.log(e[-1] / s[0]))
