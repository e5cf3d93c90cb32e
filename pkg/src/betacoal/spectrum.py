"""Mutations on a coalescent genealogy: site and allele frequency spectra.

Mutations fall as a Poisson process of rate ``theta`` per unit branch length
below the MRCA. Under the infinite-sites reading a mutation on a block is
carried by every element of that block; under the infinite-alleles reading a
leaf's type is the most recent mutation above it (the one closest to the
leaf), or the ancestral type when there is none.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .coalescent import GenealogyTree, Partition
from .rng import as_generator

ANCESTRAL = -1


@dataclass
class MutationSet:
    """Marks as parallel arrays: the block each one sits on and its time."""

    block: np.ndarray
    time: np.ndarray
    theta: float

    def __len__(self) -> int:
        return len(self.block)

    @classmethod
    def from_pairs(cls, pairs, theta: float = 0.0) -> "MutationSet":
        pairs = list(pairs)
        return cls(
            block=np.array([p[0] for p in pairs], dtype=np.int64),
            time=np.array([p[1] for p in pairs], dtype=float),
            theta=theta,
        )

    def validate(self, tree: GenealogyTree) -> None:
        """Raise if a mark lies outside its branch or above the MRCA."""
        if len(self) == 0:
            return
        top = np.minimum(tree.death[self.block], tree.end_time)
        ok = (tree.birth[self.block] <= self.time) & (self.time < top)
        if tree.reached_mrca:
            ok &= tree.death[self.block] < np.inf
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise ValueError(f"mark {bad} on block {self.block[bad]} at t={self.time[bad]} is not on a live branch")


@dataclass
class SpectrumCounts:
    """Site spectrum ``M_k`` (k=1..n-1) and allele spectrum ``N_k`` (k=1..n).

    ``M_k[k-1]`` and ``N_k[k-1]`` hold the count for frequency k. ``N_k``
    includes the block of ancestral-type leaves; ``ancestral_size`` reports it
    separately (zero when every leaf carries a mutation). ``K`` is the number
    of mutations that have another mutation below them.
    """

    n: int
    M_k: np.ndarray
    N_k: np.ndarray
    M_total: int
    allelic_partition: Partition
    ancestral_size: int
    K: int

    @property
    def N_k_derived(self) -> np.ndarray:
        """Allele spectrum without the ancestral-type block."""
        out = self.N_k.copy()
        if self.ancestral_size:
            out[self.ancestral_size - 1] -= 1
        return out

    def to_csv(self, wrapped: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if wrapped:
            w.writerow(["k", "M_hat_k"])
            for k, v in enumerate(wrapped_spectrum(self), start=1):
                w.writerow([k, int(v)])
        else:
            w.writerow(["k", "M_k", "N_k"])
            for k in range(1, self.n + 1):
                m = int(self.M_k[k - 1]) if k < self.n else 0
                w.writerow([k, m, int(self.N_k[k - 1])])
        return buf.getvalue()

    def summary(self, **extra) -> dict:
        return {"n": self.n, "M_total": int(self.M_total), "K": int(self.K), "ancestral_size": int(self.ancestral_size), **extra}


def scatter_mutations(tree: GenealogyTree, theta: float, rng) -> MutationSet:
    """Poisson(theta * L) marks placed uniformly on the branch-length measure below the MRCA."""
    if not tree.reached_mrca:
        raise ValueError("mutations need a tree run to its MRCA")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    gen = as_generator(rng)
    lengths = tree.branch_lengths()
    cum = np.cumsum(lengths)
    total = float(cum[-1])
    count = int(gen.poisson(theta * total)) if theta > 0 else 0
    if count == 0:
        return MutationSet(np.zeros(0, dtype=np.int64), np.zeros(0), theta)
    x = gen.random(count) * total
    block = np.searchsorted(cum, x, side="right")
    block = np.minimum(block, len(cum) - 1)
    offset = x - (cum[block] - lengths[block])
    time = tree.birth[block] + np.clip(offset, 0.0, np.nextafter(lengths[block], 0))
    return MutationSet(block.astype(np.int64), time, theta)


def site_frequency_spectrum(tree: GenealogyTree, muts: MutationSet) -> np.ndarray:
    """``M_k`` for ``k = 1..n-1``: number of marks whose block holds k elements."""
    sizes = tree.size[muts.block]
    if np.any(sizes >= tree.n):
        raise ValueError("a mark sits on the root branch")
    return np.bincount(sizes, minlength=tree.n)[1: tree.n]


def _leaf_alleles(tree: GenealogyTree, muts: MutationSet) -> np.ndarray:
    """Per leaf, the index of its most recent mark or ``ANCESTRAL``."""
    total = len(tree.size)
    own = np.full(total, ANCESTRAL, dtype=np.int64)
    if len(muts):
        # the earliest (most recent) mark on each block
        order = np.argsort(muts.time, kind="stable")
        blocks, first = np.unique(muts.block[order], return_index=True)
        own[blocks] = order[first]
    own_l = own.tolist()
    par = tree.parent.tolist()
    allele = own_l[:]
    for b in range(total - 1, -1, -1):
        if allele[b] == ANCESTRAL and par[b] >= 0:
            allele[b] = allele[par[b]]
    return np.array(allele[: tree.n], dtype=np.int64)


def allele_partition(tree: GenealogyTree, muts: MutationSet) -> Partition:
    """Leaves grouped by allele; the ancestral type is labelled ``-1``."""
    return Partition(tree.n, _leaf_alleles(tree, muts))


def allele_frequency_spectrum(tree: GenealogyTree, muts: MutationSet) -> np.ndarray:
    """``N_k`` for ``k = 1..n``, the ancestral-type block included."""
    return _allele_spectrum(tree.n, _leaf_alleles(tree, muts))[0]


def _allele_spectrum(n: int, alleles: np.ndarray) -> tuple[np.ndarray, int]:
    _, sizes = np.unique(alleles, return_counts=True)
    anc = int(np.sum(alleles == ANCESTRAL))
    return np.bincount(sizes, minlength=n + 1)[1:], anc


def mutations_with_mutated_descendant(tree: GenealogyTree, muts: MutationSet) -> int:
    """Marks that have another mark strictly closer to the leaves on some lineage below them."""
    if len(muts) == 0:
        return 0
    total = len(tree.size)
    own = np.bincount(muts.block, minlength=total)
    has_sub = (own > 0).tolist()
    below = [False] * total
    par = tree.parent.tolist()
    for b in range(total):
        p = par[b]
        if p >= 0 and has_sub[b]:
            has_sub[p] = True
            below[p] = True
    below_a = np.array(below)
    return int(own[below_a].sum() + np.maximum(own[~below_a] - 1, 0).sum())


def spectrum_counts(tree: GenealogyTree, muts: MutationSet) -> SpectrumCounts:
    alleles = _leaf_alleles(tree, muts)
    N_k, anc = _allele_spectrum(tree.n, alleles)
    M_k = site_frequency_spectrum(tree, muts)
    return SpectrumCounts(
        n=tree.n,
        M_k=M_k,
        N_k=N_k,
        M_total=len(muts),
        allelic_partition=Partition(tree.n, alleles),
        ancestral_size=anc,
        K=mutations_with_mutated_descendant(tree, muts),
    )


def ewens_probability(a, theta: float) -> float:
    """Probability of the allele multiplicities ``a = (a_1, ..., a_n)`` under Ewens' formula.

    ``n! / theta_(n) * prod_i theta^a_i / (i^a_i a_i!)`` with the rising
    factorial ``theta_(n) = theta (theta + 1) ... (theta + n - 1)``. Here theta
    is the population-scaled rate, i.e. twice the per-lineage rate of a
    coalescent with unit pair-coalescence rate.
    """
    a = [int(x) for x in a]
    if any(x < 0 for x in a):
        raise ValueError("multiplicities must be nonnegative")
    n = sum(i * x for i, x in enumerate(a, start=1))
    if n < 1:
        raise ValueError("multiplicities must describe a nonempty sample")
    if theta <= 0:
        raise ValueError("theta must be positive")
    log_p = math.lgamma(n + 1) - (math.lgamma(theta + n) - math.lgamma(theta))
    for i, x in enumerate(a, start=1):
        if x:
            log_p += x * math.log(theta) - x * math.log(i) - math.lgamma(x + 1)
    return math.exp(log_p)


def integer_partitions(n: int):
    """All multiplicity vectors ``(a_1..a_n)`` with ``sum i a_i = n``."""
    def parts(rest, largest):
        if rest == 0:
            yield []
            return
        for p in range(min(rest, largest), 0, -1):
            for tail in parts(rest - p, p):
                yield [p] + tail

    for p in parts(n, n):
        a = [0] * n
        for x in p:
            a[x - 1] += 1
        yield tuple(a)


def wrapped_spectrum(counts: SpectrumCounts) -> np.ndarray:
    """``M_k + M_(n-k)`` for ``k = 1..floor(n/2)``; the middle term is not doubled when n is even."""
    n = counts.n
    m = np.concatenate([[0], counts.M_k, [0]])  # m[k] = M_k, k = 0..n
    k = np.arange(1, n // 2 + 1)
    out = m[k] + m[n - k]
    if n % 2 == 0:
        out[-1] = m[n // 2]
    return out


def sample_family_size(counts: SpectrumCounts, rng) -> int | None:
    """Frequency of a uniformly chosen mutation, or ``None`` when there are none."""
    if counts.M_total == 0:
        return None
    gen = as_generator(rng)
    i = int(gen.integers(counts.M_total))
    return int(np.searchsorted(np.cumsum(counts.M_k), i, side="right")) + 1


def spectra_summary_json(counts: SpectrumCounts, alpha, theta: float, seeds, **extra) -> str:
    return json.dumps(counts.summary(alpha=alpha, theta=theta, seeds=list(seeds), **extra), indent=2)
