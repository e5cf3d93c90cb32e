"""Reproducible random streams keyed by ``(seed, stream_id)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    Two streams with the same ``(seed, stream_id)`` produce identical draws;
    different stream ids are statistically independent (``SeedSequence``
    spawn keys).
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "RngStream":
        # keeps the seed, so a child of stream 0 is the same as RngStream(seed, id)
        return RngStream(self.seed, stream_id)


def as_generator(rng) -> np.random.Generator:
    """Accept an ``RngStream``, a ``Generator`` or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot make a random generator from {type(rng).__name__}")


class UniformBuffer:
    """Hands out uniforms one at a time from pre-drawn blocks.

    Pure Python loops that need a handful of uniforms per step are dominated by
    per-call overhead of ``Generator.random()``; drawing 4096 at a time removes it.
    """

    __slots__ = ("_gen", "_buf", "_pos", "_size")

    def __init__(self, gen: np.random.Generator, size: int = 4096):
        self._gen = gen
        self._size = size
        self._buf = gen.random(size).tolist()
        self._pos = 0

    def __call__(self) -> float:
        if self._pos == self._size:
            self._buf = self._gen.random(self._size).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def positive(self) -> float:
        """A uniform in (0, 1), safe to take logs of."""
        u = self()
        while u == 0.0:
            u = self()
        return u
