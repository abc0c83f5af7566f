"""Seedable counter-based random streams with labeled splitting."""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int | None = None, label: str | None = None) -> np.random.Generator:
    """Philox generator for ``seed``; a ``label`` selects an independent sub-stream.

    The same ``(seed, label)`` pair always yields the same stream, so one seed
    reproduces every stochastic step of an experiment.
    """
    entropy = [] if seed is None else [int(seed)]
    if label is not None:
        entropy.append(zlib.crc32(label.encode()))
    ss = np.random.SeedSequence(entropy or None)
    return np.random.Generator(np.random.Philox(ss))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators spawned from ``rng``."""
    return list(rng.spawn(n))
