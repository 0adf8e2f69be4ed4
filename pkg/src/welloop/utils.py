"""Small shared helpers: seeded RNG derivation, fold assignment, formatting."""

from __future__ import annotations

import numpy as np


def subseed_rng(seed: int, *tags: int) -> np.random.Generator:
    """Derive an independent generator from a base seed and integer tags.

    Every stochastic stage draws from its own stream so that stages stay
    reproducible independently of each other.
    """
    entropy = [int(seed)] + [int(t) for t in tags]
    if any(e < 0 for e in entropy):
        raise ValueError("seeds and tags must be non-negative")
    return np.random.default_rng(entropy)


def mix_seed(seed: int, *tags: int) -> int:
    """Collapse (seed, tags) into a single non-negative integer seed."""
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return int(ss.generate_state(1)[0])


def kfold_assignments(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Assign each of n rows to one of k folds.

    Rows are shuffled once, then cut into contiguous blocks; the first
    n % k folds receive one extra row. Returns the fold id per row.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    order = rng.permutation(n)
    sizes = np.full(k, n // k, dtype=int)
    sizes[: n % k] += 1
    fold = np.empty(n, dtype=int)
    start = 0
    for j, size in enumerate(sizes):
        fold[order[start : start + size]] = j
        start += size
    return fold


def fmt(x: float) -> str:
    """Shortest round-trip decimal form of a float, for CSV cells."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
