"""Shared test utilities."""

import numpy as np

from hybridlm.orderings import Ordering


def grid(rows: list[str]) -> np.ndarray:
    """Parse '#'/'.' row strings (whitespace ignored) into a bool matrix."""
    parsed = [[c == "#" for c in row.replace(" ", "")] for row in rows]
    out = np.array(parsed, dtype=bool)
    assert out.shape[0] == out.shape[1], "golden grid must be square"
    return out


def ordering_1based(perm: tuple[int, ...]) -> Ordering:
    return Ordering(tuple(i - 1 for i in perm))


def random_partition(rng, L):
    flags = rng.uniform(size=L) < rng.uniform()
    clean = tuple(int(i) for i in np.flatnonzero(flags))
    mask = tuple(int(i) for i in np.flatnonzero(~flags))
    return clean, mask
