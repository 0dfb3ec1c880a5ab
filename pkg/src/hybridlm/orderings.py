"""Constrained permutations that define denoising order and attention causality.

Positions are stored 0-based throughout the package; anything printed for
humans (CLI dumps, rendered grids) is converted to 1-based labels at the
edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, TypeVar

import numpy as np

from .errors import PreconditionError

T = TypeVar("T")


@dataclass(frozen=True)
class Ordering:
    """A permutation of positions 0..L-1 together with its inverse.

    ``perm[k]`` is the position denoised k-th; ``inv[i]`` is the rank of
    position i (inv[perm[k]] = k for every k).
    """

    perm: tuple[int, ...]
    inv: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.perm)
        inv = [-1] * n
        for k, i in enumerate(self.perm):
            if not 0 <= i < n or inv[i] != -1:
                raise PreconditionError(f"not a permutation of 0..{n - 1}: {self.perm}")
            inv[i] = k
        object.__setattr__(self, "perm", tuple(int(i) for i in self.perm))
        object.__setattr__(self, "inv", tuple(inv))

    def __len__(self) -> int:
        return len(self.perm)

    def rank(self, position: int) -> int:
        return self.inv[position]

    def inverse(self) -> "Ordering":
        return Ordering(self.inv)

    @classmethod
    def identity(cls, n: int) -> "Ordering":
        return cls(tuple(range(n)))

    def is_clean_first(self, clean: Iterable[int]) -> bool:
        """True if every clean position outranks no mask position."""
        clean = set(clean)
        ranks = [self.inv[i] for i in clean]
        return not ranks or max(ranks) == len(ranks) - 1

    def is_masks_natural(self, mask: Iterable[int]) -> bool:
        """True if mask positions appear in ascending order within perm."""
        seq = [i for i in self.perm if i in set(mask)]
        return seq == sorted(seq)

    def one_based(self) -> tuple[int, ...]:
        return tuple(i + 1 for i in self.perm)


def _check_partition(clean: Sequence[int], mask: Sequence[int], n: int) -> None:
    cs, ms = set(clean), set(mask)
    if cs & ms or cs | ms != set(range(n)):
        raise PreconditionError(
            f"clean {sorted(cs)} and mask {sorted(ms)} must partition 0..{n - 1}"
        )


def sample_diffusion_ordering(
    clean: Sequence[int], mask: Sequence[int], rng: np.random.Generator
) -> Ordering:
    """Uniform ordering with all clean positions ranked before all mask positions.

    Both subsets are shuffled independently so the result is uniform over
    the clean-first orderings.
    """
    _check_partition(clean, mask, len(clean) + len(mask))
    c = np.array(sorted(clean), dtype=np.int64)
    m = np.array(sorted(mask), dtype=np.int64)
    rng.shuffle(c)
    rng.shuffle(m)
    return Ordering(tuple(np.concatenate([c, m]).tolist()))


def sample_sequential_ordering(
    clean: Sequence[int], mask: Sequence[int], rng: np.random.Generator
) -> Ordering:
    """Clean-first ordering whose mask positions stay in ascending order."""
    _check_partition(clean, mask, len(clean) + len(mask))
    c = np.array(sorted(clean), dtype=np.int64)
    rng.shuffle(c)
    return Ordering(tuple(c.tolist()) + tuple(sorted(mask)))


def invert(ordering: Ordering) -> tuple[int, ...]:
    """Rank sequence of the ordering: invert(o)[i] is the rank of position i."""
    return ordering.inv


def sort_by(seq: Sequence[T], ordering: Ordering) -> list[T]:
    """Reorder seq so the item at position perm[k] lands in slot k."""
    if len(seq) != len(ordering):
        raise PreconditionError(f"length mismatch: {len(seq)} vs {len(ordering)}")
    return [seq[i] for i in ordering.perm]


def unsort_by(seq: Sequence[T], ordering: Ordering) -> list[T]:
    """Exact inverse of sort_by with the same ordering."""
    if len(seq) != len(ordering):
        raise PreconditionError(f"length mismatch: {len(seq)} vs {len(ordering)}")
    out: list[T] = [None] * len(seq)  # type: ignore[list-item]
    for k, i in enumerate(ordering.perm):
        out[i] = seq[k]
    return out
