"""Forward masking process, reverse posterior, and sequence operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError


@dataclass(frozen=True)
class Vocab:
    """Token-id space with the two special ids.

    The mask id is by convention the largest id so the embedding table
    layout stays predictable.
    """

    size: int
    mask_id: int
    separator_id: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise PreconditionError(f"vocab needs at least 2 ids, got {self.size}")
        if not 0 <= self.mask_id < self.size:
            raise PreconditionError(f"mask_id {self.mask_id} outside vocab of {self.size}")
        if self.mask_id == self.separator_id:
            raise PreconditionError("mask_id and separator_id must differ")

    @classmethod
    def with_specials(cls, n_regular: int) -> "Vocab":
        """Vocab of n_regular ordinary ids plus separator and mask at the top."""
        return cls(size=n_regular + 2, mask_id=n_regular + 1, separator_id=n_regular)


@dataclass(frozen=True)
class MaskedSequence:
    """Token ids of a latent sequence; mask/clean index sets are derived."""

    tokens: tuple[int, ...]
    vocab: Vocab

    def __len__(self) -> int:
        return len(self.tokens)

    def mask_indices(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t == self.vocab.mask_id)

    def clean_indices(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t != self.vocab.mask_id)


def forward_mask(
    x: np.ndarray | tuple[int, ...],
    vocab: Vocab,
    alpha: float,
    rng: np.random.Generator,
) -> MaskedSequence:
    """Mask each position of the clean sequence independently with probability 1 - alpha."""
    x = np.asarray(x, dtype=np.int64)
    if np.any(x == vocab.mask_id):
        raise PreconditionError("clean input must not contain the mask id")
    if not 0.0 <= alpha <= 1.0:
        raise PreconditionError(f"alpha must lie in [0, 1], got {alpha}")
    keep = rng.uniform(size=x.shape) < alpha
    z = np.where(keep, x, vocab.mask_id)
    return MaskedSequence(tuple(int(t) for t in z), vocab)


def reverse_posterior(
    z_t_token: int,
    x_token: int,
    alpha_s: float,
    alpha_t: float,
    vocab: Vocab,
) -> np.ndarray:
    """Posterior over the less-noisy token given its noisy version and the clean token.

    Clean tokens are carried over as a point mass; a mask token either
    reveals the clean token, with probability (alpha_s - alpha_t) /
    (1 - alpha_t), or stays masked.
    """
    if alpha_s <= alpha_t:
        raise PreconditionError(f"need alpha_s > alpha_t, got {alpha_s} <= {alpha_t}")
    probs = np.zeros(vocab.size, dtype=np.float64)
    if z_t_token != vocab.mask_id:
        probs[z_t_token] = 1.0
        return probs
    reveal = (alpha_s - alpha_t) / (1.0 - alpha_t)
    probs[x_token] = reveal
    probs[vocab.mask_id] += 1.0 - reveal
    return probs


def substitute(z: MaskedSequence, x_prefix: tuple[int, ...] | np.ndarray) -> MaskedSequence:
    """Replace the first len(x_prefix) positions of z with the given clean tokens."""
    x_prefix = tuple(int(t) for t in np.asarray(x_prefix, dtype=np.int64))
    if len(x_prefix) > len(z):
        raise PreconditionError(f"prefix of {len(x_prefix)} exceeds sequence of {len(z)}")
    return MaskedSequence(x_prefix + z.tokens[len(x_prefix):], z.vocab)


def concat(
    z: MaskedSequence, x: tuple[int, ...] | np.ndarray
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Concatenate z with its clean target, duplicating the position labels.

    Both halves carry the positions they would have on their own, so the
    element at slot L + k is labeled k.
    """
    x = tuple(int(t) for t in np.asarray(x, dtype=np.int64))
    if len(x) != len(z):
        raise PreconditionError(f"length mismatch: {len(z)} vs {len(x)}")
    positions = tuple(range(len(z))) * 2
    return z.tokens + x, positions
