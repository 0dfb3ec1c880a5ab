"""Permit/block attention-bias matrices for both model variants and phases.

A bias is a boolean permit matrix: True means additive bias 0 (attention
allowed), False means -inf (blocked). Training biases cover either the
noisy sequence alone (L x L, diffusion phase) or the noisy sequence
concatenated with its clean target (2L x 2L, sequential phase). Sampling
biases are compacted: rows and columns exist only for positions that are
already decoded or scheduled to decode this step, listed in ascending
original-position order.

Rows whose outputs are never consumed (clean tokens of the noisy half in
sequential training) default to a patterned fill so that sorted views
stay block-structured; `fill_unconsumed=False` blocks them entirely.
Either way they cannot influence consumed outputs, because no consumed
row attends to their columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PreconditionError
from .orderings import Ordering, _check_partition


@dataclass(frozen=True)
class AttentionBias:
    """Boolean permit matrix with original-position labels per slot.

    For sequential-training biases the labels repeat across the two
    halves; `half` marks which half each slot belongs to. For compacted
    sampling biases `compact_index` maps original position -> slot.
    """

    permit: np.ndarray
    positions: tuple[int, ...]
    half: tuple[int, ...] | None = None
    compact_index: dict[int, int] | None = None
    consumed: tuple[bool, ...] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        p = np.asarray(self.permit, dtype=bool)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise PreconditionError(f"permit must be square, got {p.shape}")
        if p.shape[0] != len(self.positions):
            raise PreconditionError("one position label per slot is required")
        object.__setattr__(self, "permit", p)

    @property
    def side(self) -> int:
        return self.permit.shape[0]

    def additive(self, dtype=np.float32) -> np.ndarray:
        """Dense additive form: 0 where permitted, -inf where blocked."""
        out = np.zeros(self.permit.shape, dtype=dtype)
        out[~self.permit] = -np.inf
        return out

    def row_permits(self, i: int) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.permit[i]))


def _clean_flags(clean: Sequence[int], mask: Sequence[int], n: int) -> np.ndarray:
    _check_partition(clean, mask, n)
    flags = np.zeros(n, dtype=bool)
    flags[list(clean)] = True
    return flags


def _require_clean_first(sigma: Ordering, clean: Sequence[int]) -> None:
    if not sigma.is_clean_first(clean):
        raise PreconditionError("ordering must rank every clean position before every mask position")


def bias_a_diffusion_train(
    clean: Sequence[int], mask: Sequence[int], sigma: Ordering
) -> AttentionBias:
    """Diffusion-phase training bias for variant A.

    Clean tokens attend bidirectionally among themselves; a mask token
    attends to everything at or below its own rank (all clean tokens,
    itself, and prior mask tokens in the ordering).
    """
    L = len(sigma)
    is_clean = _clean_flags(clean, mask, L)
    _require_clean_first(sigma, clean)
    rank = np.asarray(sigma.inv)
    permit = (is_clean[:, None] & is_clean[None, :]) | (
        ~is_clean[:, None] & (rank[:, None] >= rank[None, :])
    )
    return AttentionBias(permit, tuple(range(L)))


def bias_b_diffusion_train(sigma: Ordering) -> AttentionBias:
    """Diffusion-phase training bias for variant B: causal in the ordering."""
    rank = np.asarray(sigma.inv)
    permit = rank[:, None] >= rank[None, :]
    return AttentionBias(permit, tuple(range(len(sigma))))


def _sequential_train(
    clean: Sequence[int],
    mask: Sequence[int],
    clean_clean: np.ndarray,
    fill_rows: np.ndarray | None,
) -> AttentionBias:
    L = clean_clean.shape[0]
    is_clean = _clean_flags(clean, mask, L)
    is_mask = ~is_clean
    ii = np.arange(L)
    permit = np.zeros((2 * L, 2 * L), dtype=bool)

    # Noisy-half mask rows: self, every clean target token, and the clean
    # versions of strictly earlier mask tokens.
    permit[:L, :L][np.diag_indices(L)] = is_mask
    permit[:L, L:] |= is_mask[:, None] & is_clean[None, :]
    permit[:L, L:] |= is_mask[:, None] & is_mask[None, :] & (ii[:, None] > ii[None, :])

    # Target-half rows.
    permit[L:, L:] |= clean_clean
    permit[L:, L:] |= is_mask[:, None] & is_clean[None, :]
    permit[L:, L:] |= is_mask[:, None] & is_mask[None, :] & (ii[:, None] >= ii[None, :])

    consumed = np.ones(2 * L, dtype=bool)
    consumed[:L] = is_mask
    if fill_rows is not None:
        permit[:L, :L][np.diag_indices(L)] |= is_clean
        permit[:L, L:] |= is_clean[:, None] & fill_rows
    positions = tuple(range(L)) * 2
    half = (0,) * L + (1,) * L
    return AttentionBias(permit, positions, half=half, consumed=tuple(consumed.tolist()))


def bias_a_sequential_train(
    clean: Sequence[int], mask: Sequence[int], fill_unconsumed: bool = True
) -> AttentionBias:
    """Sequential-phase training bias for variant A over the concatenated input.

    Target-half clean tokens attend bidirectionally among themselves; the
    unconsumed noisy-half clean rows are filled with self plus all clean
    target columns.
    """
    L = len(clean) + len(mask)
    is_clean = _clean_flags(clean, mask, L)
    clean_clean = is_clean[:, None] & is_clean[None, :]
    fill = clean_clean if fill_unconsumed else None
    return _sequential_train(clean, mask, clean_clean, fill)


def bias_b_sequential_train(
    clean: Sequence[int],
    mask: Sequence[int],
    sigma: Ordering,
    fill_unconsumed: bool = True,
) -> AttentionBias:
    """Sequential-phase training bias for variant B.

    Same as variant A except clean target tokens attend causally in the
    ordering, which must rank clean before mask positions and keep mask
    positions in natural order.
    """
    L = len(sigma)
    is_clean = _clean_flags(clean, mask, L)
    _require_clean_first(sigma, clean)
    if not sigma.is_masks_natural(mask):
        raise PreconditionError("ordering must keep mask positions in ascending order")
    rank = np.asarray(sigma.inv)
    causal = rank[:, None] >= rank[None, :]
    clean_clean = is_clean[:, None] & is_clean[None, :] & causal
    fill = clean_clean if fill_unconsumed else None
    return _sequential_train(clean, mask, clean_clean, fill)


def _sampling_bias(
    d_mdm: Sequence[int],
    d_ar: Sequence[int],
    s_k: Sequence[int],
    sigma: Ordering,
    mdm_causal: bool,
) -> AttentionBias:
    sets = [set(d_mdm), set(d_ar), set(s_k)]
    if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
        raise PreconditionError("decoded and scheduled index sets must be pairwise disjoint")
    active = sorted(sets[0] | sets[1] | sets[2])
    if active and (active[0] < 0 or active[-1] >= len(sigma)):
        raise PreconditionError("indices outside the ordering's range")
    n = len(active)
    in_mdm = np.array([p in sets[0] for p in active], dtype=bool)
    in_ar = np.array([p in sets[1] for p in active], dtype=bool)
    in_new = np.array([p in sets[2] for p in active], dtype=bool)
    rank = np.array([sigma.inv[p] for p in active], dtype=np.int64)
    pos = np.array(active, dtype=np.int64)

    permit = np.zeros((n, n), dtype=bool)
    causal = rank[:, None] >= rank[None, :]
    if mdm_causal:
        permit |= in_mdm[:, None] & in_mdm[None, :] & causal
    else:
        permit |= in_mdm[:, None] & in_mdm[None, :]
    permit |= in_ar[:, None] & in_mdm[None, :]
    permit |= in_ar[:, None] & in_ar[None, :] & (pos[:, None] >= pos[None, :])
    decoded = in_mdm | in_ar
    permit |= in_new[:, None] & decoded[None, :]
    permit |= in_new[:, None] & in_new[None, :] & causal
    return AttentionBias(
        permit,
        tuple(active),
        compact_index={p: i for i, p in enumerate(active)},
    )


def bias_a_sampling(
    d_mdm: Sequence[int], d_ar: Sequence[int], s_k: Sequence[int], sigma: Ordering
) -> AttentionBias:
    """Step bias for variant A sampling over the compacted active positions.

    Diffusion-decoded tokens attend bidirectionally among themselves;
    sequentially decoded tokens attend the diffusion set plus earlier
    sequential tokens; tokens being denoised attend everything decoded
    plus earlier same-step tokens in the ordering.
    """
    return _sampling_bias(d_mdm, d_ar, s_k, sigma, mdm_causal=False)


def bias_b_sampling(
    d_mdm: Sequence[int], d_ar: Sequence[int], s_k: Sequence[int], sigma: Ordering
) -> AttentionBias:
    """Variant B step bias: like variant A but causal within the diffusion set."""
    return _sampling_bias(d_mdm, d_ar, s_k, sigma, mdm_causal=True)


def sorted_view(
    bias: AttentionBias, sigma: Ordering, block_structure: str = "none"
) -> AttentionBias:
    """Rows and columns permuted by the ordering; per L x L block when quad.

    The sorted variant-B diffusion bias is exactly lower-triangular; the
    sorted variant-A diffusion bias is a prefix-LM pattern.
    """
    perm = np.asarray(sigma.perm)
    if block_structure == "none":
        if bias.side != len(sigma):
            raise PreconditionError(f"bias side {bias.side} does not match ordering of {len(sigma)}")
        permit = bias.permit[np.ix_(perm, perm)]
        positions = tuple(bias.positions[i] for i in perm)
        return AttentionBias(permit, positions, half=bias.half)
    if block_structure == "quad":
        if bias.side != 2 * len(sigma):
            raise PreconditionError(
                f"quad sort needs side 2L = {2 * len(sigma)}, got {bias.side}"
            )
        L = len(sigma)
        full = np.concatenate([perm, perm + L])
        permit = bias.permit[np.ix_(full, full)]
        positions = tuple(bias.positions[i] for i in full)
        half = None if bias.half is None else tuple(bias.half[i] for i in full)
        return AttentionBias(permit, positions, half=half)
    raise PreconditionError(f"unknown block_structure {block_structure!r}")


@dataclass(frozen=True)
class BiasCase:
    """Names one builder plus its inputs, for the verification oracle."""

    builder: str
    clean: tuple[int, ...] = ()
    mask: tuple[int, ...] = ()
    sigma: Ordering | None = None
    d_mdm: tuple[int, ...] = ()
    d_ar: tuple[int, ...] = ()
    s_k: tuple[int, ...] = ()
    fill_unconsumed: bool = True

    def build(self) -> AttentionBias:
        if self.builder == "a_diffusion_train":
            return bias_a_diffusion_train(self.clean, self.mask, self.sigma)
        if self.builder == "b_diffusion_train":
            return bias_b_diffusion_train(self.sigma)
        if self.builder == "a_sequential_train":
            return bias_a_sequential_train(self.clean, self.mask, self.fill_unconsumed)
        if self.builder == "b_sequential_train":
            return bias_b_sequential_train(self.clean, self.mask, self.sigma, self.fill_unconsumed)
        if self.builder == "a_sampling":
            return bias_a_sampling(self.d_mdm, self.d_ar, self.s_k, self.sigma)
        if self.builder == "b_sampling":
            return bias_b_sampling(self.d_mdm, self.d_ar, self.s_k, self.sigma)
        raise PreconditionError(f"unknown builder {self.builder!r}")


def _oracle_entry(case: BiasCase, i: int, j: int) -> bool:
    """Literal per-entry evaluation of the permit conditions.

    Deliberately scalar and case-by-case, independent of the vectorized
    builders, so the two implementations can cross-check each other.
    """
    clean = set(case.clean)
    mask = set(case.mask)
    b = case.builder

    if b == "a_diffusion_train":
        rank = case.sigma.inv
        if i in clean and j in clean:
            return True
        if i in mask and rank[i] >= rank[j]:
            return True
        return False

    if b == "b_diffusion_train":
        rank = case.sigma.inv
        return rank[i] >= rank[j]

    if b in ("a_sequential_train", "b_sequential_train"):
        L = len(clean) + len(mask)
        row_first, col_first = i < L, j < L
        ip, jp = i % L, j % L
        if row_first and ip in mask:
            if col_first:
                return ip == jp
            if jp in clean:
                return True
            return jp in mask and ip > jp
        if row_first and ip in clean:
            if not case.fill_unconsumed:
                return False
            if col_first:
                return ip == jp
            if b == "a_sequential_train":
                return jp in clean
            return jp in clean and case.sigma.inv[ip] >= case.sigma.inv[jp]
        if not row_first and ip in clean:
            if col_first:
                return False
            if b == "a_sequential_train":
                return jp in clean
            return jp in clean and case.sigma.inv[ip] >= case.sigma.inv[jp]
        if not row_first and ip in mask:
            if col_first:
                return False
            if jp in clean:
                return True
            return jp in mask and ip >= jp
        return False

    if b in ("a_sampling", "b_sampling"):
        active = sorted(set(case.d_mdm) | set(case.d_ar) | set(case.s_k))
        pi, pj = active[i], active[j]
        d_mdm, d_ar, s_k = set(case.d_mdm), set(case.d_ar), set(case.s_k)
        rank = case.sigma.inv
        if pi in d_mdm and pj in d_mdm:
            return rank[pi] >= rank[pj] if b == "b_sampling" else True
        if pi in d_ar and pj in d_mdm:
            return True
        if pi in d_ar and pj in d_ar:
            return pi >= pj
        if pi in s_k and (pj in d_mdm or pj in d_ar):
            return True
        if pi in s_k and pj in s_k:
            return rank[pi] >= rank[pj]
        return False

    raise PreconditionError(f"unknown builder {b!r}")


def oracle_verify(bias: AttentionBias, case: BiasCase) -> tuple[bool, list[tuple[int, int, bool, bool]]]:
    """Re-derive every entry from the case conditions and compare.

    Returns (ok, mismatches) where each mismatch is (row, col, expected,
    got).
    """
    mismatches = []
    n = bias.side
    for i in range(n):
        row = bias.permit[i]
        for j in range(n):
            expected = _oracle_entry(case, i, j)
            got = bool(row[j])
            if expected != got:
                mismatches.append((i, j, expected, got))
    return not mismatches, mismatches


def render(bias: AttentionBias, sigma: Ordering | None = None) -> str:
    """Stable text grid: '#' permits, '.' blocks, rows labeled 1-based.

    Sequential-training slots are labeled z<pos> for the noisy half and
    x<pos> for the clean half.
    """
    if bias.half is not None:
        labels = [
            ("z" if h == 0 else "x") + str(p + 1)
            for h, p in zip(bias.half, bias.positions)
        ]
    else:
        labels = [str(p + 1) for p in bias.positions]
    width = max(len(lab) for lab in labels)
    lines = []
    if sigma is not None:
        lines.append(f"sigma: {sigma.one_based()}")
    lines.append(" " * (width + 2) + " ".join(lab.rjust(width) for lab in labels))
    for i, lab in enumerate(labels):
        cells = " ".join(("#" if v else ".").rjust(width) for v in bias.permit[i])
        lines.append(f"{lab.rjust(width)}  {cells}")
    return "\n".join(lines) + "\n"
