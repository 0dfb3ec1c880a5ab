"""Denoising schedules and two-phase generation.

A schedule is an ordered partition of the positions: first the parallel
steps (one tuple of positions revealed per forward pass, in random
order), then singleton left-to-right steps for the remainder. Step
counts come from a chain of binomial draws whose telescoped total is
Binomial(L, alpha0), so alpha0 is the expected fraction of positions
revealed in parallel.

Generation walks the schedule, running the network only over decoded
positions plus the positions scheduled this step. Variant B attends
causally everywhere, so keys and values of a token decoded at step k are
computed once at step k+1 and served from the cache from step k+2 on;
variant A caches during the sequential phase only. The no-cache
executor recomputes the active set every step and is the correctness
reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention_bias import AttentionBias, bias_a_sampling, bias_b_sampling
from .denoiser import Denoiser, KVCache
from .errors import PreconditionError
from .orderings import Ordering
from .schedule import NoiseSchedule
from .masking import Vocab


@dataclass(frozen=True)
class DenoisingSchedule:
    """Ordered partition of positions into per-step reveal tuples."""

    steps: tuple[tuple[int, ...], ...]
    n_mdm_steps: int

    def __post_init__(self) -> None:
        flat = [p for step in self.steps for p in step]
        L = len(flat)
        if sorted(flat) != list(range(L)):
            raise PreconditionError("steps must partition the positions exactly once")
        if not 0 <= self.n_mdm_steps <= len(self.steps):
            raise PreconditionError("parallel-step count out of range")
        for step in self.steps[: self.n_mdm_steps]:
            if not step:
                raise PreconditionError("parallel steps must be non-empty")
        tail = self.steps[self.n_mdm_steps :]
        if any(len(step) != 1 for step in tail):
            raise PreconditionError("sequential steps must be singletons")
        singles = [step[0] for step in tail]
        if singles != sorted(singles):
            raise PreconditionError("sequential steps must ascend")

    @property
    def L(self) -> int:
        return sum(len(step) for step in self.steps)

    @property
    def n_mdm(self) -> int:
        return sum(len(step) for step in self.steps[: self.n_mdm_steps])

    @property
    def n_ar(self) -> int:
        return self.L - self.n_mdm

    @property
    def nfe(self) -> int:
        return len(self.steps)

    @property
    def sigma(self) -> Ordering:
        """Global denoising order: the concatenation of the step tuples."""
        return Ordering(tuple(p for step in self.steps for p in step))


def assemble_schedule(
    L: int, counts: list[int], diffusion_indices: list[int]
) -> DenoisingSchedule:
    """Partition the permuted parallel positions by the per-step counts.

    The complement of `diffusion_indices` becomes the ascending singleton
    tail.
    """
    if sum(counts) != len(diffusion_indices):
        raise PreconditionError("counts must sum to the number of parallel positions")
    if any(c <= 0 for c in counts):
        raise PreconditionError("zero-count steps are dropped before assembly")
    steps = []
    at = 0
    for c in counts:
        steps.append(tuple(int(p) for p in diffusion_indices[at : at + c]))
        at += c
    rest = sorted(set(range(L)) - set(diffusion_indices))
    steps.extend((p,) for p in rest)
    return DenoisingSchedule(tuple(steps), n_mdm_steps=len(counts))


def draw_reveal_counts(
    L: int, T: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> list[int]:
    """Per-step reveal counts, zeros included, walking t = 1 down to 1/T.

    Each step draws Binomial(remaining, (alpha_s - alpha_t)/(1 - alpha_t))
    with s one step earlier; the telescoped total is Binomial(L, alpha0).
    """
    if T < 1 or L < 1:
        raise PreconditionError("need T >= 1 and L >= 1")
    remaining = L
    counts = []
    for k in range(T):
        t = (T - k) / T
        s = (T - k - 1) / T
        p = (schedule.alpha(s) - schedule.alpha(t)) / (1.0 - schedule.alpha(t))
        n = int(rng.binomial(remaining, min(max(p, 0.0), 1.0))) if remaining else 0
        counts.append(n)
        remaining -= n
    return counts


def build_schedule(
    L: int, T: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> DenoisingSchedule:
    """First-hitting schedule: binomial reveal counts, random parallel positions."""
    counts = [c for c in draw_reveal_counts(L, T, schedule, rng) if c > 0]
    n_mdm = sum(counts)
    diffusion = rng.permutation(L)[:n_mdm].tolist()
    return assemble_schedule(L, counts, diffusion)


@dataclass
class GenerationStats:
    nfe: int = 0
    query_tokens_total: int = 0
    attention_pairs_total: int = 0
    cache_hits: int = 0
    wall_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "nfe": self.nfe,
            "query_tokens_total": self.query_tokens_total,
            "attention_pairs_total": self.attention_pairs_total,
            "cache_hits": self.cache_hits,
            "wall_seconds": self.wall_seconds,
        }


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest top-probability set with mass >= p, renormalized.

    Ties break toward lower token ids; p >= 1 leaves the distribution
    untouched.
    """
    if p <= 0.0:
        raise PreconditionError(f"nucleus mass must be positive, got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return probs
    order = np.lexsort((np.arange(len(probs)), -probs))
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, p, side="left"))
    keep = order[: min(cut + 1, len(probs))]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def _sample_token(
    logits_row: torch.Tensor,
    vocab: Vocab,
    rng: np.random.Generator,
    temperature: float,
    nucleus_p: float | None,
) -> int:
    """Categorical draw with the mask id excluded; temperature 0 is greedy argmax."""
    logits = logits_row.detach().to(torch.float64).numpy().copy()
    logits[vocab.mask_id] = -np.inf
    if temperature == 0.0:
        return int(np.argmax(logits))
    logits = logits / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    if nucleus_p is not None:
        probs = nucleus_filter(probs, nucleus_p)
    u = rng.uniform()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(max=len(probs) - 1))


def _row_pair_count(bias: AttentionBias, positions) -> int:
    rows = [bias.compact_index[p] for p in positions]
    return int(bias.permit[rows].sum())


class StepTrace:
    """Optional per-step record of the logits used for sampling."""

    def __init__(self) -> None:
        self.logits: list[np.ndarray] = []

    def add(self, step_logits: torch.Tensor) -> None:
        self.logits.append(step_logits.detach().to(torch.float64).numpy().copy())


def generate(
    model: Denoiser,
    schedule: DenoisingSchedule,
    variant: str,
    rng: np.random.Generator,
    nucleus_p: float | None = None,
    temperature: float = 1.0,
    use_cache: bool = True,
    deterministic: bool = False,
    trace: StepTrace | None = None,
) -> tuple[np.ndarray, GenerationStats]:
    """Run the two-phase sampler; returns the mask-free sequence and counters.

    Variant A runs the parallel phase uncached (decoded tokens attend
    bidirectionally, so their keys change between steps) and caches the
    sequential phase. Variant B caches both phases: tokens revealed at
    step k join the forward pass at step k+1 to build their cache entries
    and are served from the cache afterwards. `use_cache=False` selects
    the reference executor that recomputes every active position.
    """
    if variant not in ("a", "b"):
        raise PreconditionError(f"variant must be 'a' or 'b', got {variant!r}")
    L = schedule.L
    if L > model.config.max_positions:
        raise PreconditionError("schedule longer than the model's max positions")
    vocab = model.config.vocab
    sigma = schedule.sigma
    builder = bias_a_sampling if variant == "a" else bias_b_sampling
    tokens = np.full(L, vocab.mask_id, dtype=np.int64)
    stats = GenerationStats(nfe=schedule.nfe)
    d_mdm: list[int] = []
    d_ar: list[int] = []
    cache = KVCache(model.config, dtype=model.dtype) if use_cache else None
    pending_cache: tuple[int, ...] = ()
    start = time.perf_counter()

    with torch.no_grad():
        for k, step in enumerate(schedule.steps):
            in_parallel_phase = k < schedule.n_mdm_steps
            bias = builder(tuple(d_mdm), tuple(d_ar), step, sigma)
            cache_this_step = use_cache and (variant == "b" or not in_parallel_phase)

            if not cache_this_step:
                active = list(bias.positions)
                logits = model.forward(
                    tokens[active], np.array(active), bias, deterministic=deterministic
                )
                step_rows = {p: logits[active.index(p)] for p in step}
                stats.query_tokens_total += len(active)
                stats.attention_pairs_total += int(bias.permit.sum())
                pending_cache = ()
            else:
                assert cache is not None
                new_positions = [p for p in pending_cache] + list(step)
                uncached_context = [
                    p for p in bias.positions
                    if p not in cache.occupancy and p not in new_positions
                ]
                # First cached step of variant A: fold the whole decoded
                # prefix into this pass to seed the cache.
                new_positions = uncached_context + new_positions
                last = k == len(schedule.steps) - 1
                store = () if last else tuple(p for p in new_positions if p not in step)
                stats.cache_hits += _cache_hit_count(bias, new_positions, cache.occupancy)
                logits = model.forward_cached(
                    tokens[new_positions],
                    new_positions,
                    bias,
                    cache,
                    store=store,
                    deterministic=deterministic,
                )
                step_rows = {p: logits[new_positions.index(p)] for p in step}
                stats.query_tokens_total += len(new_positions)
                stats.attention_pairs_total += _row_pair_count(bias, new_positions)
                pending_cache = step

            if trace is not None:
                trace.add(torch.stack([step_rows[p] for p in step]))
            for p in step:
                tokens[p] = _sample_token(step_rows[p], vocab, rng, temperature, nucleus_p)
            (d_mdm if in_parallel_phase else d_ar).extend(step)

    stats.wall_seconds = time.perf_counter() - start
    assert not np.any(tokens == vocab.mask_id)
    return tokens, stats


def _cache_hit_count(bias: AttentionBias, new_positions, occupancy) -> int:
    if not occupancy:
        return 0
    rows = [bias.compact_index[p] for p in new_positions]
    cached_cols = np.isin(np.asarray(bias.positions), np.fromiter(occupancy, dtype=np.int64))
    return int(bias.permit[rows][:, cached_cols].sum())


def generate_full_pass(
    model: Denoiser,
    schedule: DenoisingSchedule,
    rng: np.random.Generator,
    nucleus_p: float | None = None,
    temperature: float = 1.0,
) -> tuple[np.ndarray, GenerationStats]:
    """Baseline executor: full-length bidirectional forward at every step.

    Mirrors masked-diffusion samplers without subset passes or caching;
    used by the cost harness as the expensive reference.
    """
    L = schedule.L
    vocab = model.config.vocab
    tokens = np.full(L, vocab.mask_id, dtype=np.int64)
    permit = AttentionBias(np.ones((L, L), dtype=bool), tuple(range(L)))
    stats = GenerationStats(nfe=schedule.nfe)
    start = time.perf_counter()
    with torch.no_grad():
        for step in schedule.steps:
            logits = model.forward(tokens, np.arange(L), permit)
            stats.query_tokens_total += L
            stats.attention_pairs_total += L * L
            for p in step:
                tokens[p] = _sample_token(logits[p], vocab, rng, temperature, nucleus_p)
    stats.wall_seconds = time.perf_counter() - start
    return tokens, stats
