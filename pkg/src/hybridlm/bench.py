"""Analytic and measured cost accounting for the three execution modes.

Costs are counted at the bias level: a query token is one row computed
in one forward pass, and an attention pair is one permitted (row, key)
entry of that pass. Both are exact integers derivable from the schedule
alone; the executors maintain matching counters, so measurement equals
prediction entry for entry.

Modes:
  full_pass   - full-length bidirectional forward every step
  active_set  - variant A executor over decoded-plus-scheduled rows, no cache
  cached      - variant B executor with the unified KV cache
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import Denoiser
from .errors import PreconditionError
from .sampler import DenoisingSchedule, GenerationStats, generate, generate_full_pass

MODES = ("full_pass", "active_set", "cached")


@dataclass(frozen=True)
class CostModel:
    mode: str
    L: int
    schedule: DenoisingSchedule

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PreconditionError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule.L != self.L:
            raise PreconditionError("schedule length does not match L")


def predict_costs(cm: CostModel) -> dict[str, int]:
    """Exact query-token and attention-pair totals for one generation.

    Closed-form counts over the schedule; the executors' instrumented
    counters must match these entry for entry. A step's bias permits, by
    row kind: a diffusion-decoded row sees the whole diffusion set
    (variant A) or its causal prefix (variant B); a sequentially decoded
    row sees the diffusion set plus its own left context; a row being
    denoised sees everything decoded plus its same-step prefix.
    """
    sched = cm.schedule
    L = cm.L
    if cm.mode == "full_pass":
        return {"query_tokens": sched.nfe * L, "attention_pairs": sched.nfe * L * L}

    queries = 0
    pairs = 0
    hits = 0
    n_mdm = 0  # diffusion-decoded so far
    n_ar = 0  # sequentially decoded so far
    prev_len = 0
    prev_parallel = True
    prev_start_mdm = 0  # diffusion count before the previous step
    for k, step in enumerate(sched.steps):
        parallel = k < sched.n_mdm_steps
        decoded = n_mdm + n_ar
        s = len(step)
        denoise_pairs = s * decoded + s * (s + 1) // 2
        if cm.mode == "active_set":
            queries += decoded + s
            pairs += n_mdm * n_mdm  # diffusion rows see the diffusion set
            pairs += n_ar * n_mdm + n_ar * (n_ar + 1) // 2
            pairs += denoise_pairs
        else:
            queries += prev_len + s
            if prev_parallel:
                # i-th previous-step row sees the diffusion tokens before
                # its step plus its same-step prefix
                build_pairs = prev_len * prev_start_mdm + prev_len * (prev_len + 1) // 2
            else:
                build_pairs = prev_len * (n_mdm + n_ar)  # singleton: all decoded incl self
            pairs += build_pairs + denoise_pairs
            hits += (prev_len + s) * (decoded - prev_len)
        prev_start_mdm = n_mdm
        prev_len = s
        prev_parallel = parallel
        if parallel:
            n_mdm += s
        else:
            n_ar += s
    out = {"query_tokens": queries, "attention_pairs": pairs}
    if cm.mode == "cached":
        out["cache_hits"] = hits
    return out


def run_mode(
    model: Denoiser, schedule: DenoisingSchedule, mode: str, rng: np.random.Generator
) -> tuple[np.ndarray, GenerationStats]:
    if mode == "full_pass":
        return generate_full_pass(model, schedule, rng)
    if mode == "active_set":
        return generate(model, schedule, "a", rng, use_cache=False)
    if mode == "cached":
        return generate(model, schedule, "b", rng, use_cache=True)
    raise PreconditionError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(frozen=True)
class MeasureResult:
    mode: str
    stats: GenerationStats
    wall_median_s: float
    wall_std_s: float


def measure(
    model: Denoiser,
    schedule: DenoisingSchedule,
    mode: str,
    rng: np.random.Generator,
    repeats: int = 3,
) -> MeasureResult:
    """Run the matching executor `repeats` times; counters must equal predict_costs.

    Timing is single-threaded and serial to avoid contention noise.
    """
    if repeats < 1:
        raise PreconditionError("repeats must be positive")
    prior_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        walls = []
        stats = None
        for _ in range(repeats):
            start = time.perf_counter()
            _, stats = run_mode(model, schedule, mode, rng)
            walls.append(time.perf_counter() - start)
    finally:
        torch.set_num_threads(prior_threads)
    predicted = predict_costs(CostModel(mode, schedule.L, schedule))
    assert stats is not None
    if stats.query_tokens_total != predicted["query_tokens"]:
        raise AssertionError(
            f"{mode}: measured queries {stats.query_tokens_total} != predicted {predicted['query_tokens']}"
        )
    if stats.attention_pairs_total != predicted["attention_pairs"]:
        raise AssertionError(
            f"{mode}: measured pairs {stats.attention_pairs_total} != predicted {predicted['attention_pairs']}"
        )
    return MeasureResult(
        mode=mode,
        stats=stats,
        wall_median_s=statistics.median(walls),
        wall_std_s=statistics.pstdev(walls) if len(walls) > 1 else 0.0,
    )
