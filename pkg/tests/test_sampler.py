import numpy as np
import pytest
import torch

from hybridlm.denoiser import Denoiser, DenoiserConfig
from hybridlm.errors import PreconditionError
from hybridlm.masking import Vocab
from hybridlm.rng import stream
from hybridlm.sampler import (
    DenoisingSchedule,
    StepTrace,
    assemble_schedule,
    build_schedule,
    draw_reveal_counts,
    generate,
    generate_full_pass,
    nucleus_filter,
)
from hybridlm.schedule import LogLinearSchedule

from oracles import ancestral_unmask_counts

torch.set_num_threads(1)

VOCAB = Vocab(size=9, mask_id=8, separator_id=7)


def make_model(seed=0, dtype=torch.float32, max_positions=64):
    torch.manual_seed(seed)
    config = DenoiserConfig(vocab=VOCAB, layers=2, model_dim=32, heads=4, max_positions=max_positions)
    model = Denoiser(config).to(dtype)
    torch.nn.init.normal_(model.head.weight, std=0.3)
    return model


def test_assemble_worked_example():
    # 1-based: counts (2,1,2) over permuted indices (3,1,6,4,7) with L=8
    # gives steps ((3,1),(6),(4,7),(2),(5),(8)) and 6 forward passes
    sched = assemble_schedule(8, [2, 1, 2], [2, 0, 5, 3, 6])
    assert sched.steps == ((2, 0), (5,), (3, 6), (1,), (4,), (7,))
    assert sched.nfe == 6
    assert sched.n_mdm == 5 and sched.n_ar == 3
    assert sched.sigma.one_based() == (3, 1, 6, 4, 7, 2, 5, 8)


def test_schedule_validation():
    with pytest.raises(PreconditionError):
        DenoisingSchedule(((0, 1), (1,)), 1)  # duplicate position
    with pytest.raises(PreconditionError):
        DenoisingSchedule(((0,), (2,), (1,)), 1)  # tail descending
    with pytest.raises(PreconditionError):
        DenoisingSchedule(((0, 1), (2, 3)), 1)  # tail not singleton


def test_single_step_all_positions():
    rng = stream(0, "schedule")
    sched = build_schedule(8, 1, LogLinearSchedule(1.0), rng)
    assert sched.nfe == 1
    assert sched.n_mdm == 8
    assert sorted(sched.steps[0]) == list(range(8))


def test_pure_sequential_schedule():
    rng = stream(1, "schedule")
    sched = build_schedule(6, 4, LogLinearSchedule(0.0), rng)
    assert sched.steps == ((0,), (1,), (2,), (3,), (4,), (5,))
    assert sched.n_mdm == 0 and sched.n_ar == 6


def test_build_schedule_partitions():
    rng = stream(2, "schedule")
    for _ in range(100):
        L = int(rng.integers(1, 40))
        T = int(rng.integers(1, 20))
        alpha0 = float(rng.choice([0.0, 0.25, 0.5, 0.9, 1.0]))
        sched = build_schedule(L, T, LogLinearSchedule(alpha0), rng)
        flat = sorted(p for s in sched.steps for p in s)
        assert flat == list(range(L))
        assert sched.nfe <= T + sched.n_ar
        assert all(sched.steps[k] for k in range(sched.n_mdm_steps))


def test_reveal_counts_telescope_to_binomial():
    rng = stream(3, "schedule")
    L, alpha0 = 64, 0.25
    totals = [
        sum(draw_reveal_counts(L, 16, LogLinearSchedule(alpha0), rng)) for _ in range(800)
    ]
    mean = np.mean(totals)
    sigma = np.sqrt(L * alpha0 * (1 - alpha0))
    assert abs(mean - L * alpha0) < 3 * sigma / np.sqrt(len(totals))


def test_nfe_matches_ancestral_first_hitting():
    # the schedule's step count distribution equals an ancestral walk's
    # count of steps that reveal at least one token
    L, T = 16, 24
    sched_rng = stream(4, "schedule")
    anc_rng = stream(5, "schedule")
    trials = 400
    nfes = []
    for _ in range(trials):
        sched = build_schedule(L, T, LogLinearSchedule(1.0), sched_rng)
        assert sched.n_ar == 0
        nfes.append(sched.nfe)
    ancestral = []
    for _ in range(trials):
        counts = ancestral_unmask_counts(L, 1.0, T, anc_rng)
        ancestral.append(sum(1 for c in counts if c > 0))
    se = np.sqrt(np.var(nfes) / trials + np.var(ancestral) / trials)
    assert abs(np.mean(nfes) - np.mean(ancestral)) < 4 * se + 1e-9


def test_nucleus_examples():
    probs = np.array([0.5, 0.3, 0.2])
    out = nucleus_filter(probs, 0.7)
    assert np.allclose(out, [0.625, 0.375, 0.0])
    assert np.array_equal(nucleus_filter(probs, 1.0), probs)
    onehot = np.array([0.0, 1.0, 0.0])
    for p in (0.1, 0.5, 0.9):
        assert np.allclose(nucleus_filter(onehot, p), onehot)
    with pytest.raises(PreconditionError):
        nucleus_filter(probs, 0.0)


def test_nucleus_tie_break_by_token_id():
    probs = np.array([0.25, 0.25, 0.25, 0.25])
    out = nucleus_filter(probs, 0.5)
    assert np.allclose(out, [0.5, 0.5, 0.0, 0.0])


@pytest.mark.parametrize("variant", ["a", "b"])
def test_generation_is_mask_free(variant):
    model = make_model()
    rng = stream(6, "sampling")
    for alpha0 in (0.0, 0.5, 1.0):
        sched = build_schedule(12, 6, LogLinearSchedule(alpha0), rng)
        tokens, stats = generate(model, sched, variant, rng)
        assert len(tokens) == 12
        assert not np.any(tokens == VOCAB.mask_id)
        assert stats.nfe == sched.nfe
        assert stats.wall_seconds > 0


def test_greedy_deterministic_across_cache_modes():
    model = make_model(dtype=torch.float64)
    rng = stream(7, "sampling")
    sched = build_schedule(10, 5, LogLinearSchedule(0.5), rng)
    outs = []
    for use_cache in (True, False):
        tokens, _ = generate(
            model, sched, "b", stream(0, "gen"), temperature=0.0, use_cache=use_cache
        )
        outs.append(tokens)
    assert np.array_equal(outs[0], outs[1])
    again, _ = generate(model, sched, "b", stream(0, "gen"), temperature=0.0)
    assert np.array_equal(outs[0], again)


@pytest.mark.parametrize("variant", ["a", "b"])
def test_cached_matches_reference_tokens_and_logits(variant):
    model = make_model(dtype=torch.float64)
    rng = stream(8, "sampling")
    for trial in range(9):
        L = int(rng.choice([8, 14, 32]))
        alpha0 = float(rng.choice([0.25, 0.5, 1.0]))
        sched = build_schedule(L, int(rng.integers(2, 8)), LogLinearSchedule(alpha0), rng)
        tr_c, tr_r = StepTrace(), StepTrace()
        cached, _ = generate(
            model, sched, variant, stream(trial, "gen"), trace=tr_c, use_cache=True
        )
        ref, _ = generate(
            model, sched, variant, stream(trial, "gen"), trace=tr_r, use_cache=False
        )
        assert np.array_equal(cached, ref)
        for a, b in zip(tr_c.logits, tr_r.logits):
            denom = np.abs(b).max()
            assert np.abs(a - b).max() / denom < 1e-10


def test_cached_bitwise_in_deterministic_mode():
    model = make_model(dtype=torch.float64)
    rng = stream(9, "sampling")
    sched = build_schedule(10, 4, LogLinearSchedule(0.75), rng)
    tr_c, tr_r = StepTrace(), StepTrace()
    cached, _ = generate(
        model, sched, "b", stream(1, "gen"), trace=tr_c, use_cache=True, deterministic=True
    )
    ref, _ = generate(
        model, sched, "b", stream(1, "gen"), trace=tr_r, use_cache=False, deterministic=True
    )
    assert np.array_equal(cached, ref)
    for a, b in zip(tr_c.logits, tr_r.logits):
        assert np.array_equal(a, b)


def test_pure_sequential_cached_query_total():
    model = make_model()
    rng = stream(10, "sampling")
    L = 12
    sched = build_schedule(L, 3, LogLinearSchedule(0.0), rng)
    _, stats = generate(model, sched, "b", rng)
    assert stats.query_tokens_total == 2 * L - 1
    assert stats.nfe == L


def test_variant_b_query_total_bound():
    model = make_model()
    rng = stream(11, "sampling")
    for _ in range(5):
        sched = build_schedule(16, int(rng.integers(1, 10)), LogLinearSchedule(0.5), rng)
        _, stats = generate(model, sched, "b", rng)
        assert stats.query_tokens_total == 2 * 16 - len(sched.steps[-1])


def test_full_pass_baseline_counters():
    model = make_model()
    rng = stream(12, "sampling")
    L = 10
    sched = build_schedule(L, 4, LogLinearSchedule(0.5), rng)
    tokens, stats = generate_full_pass(model, sched, rng)
    assert not np.any(tokens == VOCAB.mask_id)
    assert stats.query_tokens_total == sched.nfe * L
    assert stats.attention_pairs_total == sched.nfe * L * L


def test_schedule_too_long_rejected():
    model = make_model(max_positions=8)
    rng = stream(13, "sampling")
    sched = build_schedule(16, 4, LogLinearSchedule(0.5), rng)
    with pytest.raises(PreconditionError):
        generate(model, sched, "b", rng)
