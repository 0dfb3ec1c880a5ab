import math

import numpy as np
import pytest
import torch

from hybridlm.denoiser import Denoiser, DenoiserConfig
from hybridlm.errors import DivergenceError, PreconditionError
from hybridlm.losses import TrainBatchPlan, Trainer, ar_loss, eval_nelbo, mdm_loss, sequential_bias
from hybridlm.masking import MaskedSequence, Vocab, concat, forward_mask
from hybridlm.orderings import sample_diffusion_ordering, sample_sequential_ordering
from hybridlm.rng import stream
from hybridlm.schedule import LogLinearSchedule

from oracles import substitution_ar_nll

torch.set_num_threads(1)

VOCAB = Vocab(size=9, mask_id=8, separator_id=7)


def make_model(seed=0, dtype=torch.float64, trained_head=True):
    torch.manual_seed(seed)
    config = DenoiserConfig(vocab=VOCAB, layers=2, model_dim=32, heads=4, max_positions=128)
    model = Denoiser(config).to(dtype)
    if trained_head:
        torch.nn.init.normal_(model.head.weight, std=0.2)
    return model


def random_clean(rng, L):
    return rng.integers(0, 7, size=L)


def test_ar_loss_zero_when_nothing_masked():
    model = make_model()
    rng = stream(0, "loss")
    x = random_clean(rng, 6)
    z0 = forward_mask(x, VOCAB, 1.0, rng)
    assert z0.mask_indices() == ()
    assert float(ar_loss(x, z0, model, "a")) == 0.0


def test_ar_loss_single_token_unconditional_nll():
    model = make_model()
    x = np.array([3])
    z0 = MaskedSequence((VOCAB.mask_id,), VOCAB)
    loss = ar_loss(x, z0, model, "a").detach()
    tokens, positions = concat(z0, x)
    bias = sequential_bias(z0, "a", None)
    with torch.no_grad():
        logits = model.forward(np.asarray(tokens), np.asarray(positions), bias)
    expected = -float(torch.log_softmax(logits[0].double(), -1)[3])
    assert float(loss) == pytest.approx(expected, rel=1e-12)


def test_mdm_loss_zero_weight_at_alpha0_zero():
    model = make_model()
    rng = stream(1, "loss")
    sched = LogLinearSchedule(0.0)
    x = random_clean(rng, 8)
    z_t = forward_mask(x, VOCAB, 0.0, rng)
    sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
    assert float(mdm_loss(x, z_t, 0.5, model, "a", sigma, sched)) == 0.0


def test_mdm_loss_zero_when_no_masks():
    model = make_model()
    rng = stream(2, "loss")
    sched = LogLinearSchedule(1.0)
    x = random_clean(rng, 8)
    z_t = forward_mask(x, VOCAB, 1.0, rng)
    sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
    assert float(mdm_loss(x, z_t, 0.5, model, "a", sigma, sched)) == 0.0


def test_mdm_loss_uniform_model_log_k_per_masked_token():
    model = make_model(trained_head=False)  # zero head: exactly uniform
    rng = stream(3, "loss")
    sched = LogLinearSchedule(1.0)
    x = random_clean(rng, 12)
    z_t = forward_mask(x, VOCAB, 0.4, rng)
    n_masked = len(z_t.mask_indices())
    sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
    loss = mdm_loss(x, z_t, 0.7, model, "b", sigma, sched, variance_reduced=True).detach()
    assert float(loss) == pytest.approx(n_masked * math.log(VOCAB.size), rel=1e-12)


def test_mdm_loss_nonnegative():
    model = make_model()
    rng = stream(4, "loss")
    for alpha0 in (0.25, 0.5, 1.0):
        sched = LogLinearSchedule(alpha0)
        for _ in range(5):
            x = random_clean(rng, 10)
            t = float(rng.uniform(0.1, 1.0))
            z_t = forward_mask(x, VOCAB, sched.alpha(t), rng)
            sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
            assert float(mdm_loss(x, z_t, t, model, "a", sigma, sched).detach()) >= 0.0


def test_mdm_loss_ignores_clean_position_targets():
    # changing x at clean positions of z_t must not change the loss
    model = make_model()
    rng = stream(5, "loss")
    sched = LogLinearSchedule(0.5)
    x = random_clean(rng, 10)
    z_t = forward_mask(x, VOCAB, 0.5, rng)
    clean = z_t.clean_indices()
    if not clean or not z_t.mask_indices():
        pytest.skip("degenerate draw")
    sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
    base = float(mdm_loss(x, z_t, 0.5, model, "a", sigma, sched).detach())
    x2 = x.copy()
    x2[clean[0]] = (x2[clean[0]] + 1) % 7
    again = float(mdm_loss(x2, z_t, 0.5, model, "a", sigma, sched).detach())
    assert base == again


@pytest.mark.parametrize("variant", ["a", "b"])
def test_ar_loss_matches_substitution_oracle_all_masked(variant):
    # alpha0 = 0: every position masked; oracle scores slot by slot
    model = make_model()
    rng = stream(6, "loss")
    for L in range(1, 7):
        x = random_clean(rng, L)
        z0 = MaskedSequence((VOCAB.mask_id,) * L, VOCAB)
        sigma = sample_sequential_ordering((), tuple(range(L)), rng)
        loss = float(ar_loss(x, z0, model, variant, sigma).detach())
        oracle = substitution_ar_nll(x, z0, model, variant, sigma)
        assert loss == pytest.approx(oracle, rel=1e-9)


@pytest.mark.parametrize("variant", ["a", "b"])
def test_ar_loss_matches_substitution_oracle_partial_masking(variant):
    model = make_model()
    rng = stream(7, "loss")
    for _ in range(10):
        L = int(rng.integers(2, 8))
        x = random_clean(rng, L)
        z0 = forward_mask(x, VOCAB, 0.5, rng)
        if not z0.mask_indices():
            continue
        sigma = sample_sequential_ordering(z0.clean_indices(), z0.mask_indices(), rng)
        loss = float(ar_loss(x, z0, model, variant, sigma).detach())
        oracle = substitution_ar_nll(x, z0, model, variant, sigma)
        assert loss == pytest.approx(oracle, rel=1e-9)


def test_ar_loss_causality_variant_b_all_masked():
    # with everything masked, slot l must not see targets at positions >= l
    model = make_model()
    rng = stream(8, "loss")
    L = 6
    x = random_clean(rng, L)
    z0 = MaskedSequence((VOCAB.mask_id,) * L, VOCAB)
    sigma = sample_sequential_ordering((), tuple(range(L)), rng)
    bias = sequential_bias(z0, "b", sigma)
    tokens, positions = concat(z0, x)
    with torch.no_grad():
        base = model.forward(np.asarray(tokens), np.asarray(positions), bias)
    for l in range(L):
        x2 = x.copy()
        x2[l:] = (x2[l:] + 1 + rng.integers(0, 5)) % 7
        tokens2, _ = concat(z0, x2)
        with torch.no_grad():
            out = model.forward(np.asarray(tokens2), np.asarray(positions), bias)
        assert torch.equal(base[l], out[l])


def test_plan_counts():
    plan = TrainBatchPlan(batch_size=8, mdm_fraction=0.5)
    assert plan.counts(0.5) == (4, 4)
    assert plan.counts(1.0) == (0, 8)
    assert TrainBatchPlan(8, 0.25).counts(0.5) == (6, 2)
    with pytest.raises(PreconditionError):
        TrainBatchPlan(8, 1.5).counts(0.5)


def make_trainer(alpha0, seed=0, batch_size=8, variant="a", lr=1e-3):
    model = make_model(seed=seed, dtype=torch.float32, trained_head=False)
    sched = LogLinearSchedule(alpha0)
    plan = TrainBatchPlan(batch_size=batch_size)
    return Trainer(model, sched, variant, plan, lr=lr, warmup=10, seed=seed)


def test_train_step_records_components():
    rng = stream(9, "loss")
    trainer = make_trainer(0.5)
    batch = rng.integers(0, 7, size=(8, 12))
    record = trainer.train_step(batch)
    assert record["step"] == 1
    assert record["n_ar"] == 4 and record["n_mdm"] == 4
    assert record["ar_loss"] >= 0 and record["mdm_loss"] >= 0
    assert math.isfinite(record["nelbo"])


def test_train_step_deterministic_repeat():
    rng = stream(10, "loss")
    batch = rng.integers(0, 7, size=(8, 10))
    results = []
    for _ in range(2):
        trainer = make_trainer(0.5, seed=3)
        r1 = trainer.train_step(batch)
        r2 = trainer.train_step(batch)
        weights = [p.detach().clone() for p in trainer.model.parameters()]
        results.append((r1, r2, weights))
    assert results[0][0] == results[1][0]
    assert results[0][1] == results[1][1]
    for w1, w2 in zip(results[0][2], results[1][2]):
        assert torch.equal(w1, w2)


def test_train_divergence_guard():
    rng = stream(11, "loss")
    trainer = make_trainer(0.5)
    with torch.no_grad():
        trainer.model.head.weight[:] = float("nan")
    with pytest.raises(DivergenceError):
        trainer.train_step(rng.integers(0, 7, size=(8, 10)))


def test_uniform_model_eval_is_vocab_size():
    rng = stream(12, "loss")
    examples = rng.integers(0, 7, size=(24, 10))
    for alpha0 in (0.0, 0.5, 1.0):
        model = make_model(dtype=torch.float32, trained_head=False)
        report = eval_nelbo(examples, model, LogLinearSchedule(alpha0), "a", seed=5)
        assert report.perplexity == pytest.approx(VOCAB.size, rel=1e-9)


def test_eval_alpha0_zero_is_exact_ar_nll():
    rng = stream(13, "loss")
    examples = rng.integers(0, 7, size=(6, 8))
    model = make_model(dtype=torch.float32)
    report = eval_nelbo(examples, model, LogLinearSchedule(0.0), "b", seed=2)
    assert report.mdm_nll == 0.0 and report.mdm_weight == 0.0
    # reference: per-example sequential loss over fully masked sequences
    total = 0.0
    for i, x in enumerate(examples):
        rng_i = stream(2, "eval", i)
        z0 = forward_mask(x, VOCAB, 0.0, rng_i)
        sigma = sample_sequential_ordering(z0.clean_indices(), z0.mask_indices(), rng_i)
        total += float(ar_loss(x, z0, model, "b", sigma).detach())
    assert report.nelbo_per_token == pytest.approx(total / examples.size, rel=1e-9)


def test_eval_deterministic():
    rng = stream(14, "loss")
    examples = rng.integers(0, 7, size=(10, 8))
    model = make_model(dtype=torch.float32)
    sched = LogLinearSchedule(0.5)
    r1 = eval_nelbo(examples, model, sched, "a", seed=9)
    r2 = eval_nelbo(examples, model, sched, "a", seed=9)
    assert r1 == r2


def test_eval_endpoint_components():
    rng = stream(15, "loss")
    examples = rng.integers(0, 7, size=(12, 8))
    model = make_model(dtype=torch.float32)
    at_one = eval_nelbo(examples, model, LogLinearSchedule(1.0), "a", seed=1)
    assert at_one.ar_nll == 0.0 and at_one.ar_weight == 0.0
    at_zero = eval_nelbo(examples, model, LogLinearSchedule(0.0), "a", seed=1)
    assert at_zero.mdm_nll == 0.0


def test_short_training_improves_bound():
    rng = stream(16, "loss")
    # tiny corpus with strong structure: alternating pairs
    base = np.array([0, 1, 2, 3, 4, 5] * 4)
    examples = np.stack([np.roll(base, rng.integers(0, 6))[:12] for _ in range(32)])
    trainer = make_trainer(0.5, batch_size=8, lr=3e-3)
    before = eval_nelbo(examples, trainer.model, trainer.schedule, "a", seed=0).perplexity
    assert before == pytest.approx(VOCAB.size, rel=1e-9)
    for step in range(200):
        idx = stream(0, "data", step).integers(0, len(examples), size=8)
        trainer.train_step(examples[idx])
    after = eval_nelbo(examples, trainer.model, trainer.schedule, "a", seed=0).perplexity
    assert after < 0.9 * before
