"""Hybrid training objective: sequential (AR) term plus weighted masked-prediction term.

The sequential term feeds the noisy sequence concatenated with its clean
target through the network under a sequential-phase bias and scores only
the noisy-half mask slots. The masked-prediction term runs the noisy
sequence alone under a diffusion-phase bias and scales the masked-token
NLL by the schedule weight. At alpha0 = 1 the sequential term is
identically zero; at alpha0 = 0 the weight is zero and only the
sequential term remains.

Likelihood evaluation uses one stratified time draw per example and
normalizes the summed losses by the summed loss weights (expected weight
per sequence is exactly L), so a uniform predictor scores a perplexity
of exactly the vocabulary size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import rng as rng_mod
from .attention_bias import (
    bias_a_diffusion_train,
    bias_a_sequential_train,
    bias_b_diffusion_train,
    bias_b_sequential_train,
)
from .denoiser import Denoiser
from .errors import DivergenceError, PreconditionError
from .masking import MaskedSequence, concat, forward_mask
from .orderings import Ordering, sample_diffusion_ordering, sample_sequential_ordering
from .schedule import NoiseSchedule, low_discrepancy_times

VARIANTS = ("a", "b")


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise PreconditionError(f"variant must be one of {VARIANTS}, got {variant!r}")


def _log_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.double(), dim=-1)


def sequential_bias(z0: MaskedSequence, variant: str, sigma: Ordering | None):
    clean, mask = z0.clean_indices(), z0.mask_indices()
    if variant == "a":
        return bias_a_sequential_train(clean, mask)
    if sigma is None:
        raise PreconditionError("variant b sequential loss needs an ordering")
    return bias_b_sequential_train(clean, mask, sigma)


def diffusion_bias(z_t: MaskedSequence, variant: str, sigma: Ordering):
    clean, mask = z_t.clean_indices(), z_t.mask_indices()
    if variant == "a":
        return bias_a_diffusion_train(clean, mask, sigma)
    return bias_b_diffusion_train(sigma)


def ar_loss(
    x,
    z0: MaskedSequence,
    model: Denoiser,
    variant: str,
    sigma: Ordering | None = None,
) -> torch.Tensor:
    """Negative log-likelihood of the masked tokens, conditioned on the rest.

    Zero when the noisy sequence has no masks (alpha0 = 1).
    """
    _check_variant(variant)
    x = np.asarray(x, dtype=np.int64)
    if len(x) != len(z0):
        raise PreconditionError(f"length mismatch: {len(z0)} vs {len(x)}")
    mask = z0.mask_indices()
    if not mask:
        return torch.zeros((), dtype=torch.float64)
    tokens, positions = concat(z0, x)
    bias = sequential_bias(z0, variant, sigma)
    logits = model.forward(np.asarray(tokens), np.asarray(positions), bias)
    logp = _log_probs(logits[list(mask)])
    targets = torch.as_tensor(x[list(mask)])
    return -logp.gather(1, targets[:, None]).sum()


def mdm_loss(
    x,
    z_t: MaskedSequence,
    t: float,
    model: Denoiser,
    variant: str,
    sigma: Ordering,
    schedule: NoiseSchedule,
    variance_reduced: bool = False,
) -> torch.Tensor:
    """Schedule-weighted masked-token NLL; non-negative, zero when the weight is."""
    _check_variant(variant)
    x = np.asarray(x, dtype=np.int64)
    if len(x) != len(z_t):
        raise PreconditionError(f"length mismatch: {len(z_t)} vs {len(x)}")
    mask = z_t.mask_indices()
    if not mask:
        return torch.zeros((), dtype=torch.float64)
    weight = schedule.diffusion_weight(t, variance_reduced)
    if weight == 0.0:
        return torch.zeros((), dtype=torch.float64)
    bias = diffusion_bias(z_t, variant, sigma)
    logits = model.forward(np.asarray(z_t.tokens), np.arange(len(z_t)), bias)
    logp = _log_probs(logits[list(mask)])
    targets = torch.as_tensor(x[list(mask)])
    return weight * logp.gather(1, targets[:, None]).sum()


@dataclass(frozen=True)
class TrainBatchPlan:
    """How a batch is split between the two loss estimators."""

    batch_size: int
    mdm_fraction: float = 0.5

    def counts(self, alpha0: float) -> tuple[int, int]:
        """(n_ar, n_mdm); the whole batch goes to the masked loss when alpha0 = 1."""
        if not 0.0 <= self.mdm_fraction <= 1.0:
            raise PreconditionError(f"mdm_fraction must lie in [0, 1], got {self.mdm_fraction}")
        if alpha0 == 1.0:
            return 0, self.batch_size
        n_mdm = int(round(self.batch_size * self.mdm_fraction))
        return self.batch_size - n_mdm, n_mdm


def _batched_masked_nll(model, tokens, positions, biases, mask_slots, targets):
    """Summed masked-token NLL per example, one batched forward."""
    logits = model.forward(tokens, positions, np.stack([b.permit for b in biases]))
    out = []
    for b in range(len(mask_slots)):
        slots = mask_slots[b]
        if not slots:
            out.append(torch.zeros((), dtype=torch.float64))
            continue
        logp = _log_probs(logits[b, slots])
        tgt = torch.as_tensor(targets[b])
        out.append(-logp.gather(1, tgt[:, None]).sum())
    return out


class Trainer:
    """Split-batch gradient training with warmup-then-constant learning rate."""

    def __init__(
        self,
        model: Denoiser,
        schedule: NoiseSchedule,
        variant: str,
        plan: TrainBatchPlan,
        lr: float = 3e-4,
        warmup: int = 100,
        seed: int = 0,
        variance_reduced: bool | None = None,
    ):
        _check_variant(variant)
        self.model = model
        self.schedule = schedule
        self.variant = variant
        self.plan = plan
        self.seed = seed
        # The constant -1 weight is only defined for alpha0 = 1; default to it there.
        if variance_reduced is None:
            variance_reduced = schedule.alpha0 == 1.0
        self.variance_reduced = variance_reduced
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda step: min(1.0, (step + 1) / max(1, warmup))
        )
        self.step_count = 0

    def _draw_ar_example(self, x, rng):
        vocab = self.model.config.vocab
        z0 = forward_mask(x, vocab, self.schedule.alpha0, rng)
        sigma = None
        if self.variant == "b":
            sigma = sample_sequential_ordering(z0.clean_indices(), z0.mask_indices(), rng)
        return z0, sigma

    def train_step(self, batch: np.ndarray) -> dict:
        """One gradient step on the summed estimator; returns the log record."""
        batch = np.asarray(batch, dtype=np.int64)
        if batch.ndim != 2 or batch.shape[0] != self.plan.batch_size:
            raise PreconditionError(
                f"batch of shape {batch.shape} does not match plan batch_size {self.plan.batch_size}"
            )
        B, L = batch.shape
        n_ar, n_mdm = self.plan.counts(self.schedule.alpha0)
        rng = rng_mod.stream(self.seed, "train", self.step_count)

        losses: list[torch.Tensor] = []
        ar_total = torch.zeros((), dtype=torch.float64)
        mdm_total = torch.zeros((), dtype=torch.float64)
        nelbo_num = 0.0
        nelbo_den = 0.0

        if n_ar:
            tokens, positions, biases, slots, targets = [], [], [], [], []
            for i in range(n_ar):
                x = batch[i]
                z0, sigma = self._draw_ar_example(x, rng)
                tk, ps = concat(z0, x)
                tokens.append(tk)
                positions.append(ps)
                biases.append(sequential_bias(z0, self.variant, sigma))
                mask = list(z0.mask_indices())
                slots.append(mask)
                targets.append(x[mask])
            per_example = _batched_masked_nll(
                self.model, np.asarray(tokens), np.asarray(positions), biases, slots, targets
            )
            for loss, mask in zip(per_example, slots):
                losses.append(loss)
                ar_total = ar_total + loss.detach()
                nelbo_num += float(loss.detach())
                nelbo_den += len(mask)

        if n_mdm:
            times = low_discrepancy_times(n_mdm, rng)
            tokens, positions, biases, slots, targets, weights = [], [], [], [], [], []
            for i in range(n_mdm):
                x = batch[n_ar + i]
                t = float(times[i])
                z_t = forward_mask(x, self.model.config.vocab, self.schedule.alpha(t), rng)
                sigma = sample_diffusion_ordering(z_t.clean_indices(), z_t.mask_indices(), rng)
                tokens.append(z_t.tokens)
                positions.append(np.arange(L))
                biases.append(diffusion_bias(z_t, self.variant, sigma))
                mask = list(z_t.mask_indices())
                slots.append(mask)
                targets.append(x[mask])
                weights.append(self.schedule.diffusion_weight(t, self.variance_reduced))
            per_example = _batched_masked_nll(
                self.model, np.asarray(tokens), np.asarray(positions), biases, slots, targets
            )
            for loss, w, mask in zip(per_example, weights, slots):
                weighted = -w * loss
                losses.append(weighted)
                mdm_total = mdm_total + weighted.detach()
                nelbo_num += float(weighted.detach())
                nelbo_den += -w * len(mask)

        total = torch.stack(losses).sum() / B
        if not torch.isfinite(total):
            raise DivergenceError(
                f"non-finite loss at step {self.step_count}: "
                f"ar={float(ar_total)} mdm={float(mdm_total)}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.step_count += 1
        return {
            "step": self.step_count,
            "ar_loss": float(ar_total) / max(n_ar, 1),
            "mdm_loss": float(mdm_total) / max(n_mdm, 1),
            "nelbo": nelbo_num / max(nelbo_den, 1e-12),
            "n_ar": n_ar,
            "n_mdm": n_mdm,
        }


@dataclass(frozen=True)
class EvalReport:
    perplexity: float
    nelbo_per_token: float
    ar_nll: float
    ar_weight: float
    mdm_nll: float
    mdm_weight: float
    n_examples: int

    def as_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "nelbo_per_token": self.nelbo_per_token,
            "ar_nll": self.ar_nll,
            "ar_weight": self.ar_weight,
            "mdm_nll": self.mdm_nll,
            "mdm_weight": self.mdm_weight,
            "n_examples": self.n_examples,
        }


def eval_nelbo(
    examples: np.ndarray,
    model: Denoiser,
    schedule: NoiseSchedule,
    variant: str,
    seed: int = 0,
    variance_reduced: bool = False,
    chunk: int = 64,
) -> EvalReport:
    """Likelihood bound with a single stratified time draw per example.

    Summed losses are divided by summed loss weights (mask count for the
    sequential term, |schedule weight| x mask count for the masked term);
    the weight total has expectation L per example, making the bound a
    consistent per-token estimate that is exact for a uniform predictor.
    """
    _check_variant(variant)
    examples = np.asarray(examples, dtype=np.int64)
    if examples.ndim != 2 or examples.shape[0] == 0:
        raise PreconditionError("need a non-empty (N, L) array of sequences")
    N, L = examples.shape
    vocab = model.config.vocab
    alpha0 = schedule.alpha0
    times = low_discrepancy_times(N, rng_mod.stream(seed, "eval-times"))

    ar_nll = ar_weight = mdm_nll = mdm_weight = 0.0
    with torch.no_grad():
        for start in range(0, N, chunk):
            xs = examples[start : start + chunk]
            ar_inputs = ([], [], [], [], [])
            mdm_inputs = ([], [], [], [], [])
            mdm_weights = []
            for b, x in enumerate(xs):
                i = start + b
                rng = rng_mod.stream(seed, "eval", i)
                z0 = forward_mask(x, vocab, alpha0, rng)
                mask = list(z0.mask_indices())
                if mask:
                    sigma = None
                    if variant == "b":
                        sigma = sample_sequential_ordering(
                            z0.clean_indices(), z0.mask_indices(), rng
                        )
                    tk, ps = concat(z0, x)
                    ar_inputs[0].append(tk)
                    ar_inputs[1].append(ps)
                    ar_inputs[2].append(sequential_bias(z0, variant, sigma))
                    ar_inputs[3].append(mask)
                    ar_inputs[4].append(x[mask])
                t = float(times[i])
                w = schedule.diffusion_weight(t, variance_reduced)
                if w != 0.0:
                    z_t = forward_mask(x, vocab, schedule.alpha(t), rng)
                    tmask = list(z_t.mask_indices())
                    if tmask:
                        sigma_t = sample_diffusion_ordering(
                            z_t.clean_indices(), z_t.mask_indices(), rng
                        )
                        mdm_inputs[0].append(z_t.tokens)
                        mdm_inputs[1].append(np.arange(L))
                        mdm_inputs[2].append(diffusion_bias(z_t, variant, sigma_t))
                        mdm_inputs[3].append(tmask)
                        mdm_inputs[4].append(x[tmask])
                        mdm_weights.append(-w)
            if ar_inputs[0]:
                nlls = _batched_masked_nll(
                    model,
                    np.asarray(ar_inputs[0]),
                    np.asarray(ar_inputs[1]),
                    ar_inputs[2],
                    ar_inputs[3],
                    ar_inputs[4],
                )
                for loss, mask in zip(nlls, ar_inputs[3]):
                    ar_nll += float(loss)
                    ar_weight += len(mask)
            if mdm_inputs[0]:
                nlls = _batched_masked_nll(
                    model,
                    np.asarray(mdm_inputs[0]),
                    np.asarray(mdm_inputs[1]),
                    mdm_inputs[2],
                    mdm_inputs[3],
                    mdm_inputs[4],
                )
                for loss, w, mask in zip(nlls, mdm_weights, mdm_inputs[3]):
                    mdm_nll += w * float(loss)
                    mdm_weight += w * len(mask)

    denom = ar_weight + mdm_weight
    per_token = (ar_nll + mdm_nll) / denom if denom > 0 else 0.0
    return EvalReport(
        perplexity=math.exp(per_token),
        nelbo_per_token=per_token,
        ar_nll=ar_nll,
        ar_weight=ar_weight,
        mdm_nll=mdm_nll,
        mdm_weight=mdm_weight,
        n_examples=N,
    )
