"""Hybrid autoregressive / masked-diffusion language modeling.

A sequence is generated in two phases: a parallel phase that reveals
random subsets of positions per step, and a sequential phase that fills
the remainder left to right. One transformer serves both phases through
permit/block attention-bias matrices; the causal variant supports a
single position-keyed KV cache across both phases.
"""

__version__ = "0.1.0"

from .attention_bias import (
    AttentionBias,
    BiasCase,
    bias_a_diffusion_train,
    bias_a_sampling,
    bias_a_sequential_train,
    bias_b_diffusion_train,
    bias_b_sampling,
    bias_b_sequential_train,
    oracle_verify,
    render,
    sorted_view,
)
from .bench import CostModel, MeasureResult, measure, predict_costs
from .config import RunConfig
from .corpus import PackedDataset, Tokenizer, build_dataset, build_vocab, pack
from .denoiser import Denoiser, DenoiserConfig, KVCache, load_checkpoint, parameter_gradients, save_checkpoint
from .losses import EvalReport, TrainBatchPlan, Trainer, ar_loss, eval_nelbo, mdm_loss
from .masking import MaskedSequence, Vocab, concat, forward_mask, reverse_posterior, substitute
from .orderings import Ordering, invert, sample_diffusion_ordering, sample_sequential_ordering, sort_by, unsort_by
from .sampler import (
    DenoisingSchedule,
    GenerationStats,
    assemble_schedule,
    build_schedule,
    generate,
    generate_full_pass,
    nucleus_filter,
)
from .schedule import LogLinearSchedule, NoiseSchedule, low_discrepancy_times
