"""Command-line entry point: train / sample / eval-ppl / inspect-bias / bench.

Every subcommand resolves one flat configuration (defaults < --config
file < flags), writes the resolved copy next to its outputs, and stamps
artifacts with the config hash and package version. Exit codes: 0 ok,
2 configuration error, 3 numeric divergence, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attention_bias import (
    bias_a_diffusion_train,
    bias_a_sampling,
    bias_a_sequential_train,
    bias_b_diffusion_train,
    bias_b_sampling,
    bias_b_sequential_train,
    render,
)
from .bench import MODES, CostModel, measure, predict_costs
from .config import RunConfig, parse_config_file
from .corpus import (
    build_dataset,
    load_corpus_text,
    load_dataset,
    load_tokenizer,
    save_dataset,
    save_tokenizer,
)
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DivergenceError
from .losses import TrainBatchPlan, Trainer, eval_nelbo
from .masking import Vocab
from .orderings import Ordering, sample_diffusion_ordering, sample_sequential_ordering
from .rng import stream
from .sampler import StepTrace, build_schedule, generate
from .schedule import LogLinearSchedule


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridlm")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override any config key (repeatable)",
        )
        p.add_argument("--seed", type=int)
        p.add_argument("--output")
        p.add_argument("--deterministic", action="store_const", const=True, default=None,
                       help="pin accumulation order; timing fields are zeroed")

    p = sub.add_parser("train", help="train a model on a text corpus")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--alpha0", type=float, dest="alpha0_train")
    p.add_argument("--variant", choices=("a", "b"))
    p.add_argument("--steps", type=int, dest="train_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--context-length", type=int, dest="context_length")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--alpha0-eval", type=float, dest="alpha0_eval")
    p.add_argument("--steps", type=int, dest="sample_steps", help="discretization steps T")
    p.add_argument("--variant", choices=("a", "b"))
    p.add_argument("--nucleus", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--length", type=int)
    p.add_argument("--num-samples", type=int, dest="num_samples")
    p.add_argument("--no-cache", action="store_const", const=True, default=None,
                   dest="no_cache", help="force the reference executor")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("eval-ppl", help="evaluate the likelihood bound")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--alpha0-eval", type=float, dest="alpha0_eval")
    p.add_argument("--variant", choices=("a", "b"))
    p.add_argument("--eval-examples", type=int, dest="eval_examples")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("inspect-bias", help="dump an attention-bias grid")
    common(p)
    p.add_argument("--variant", choices=("a", "b"))
    p.add_argument("--phase", choices=("diffusion", "sequential", "sampling"), default="diffusion")
    p.add_argument("--example", choices=("six-tokens", "worked-step", "random"), default="six-tokens")
    p.add_argument("--length", type=int)
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("bench", help="cost accounting across execution modes")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--alpha0-eval", type=float, dest="alpha0_eval")
    p.add_argument("--steps", type=int, dest="sample_steps")
    p.add_argument("--length", type=int)
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--repeats", type=int, dest="bench_repeats")
    p.set_defaults(handler=cmd_bench)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in (
        "seed", "output", "deterministic", "corpus", "alpha0_train", "variant",
        "train_steps", "batch_size", "context_length", "checkpoint", "alpha0_eval",
        "sample_steps", "nucleus", "temperature", "length", "num_samples",
        "no_cache", "eval_examples", "bench_repeats",
    ):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.resolve(file_values, overrides)


def _stamp(cfg: RunConfig, record: dict) -> dict:
    record["config_hash"] = cfg.hash()
    record["version"] = __version__
    return record


def _load_training_data(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigError("a corpus path is required")
    path = Path(cfg.corpus)
    if not path.exists():
        raise ConfigError(f"corpus not found: {path}")
    if path.suffix == ".bin":
        return load_dataset(path), None
    text = load_corpus_text(path)
    max_size = cfg.vocab_max_size or None
    dataset, tokenizer = build_dataset(text, cfg.context_length, cfg.vocab_mode, max_size)
    return dataset, tokenizer


def cmd_train(cfg: RunConfig, args) -> int:
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(1)
    dataset, tokenizer = _load_training_data(cfg)
    if len(dataset) == 0:
        raise ConfigError("corpus too small for the configured context length")
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved("train")
    if tokenizer is not None:
        save_tokenizer(tokenizer, out / "vocab.json")
        save_dataset(dataset, out / "dataset.bin")

    model_config = DenoiserConfig(
        vocab=dataset.vocab,
        layers=cfg.layers,
        model_dim=cfg.model_dim,
        heads=cfg.heads,
        max_positions=cfg.resolved_max_positions(),
        position_encoding=cfg.position_encoding,
        dropout=cfg.dropout,
    )
    model = Denoiser(model_config)
    schedule = LogLinearSchedule(cfg.alpha0_train)
    trainer = Trainer(
        model,
        schedule,
        cfg.variant,
        TrainBatchPlan(cfg.batch_size, cfg.mdm_fraction),
        lr=cfg.lr,
        warmup=cfg.warmup,
        seed=cfg.seed,
        variance_reduced=cfg.variance_reduced_flag(cfg.alpha0_train),
    )

    log_path = out / "train-log.jsonl"
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    try:
        with open(log_path, "w", encoding="utf-8") as log:
            for step in range(cfg.train_steps):
                idx = stream(cfg.seed, "data", step).integers(0, len(dataset), size=cfg.batch_size)
                started = time.perf_counter()
                record = trainer.train_step(dataset.examples[idx])
                elapsed = time.perf_counter() - started
                tokens_per_sec = 0.0 if cfg.deterministic else (
                    cfg.batch_size * cfg.context_length / max(elapsed, 1e-9)
                )
                record["tokens_per_sec"] = round(tokens_per_sec, 3)
                log.write(json.dumps(_stamp(cfg, record)) + "\n")
    except DivergenceError:
        dump = _stamp(cfg, {"step": trainer.step_count, "status": "diverged"})
        (out / "divergence.json").write_text(json.dumps(dump, indent=1))
        raise
    save_checkpoint(
        model, str(ckpt_path), extra={"config_hash": cfg.hash(), "code_version": __version__}
    )
    print(f"wrote {ckpt_path} and {log_path}")
    return 0


def _load_model(cfg: RunConfig) -> Denoiser:
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint path is required")
    dtype = torch.float64 if cfg.deterministic else torch.float32
    return load_checkpoint(cfg.checkpoint, dtype=dtype)


def cmd_sample(cfg: RunConfig, args) -> int:
    torch.set_num_threads(1)
    model = _load_model(cfg)
    L = cfg.resolved_length()
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved("sample")
    tokenizer = None
    vocab_path = Path(cfg.checkpoint).parent / "vocab.json"
    if vocab_path.exists():
        tokenizer = load_tokenizer(vocab_path)
    noise = LogLinearSchedule(cfg.alpha0_eval)
    records = []
    for i in range(cfg.num_samples):
        sched = build_schedule(L, cfg.sample_steps, noise, stream(cfg.seed, "schedule", i))
        tokens, stats = generate(
            model,
            sched,
            cfg.variant,
            stream(cfg.seed, "sampling", i),
            nucleus_p=cfg.nucleus or None,
            temperature=cfg.temperature,
            use_cache=not cfg.no_cache,
            deterministic=cfg.deterministic,
        )
        stats_dict = stats.as_dict()
        if cfg.deterministic:
            stats_dict["wall_seconds"] = 0.0
        record = {
            "seed": cfg.seed,
            "sample_index": i,
            "alpha0_eval": cfg.alpha0_eval,
            "T": cfg.sample_steps,
            "variant": cfg.variant,
            "nfe": stats.nfe,
            "tokens": [int(t) for t in tokens],
            "stats": stats_dict,
        }
        if tokenizer is not None:
            record["text"] = tokenizer.decode(tokens)
        records.append(_stamp(cfg, record))
    path = out / "samples.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    torch.set_num_threads(1)
    model = _load_model(cfg)
    dataset, _ = _load_training_data(cfg)
    if dataset.vocab != model.config.vocab:
        raise CheckpointError("corpus vocabulary does not match the checkpoint")
    examples = dataset.examples[: cfg.eval_examples]
    report = eval_nelbo(
        examples,
        model,
        LogLinearSchedule(cfg.alpha0_eval),
        cfg.variant,
        seed=cfg.seed,
        # evaluation uses the true schedule weights unless -1 is forced
        variance_reduced=cfg.variance_reduced == "true",
    )
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved("eval-ppl")
    record = _stamp(cfg, report.as_dict())
    (out / "eval-ppl.json").write_text(json.dumps(record, indent=1))
    print(json.dumps(record, indent=1))
    return 0


SIX_TOKENS_CLEAN = (0, 2, 5)
SIX_TOKENS_MASK = (1, 3, 4)
SIX_TOKENS_SIGMA = Ordering((2, 0, 5, 3, 4, 1))
SIX_TOKENS_SIGMA_SEQ = Ordering((2, 0, 5, 1, 3, 4))
WORKED_STEP = {
    "d_mdm": (2, 0, 5, 3, 6),
    "d_ar": (1,),
    "s_k": (4,),
    "sigma": Ordering((2, 0, 5, 3, 6, 1, 4, 7)),
}


def _inspect_instance(cfg: RunConfig, args):
    if args.example == "six-tokens":
        clean, mask = SIX_TOKENS_CLEAN, SIX_TOKENS_MASK
        sigma = SIX_TOKENS_SIGMA_SEQ if args.phase == "sequential" else SIX_TOKENS_SIGMA
        step = WORKED_STEP
    elif args.example == "worked-step":
        clean, mask, sigma, step = (), (), WORKED_STEP["sigma"], WORKED_STEP
    else:
        L = cfg.resolved_length()
        rng = stream(cfg.seed, "inspect")
        flags = rng.uniform(size=L) < 0.5
        clean = tuple(int(i) for i in np.flatnonzero(flags))
        mask = tuple(int(i) for i in np.flatnonzero(~flags))
        sampler = (
            sample_sequential_ordering if args.phase == "sequential" else sample_diffusion_ordering
        )
        sigma = sampler(clean, mask, rng)
        n_d = max(1, len(clean))
        order = sigma.perm
        step = {
            "d_mdm": order[: n_d - 1] if n_d > 1 else (),
            "d_ar": (),
            "s_k": (order[n_d - 1],),
            "sigma": sigma,
        }
    return clean, mask, sigma, step


def cmd_inspect(cfg: RunConfig, args) -> int:
    clean, mask, sigma, step = _inspect_instance(cfg, args)
    variant = cfg.variant
    if args.phase == "diffusion":
        bias = (
            bias_a_diffusion_train(clean, mask, sigma)
            if variant == "a"
            else bias_b_diffusion_train(sigma)
        )
    elif args.phase == "sequential":
        bias = (
            bias_a_sequential_train(clean, mask)
            if variant == "a"
            else bias_b_sequential_train(clean, mask, sigma)
        )
    else:
        builder = bias_a_sampling if variant == "a" else bias_b_sampling
        sigma = step["sigma"]
        bias = builder(step["d_mdm"], step["d_ar"], step["s_k"], sigma)
    sys.stdout.write(render(bias, sigma))
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    torch.set_num_threads(1)
    L = cfg.resolved_length()
    if cfg.checkpoint:
        model = _load_model(cfg)
    else:
        torch.manual_seed(cfg.seed)
        model = Denoiser(
            DenoiserConfig(
                vocab=Vocab.with_specials(30),
                layers=cfg.layers,
                model_dim=cfg.model_dim,
                heads=cfg.heads,
                max_positions=max(L, cfg.resolved_max_positions()),
            )
        )
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown bench mode {mode!r}")
    sched = build_schedule(
        L, cfg.sample_steps, LogLinearSchedule(cfg.alpha0_eval), stream(cfg.seed, "schedule")
    )
    lines = ["mode,L,T,alpha0,nfe,query_tokens,attention_pairs,wall_median_s,wall_std_s"]
    for mode in modes:
        predicted = predict_costs(CostModel(mode, L, sched))
        result = measure(model, sched, mode, stream(cfg.seed, "bench"), repeats=cfg.bench_repeats)
        median = 0.0 if cfg.deterministic else result.wall_median_s
        std = 0.0 if cfg.deterministic else result.wall_std_s
        lines.append(
            f"{mode},{L},{cfg.sample_steps},{cfg.alpha0_eval},{sched.nfe},"
            f"{predicted['query_tokens']},{predicted['attention_pairs']},"
            f"{median:.6f},{std:.6f}"
        )
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved("bench")
    csv_text = "\n".join(lines) + "\n"
    (out / "bench.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
