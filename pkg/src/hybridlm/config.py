"""Run configuration: one flat key=value namespace shared by file and flags.

Precedence is defaults < config file < command-line overrides. Unknown
keys are rejected rather than silently ignored, and every run writes its
fully resolved configuration next to its outputs so artifacts can be
reproduced from the file alone.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

OUTPUT_ROOT_ENV = "HYBRIDLM_OUTPUT_ROOT"


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "a"
    alpha0_train: float = 1.0
    alpha0_eval: float = 1.0
    context_length: int = 32

    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    max_positions: int = 0  # 0: use context_length
    position_encoding: str = "rotary"
    dropout: float = 0.0

    train_steps: int = 200
    lr: float = 3e-4
    warmup: int = 100
    batch_size: int = 16
    mdm_fraction: float = 0.5
    variance_reduced: str = "auto"

    vocab_mode: str = "char"
    vocab_max_size: int = 0  # 0: unlimited

    corpus: str = ""
    checkpoint: str = ""
    output: str = "runs"

    num_samples: int = 1
    sample_steps: int = 16
    length: int = 0  # 0: use context_length
    nucleus: float = 0.0  # 0: disabled
    temperature: float = 1.0
    no_cache: bool = False
    deterministic: bool = False

    eval_examples: int = 256
    bench_repeats: int = 5

    def __post_init__(self) -> None:
        if self.variant not in ("a", "b"):
            raise ConfigError(f"variant must be a or b, got {self.variant!r}")
        for name in ("alpha0_train", "alpha0_eval"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.variance_reduced not in ("auto", "true", "false"):
            raise ConfigError("variance_reduced must be auto, true, or false")
        if self.vocab_mode not in ("char", "word"):
            raise ConfigError(f"vocab_mode must be char or word, got {self.vocab_mode!r}")

    # -- resolution -------------------------------------------------------

    @classmethod
    def resolve(cls, file_values: dict[str, str] | None = None, overrides: dict[str, object] | None = None) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for source in (file_values or {}, overrides or {}):
            for key, raw in source.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                if raw is None:
                    continue
                values[key] = _convert(key, raw, known[key])
        return cls(**values)

    def resolved_max_positions(self) -> int:
        return self.max_positions or self.context_length

    def resolved_length(self) -> int:
        return self.length or self.context_length

    def variance_reduced_flag(self, alpha0: float) -> bool:
        if self.variance_reduced == "auto":
            return alpha0 == 1.0
        return self.variance_reduced == "true"

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV, "")
        out = Path(root) / self.output if root else Path(self.output)
        return out

    def write_resolved(self, name: str) -> Path:
        out = self.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{name}-config.txt"
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key = value lines; '#' comments and blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _convert(key: str, raw: object, annotation: object) -> object:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    kind = str(annotation)
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc
