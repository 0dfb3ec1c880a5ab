"""Denoising transformer with pluggable attention biases and a position-keyed KV cache.

The network maps token ids to per-position next-token logits. Position
labels, not slot order, drive the positional encoding, so a subset of a
sequence can be processed with its original positions preserved. The
output head is zero-initialized: an untrained model is exactly the
uniform predictor over the vocabulary.

Two execution paths exist. The default batched path is fast and accurate
to float rounding. The deterministic path processes one row at a time so
that cached and uncached runs of the same computation produce bitwise
identical results (matrix kernels are not row-stable across batch
heights).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention_bias import AttentionBias
from .errors import CacheCoherenceError, CheckpointError, ConfigError, PreconditionError
from .masking import Vocab

CHECKPOINT_MAGIC = "HYBRIDLM-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    vocab: Vocab
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    max_positions: int = 1024
    position_encoding: str = "rotary"
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.position_encoding == "rotary" and (self.model_dim // self.heads) % 2 != 0:
            raise ConfigError("rotary encoding needs an even per-head dimension")
        if self.position_encoding not in ("rotary", "sinusoidal"):
            raise ConfigError(f"unknown position encoding {self.position_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


class KVCache:
    """Per-layer key/value store indexed by original sequence position.

    Entries are write-once per generation; a position's keys and values
    never change after they are stored. Single-writer: one cache belongs
    to one generation.
    """

    def __init__(self, config: DenoiserConfig, dtype: torch.dtype = torch.float32):
        shape = (config.max_positions, config.heads, config.head_dim)
        self.k = [torch.zeros(shape, dtype=dtype) for _ in range(config.layers)]
        self.v = [torch.zeros(shape, dtype=dtype) for _ in range(config.layers)]
        self.occupancy: set[int] = set()

    def store(self, position: int, layer_k: list[torch.Tensor], layer_v: list[torch.Tensor]) -> None:
        if position in self.occupancy:
            raise CacheCoherenceError(f"position {position} already cached (write-once)")
        for layer, (k, v) in enumerate(zip(layer_k, layer_v)):
            self.k[layer][position] = k
            self.v[layer][position] = v
        self.occupancy.add(position)


def _rotary_angles(positions: torch.Tensor, head_dim: int, dtype: torch.dtype):
    half = head_dim // 2
    inv_freq = 10000.0 ** (
        -torch.arange(half, dtype=torch.float64) * 2.0 / head_dim
    )
    angles = positions.to(torch.float64)[..., None] * inv_freq
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (..., heads, head_dim); cos/sin: (..., head_dim/2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    cos = cos.unsqueeze(-2)
    sin = sin.unsqueeze(-2)
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class _Block(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.model_dim
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc_in = nn.Linear(d, 4 * d)
        self.fc_out = nn.Linear(4 * d, d)
        self.drop = nn.Dropout(config.dropout)


class Denoiser(nn.Module):
    """Small transformer accepting arbitrary permit matrices and position labels."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d, k = config.model_dim, config.vocab.size
        self.tok_emb = nn.Embedding(k, d)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, k)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        if config.position_encoding == "sinusoidal":
            table = _sinusoidal_table(config.max_positions, d)
            self.register_buffer("pos_table", table, persistent=True)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    # -- input normalization ------------------------------------------------

    def _as_batch(self, tokens, positions, permit):
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        positions = torch.as_tensor(np.asarray(positions), dtype=torch.long)
        if isinstance(permit, AttentionBias):
            permit = permit.permit
        permit = torch.as_tensor(np.asarray(permit), dtype=torch.bool)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
            positions = positions[None]
        if permit.dim() == 2:
            permit = permit[None].expand(tokens.shape[0], -1, -1)
        if positions.dim() == 1:
            positions = positions[None].expand(tokens.shape[0], -1)
        if tokens.shape[1] != permit.shape[1] or permit.shape[1] != permit.shape[2]:
            raise PreconditionError(
                f"bias of side {tuple(permit.shape[1:])} does not match {tokens.shape[1]} tokens"
            )
        if positions.shape != tokens.shape:
            raise PreconditionError("one position label per token is required")
        if int(positions.max()) >= self.config.max_positions:
            raise PreconditionError("position label beyond max_positions")
        return tokens, positions, permit, squeeze

    def _embed(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        h = self.tok_emb(tokens)
        if self.config.position_encoding == "sinusoidal":
            h = h + self.pos_table.to(h.dtype)[positions]
        return h

    # -- fast batched path ----------------------------------------------------

    def forward(self, tokens, positions, bias, deterministic: bool = False) -> torch.Tensor:
        """Logits for every slot; blocked columns cannot influence a query.

        Rows whose permit set is empty produce finite but unspecified
        logits; such rows are never consumed by the losses or samplers.
        """
        if deterministic:
            return self._forward_rows(tokens, positions, bias)
        tokens, positions, permit, squeeze = self._as_batch(tokens, positions, bias)
        h = self._embed(tokens, positions)
        cfg = self.config
        cos, sin = _rotary_angles(positions, cfg.head_dim, h.dtype)
        B, T, _ = h.shape
        neg = torch.finfo(h.dtype).min / 2
        for block in self.blocks:
            x = block.ln1(h)
            q, k, v = block.qkv(x).chunk(3, dim=-1)
            q = q.view(B, T, cfg.heads, cfg.head_dim)
            k = k.view(B, T, cfg.heads, cfg.head_dim)
            v = v.view(B, T, cfg.heads, cfg.head_dim)
            if cfg.position_encoding == "rotary":
                q = _apply_rotary(q, cos, sin)
                k = _apply_rotary(k, cos, sin)
            scores = torch.einsum("bqhd,bkhd->bhqk", q, k) / math.sqrt(cfg.head_dim)
            scores = scores.masked_fill(~permit[:, None], neg)
            attn = torch.softmax(scores, dim=-1)
            out = torch.einsum("bhqk,bkhd->bqhd", attn, v).reshape(B, T, -1)
            h = h + block.drop(block.proj(out))
            h = h + block.drop(block.fc_out(F.gelu(block.fc_in(block.ln2(h)))))
        logits = self.head(self.ln_f(h))
        return logits[0] if squeeze else logits

    # -- deterministic per-row path -------------------------------------------

    def _row_kv(self, block: _Block, h_row: torch.Tensor, position: int):
        cfg = self.config
        x = block.ln1(h_row[None])
        q, k, v = block.qkv(x)[0].chunk(3, dim=-1)
        q = q.view(cfg.heads, cfg.head_dim)
        k = k.view(cfg.heads, cfg.head_dim)
        v = v.view(cfg.heads, cfg.head_dim)
        if cfg.position_encoding == "rotary":
            pos = torch.tensor(position, dtype=torch.long)
            cos, sin = _rotary_angles(pos, cfg.head_dim, h_row.dtype)
            q = _apply_rotary(q, cos, sin)
            k = _apply_rotary(k, cos, sin)
        return q, k, v

    def _row_attend(self, block: _Block, h_row, q, keys, values):
        cfg = self.config
        if keys is None:
            out = torch.zeros_like(h_row)
        else:
            scores = torch.einsum("hd,khd->hk", q, keys) / math.sqrt(cfg.head_dim)
            attn = torch.softmax(scores, dim=-1)
            out = torch.einsum("hk,khd->hd", attn, values).reshape(-1)
        h_row = h_row + block.proj(out[None])[0]
        h_row = h_row + block.fc_out(F.gelu(block.fc_in(block.ln2(h_row[None]))))[0]
        return h_row

    def _forward_rows(self, tokens, positions, bias) -> torch.Tensor:
        """Row-at-a-time forward: bitwise reproducible for any row subset.

        Keys for each query are gathered in slot order, so runs over any
        superset of rows agree exactly on shared rows as long as the
        permitted key sets match.
        """
        tokens, positions, permit, squeeze = self._as_batch(tokens, positions, bias)
        if tokens.shape[0] != 1:
            raise PreconditionError("deterministic path expects a single sequence")
        tokens, positions, permit = tokens[0], positions[0], permit[0]
        n = tokens.shape[0]
        h = [self._embed(tokens[i : i + 1][None], positions[i : i + 1][None])[0, 0] for i in range(n)]
        for block in self.blocks:
            qkv = [self._row_kv(block, h[i], int(positions[i])) for i in range(n)]
            new_h = []
            for i in range(n):
                cols = torch.nonzero(permit[i], as_tuple=False).flatten().tolist()
                if cols:
                    keys = torch.stack([qkv[j][1] for j in cols])
                    values = torch.stack([qkv[j][2] for j in cols])
                else:
                    keys = values = None
                new_h.append(self._row_attend(block, h[i], qkv[i][0], keys, values))
            h = new_h
        logits = torch.stack([self.head(self.ln_f(r[None]))[0] for r in h])
        return logits if squeeze else logits[None]

    # -- incremental (cached) path ----------------------------------------------

    def forward_cached(
        self,
        new_tokens,
        new_positions,
        bias: AttentionBias,
        cache: KVCache,
        store: tuple[int, ...] = (),
        deterministic: bool = False,
    ) -> torch.Tensor:
        """Logits for the new rows only, attending cached and new keys.

        `bias` is the compacted step bias over all active positions
        (cached plus new); rows for the new positions are taken from it.
        Keys and values for `store` positions are appended to the cache
        after the pass. Equals forward() over the active set restricted
        to the same rows.
        """
        new_positions = [int(p) for p in new_positions]
        new_set = set(new_positions)
        if new_set & cache.occupancy:
            raise CacheCoherenceError("new positions overlap cached positions")
        active = set(bias.positions)
        if not active <= (cache.occupancy | new_set):
            missing = sorted(active - cache.occupancy - new_set)
            raise CacheCoherenceError(f"bias references uncached positions {missing}")
        if not set(store) <= new_set:
            raise PreconditionError("can only cache positions computed this pass")

        key_positions = list(bias.positions)  # sorted ascending by construction
        slot_of = {p: i for i, p in enumerate(key_positions)}
        n_new = len(new_positions)
        tokens = torch.as_tensor(np.asarray(new_tokens), dtype=torch.long)
        rows = [slot_of[p] for p in new_positions]
        permit_new = torch.as_tensor(bias.permit[rows], dtype=torch.bool)

        cfg = self.config
        pos_t = torch.as_tensor(new_positions, dtype=torch.long)
        if int(pos_t.max()) >= cfg.max_positions:
            raise PreconditionError("position label beyond max_positions")
        new_slot = {p: i for i, p in enumerate(new_positions)}

        if deterministic:
            h = [self._embed(tokens[i : i + 1][None], pos_t[i : i + 1][None])[0, 0] for i in range(n_new)]
        else:
            h = self._embed(tokens[None], pos_t[None])[0]
        kp_tensor = torch.as_tensor(key_positions, dtype=torch.long)
        new_slots = torch.as_tensor(rows, dtype=torch.long)
        store_k: dict[int, list] = {p: [] for p in store}
        store_v: dict[int, list] = {p: [] for p in store}

        for layer, block in enumerate(self.blocks):
            if deterministic:
                qkv = [self._row_kv(block, h[i], int(pos_t[i])) for i in range(n_new)]
                new_k = [k for _, k, _ in qkv]
                new_v = [v for _, _, v in qkv]
            else:
                x = block.ln1(h)
                q, k, v = block.qkv(x).chunk(3, dim=-1)
                q = q.view(n_new, cfg.heads, cfg.head_dim)
                k = k.view(n_new, cfg.heads, cfg.head_dim)
                v = v.view(n_new, cfg.heads, cfg.head_dim)
                if cfg.position_encoding == "rotary":
                    cos, sin = _rotary_angles(pos_t, cfg.head_dim, h.dtype)
                    q = _apply_rotary(q, cos, sin)
                    k = _apply_rotary(k, cos, sin)
                new_k, new_v = k, v

            def key_at(j: int):
                p = key_positions[j]
                if p in new_set:
                    return new_k[new_slot[p]], new_v[new_slot[p]]
                return cache.k[layer][p], cache.v[layer][p]

            if deterministic:
                new_h = []
                for i in range(n_new):
                    cols = torch.nonzero(permit_new[i]).flatten().tolist()
                    if cols:
                        pairs = [key_at(j) for j in cols]
                        keys = torch.stack([kk for kk, _ in pairs])
                        values = torch.stack([vv for _, vv in pairs])
                    else:
                        keys = values = None
                    new_h.append(self._row_attend(block, h[i], qkv[i][0], keys, values))
                h = new_h
            else:
                # vectorized gather: cached rows come from the position-indexed
                # buffers; rows for new positions are overwritten in place
                all_k = cache.k[layer][kp_tensor].clone()
                all_v = cache.v[layer][kp_tensor].clone()
                all_k[new_slots] = new_k
                all_v[new_slots] = new_v
                scores = torch.einsum("qhd,khd->hqk", q, all_k) / math.sqrt(cfg.head_dim)
                neg = torch.finfo(h.dtype).min / 2
                scores = scores.masked_fill(~permit_new[None], neg)
                attn = torch.softmax(scores, dim=-1)
                out = torch.einsum("hqk,khd->qhd", attn, all_v).reshape(n_new, -1)
                h = h + block.proj(out)
                h = h + block.fc_out(F.gelu(block.fc_in(block.ln2(h))))

            for p in store:
                i = new_slot[p]
                store_k[p].append(new_k[i].detach().clone())
                store_v[p].append(new_v[i].detach().clone())

        for p in store:
            cache.store(p, store_k[p], store_v[p])

        if deterministic:
            return torch.stack([self.head(self.ln_f(r[None]))[0] for r in h])
        return self.head(self.ln_f(h))


def _sinusoidal_table(max_positions: int, dim: int) -> torch.Tensor:
    pos = torch.arange(max_positions, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / dim))
    table = torch.zeros(max_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.to(torch.float32)


def parameter_gradients(loss: torch.Tensor, model: Denoiser) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of the scalar loss for all weights.

    Parameters the loss does not depend on get zero gradients.
    """
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    return grads


# -- checkpoint container -------------------------------------------------------


def _config_items(config: DenoiserConfig) -> list[tuple[str, str]]:
    return [
        ("layers", str(config.layers)),
        ("model_dim", str(config.model_dim)),
        ("heads", str(config.heads)),
        ("vocab_size", str(config.vocab.size)),
        ("mask_id", str(config.vocab.mask_id)),
        ("separator_id", str(config.vocab.separator_id)),
        ("max_positions", str(config.max_positions)),
        ("position_encoding", config.position_encoding),
        ("dropout", repr(config.dropout)),
    ]


def _config_from_items(items: dict[str, str]) -> DenoiserConfig:
    vocab = Vocab(
        size=int(items["vocab_size"]),
        mask_id=int(items["mask_id"]),
        separator_id=int(items["separator_id"]),
    )
    return DenoiserConfig(
        vocab=vocab,
        layers=int(items["layers"]),
        model_dim=int(items["model_dim"]),
        heads=int(items["heads"]),
        max_positions=int(items["max_positions"]),
        position_encoding=items["position_encoding"],
        dropout=float(items["dropout"]),
    )


def save_checkpoint(model: Denoiser, path: str, extra: dict[str, str] | None = None) -> None:
    """Write the versioned container: text header, then named float32 tensors.

    `extra` adds provenance header keys (config hash, code version); the
    loader ignores keys it does not recognize.
    """
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n".encode())
        f.write(f"version={CHECKPOINT_VERSION}\n".encode())
        for key, value in _config_items(model.config):
            f.write(f"{key}={value}\n".encode())
        for key, value in (extra or {}).items():
            f.write(f"{key}={value}\n".encode())
        f.write(f"tensors={len(state)}\n".encode())
        f.write(b"---\n")
        for name, tensor in state.items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4"))
            f.write(f"{name}\n".encode())
            f.write((" ".join(str(d) for d in arr.shape) or "-") .encode())
            f.write(b"\n")
            f.write(arr.tobytes())


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> Denoiser:
    """Rebuild a model from the container; wrong magic or version fails loudly."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)

    def line() -> str:
        return buf.readline().decode().rstrip("\n")

    if line() != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version_line = line()
    if version_line != f"version={CHECKPOINT_VERSION}":
        raise CheckpointError(
            f"{path}: unsupported checkpoint {version_line!r}, expected version={CHECKPOINT_VERSION}"
        )
    items: dict[str, str] = {}
    n_tensors = None
    while True:
        text = line()
        if text == "---":
            break
        if not text:
            raise CheckpointError(f"{path}: truncated header")
        key, _, value = text.partition("=")
        if key == "tensors":
            n_tensors = int(value)
        else:
            items[key] = value
    if n_tensors is None:
        raise CheckpointError(f"{path}: missing tensor count")

    state = {}
    for _ in range(n_tensors):
        name = line()
        shape_text = line()
        shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split())
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(dtype)

    model = Denoiser(_config_from_items(items)).to(dtype)
    model.load_state_dict(state, strict=True)
    return model
