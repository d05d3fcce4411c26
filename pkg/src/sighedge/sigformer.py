"""
SigFormer: attention over streamed signatures, one encoder stack per signature level.

Pipeline for a feature series X_0..X_{n-1}:

    lift (prepend a zero row) -> prefix signatures up to depth N
    -> for each level i: flatten, embed to d_model, n_layers pre-norm encoder blocks
    -> concatenate the N level streams per token -> linear head -> hedge per token

Token k is built from the prefix X_0..X_k, so with causal masking the hedge at
date k only sees information available at t_k.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, NumericalError
from .signature import stream_signature


@dataclass(frozen=True)
class SigFormerConfig:
    sig_depth: int = 3
    n_layers: int = 5
    n_heads: int = 12
    d_model: int = 48
    d_ffn: int | None = None
    causal: bool = True
    positional_encoding: bool = False
    d_feat: int = 2
    d_hedge: int = 2

    def __post_init__(self):
        for name in ("sig_depth", "n_layers", "n_heads", "d_model", "d_feat", "d_hedge"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ffn is not None and self.d_ffn < 1:
            raise ConfigError("d_ffn must be positive")

    @property
    def ffn_width(self) -> int:
        return self.d_ffn if self.d_ffn is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


# -- building blocks --------------------------------------------------------------


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean ``(n, n)`` mask, True strictly above the diagonal."""
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


def attention_weights(q: torch.Tensor, k: torch.Tensor, causal: bool) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))`` with an optional causal mask."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if causal:
        logits = logits.masked_fill(causal_mask(q.shape[-2], q.device), float("-inf"))
    # softmax subtracts the row max internally
    return torch.softmax(logits, dim=-1)


def self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = False) -> torch.Tensor:
    return attention_weights(q, k, causal) @ v


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="none")


def ffn(x, w1, b1, w2, b2):
    return gelu(x @ w1.T + b1) @ w2.T + b2


def sinusoidal_encoding(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return pe.to(dtype)


def glorot_(weight: torch.Tensor) -> None:
    fan_out, fan_in = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.uniform_(-bound, bound)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, causal: bool = True):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.causal = causal
        self.w_q = nn.Parameter(torch.empty(d_model, d_model))
        self.w_k = nn.Parameter(torch.empty(d_model, d_model))
        self.w_v = nn.Parameter(torch.empty(d_model, d_model))
        self.w_o = nn.Parameter(torch.empty(d_model, d_model))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            glorot_(w)
        self.capture = False
        self.last_attention: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *batch, n, d = x.shape
        return x.reshape(*batch, n, self.n_heads, d // self.n_heads).transpose(-3, -2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.w_q.shape[0]:
            raise ValueError(f"expected width {self.w_q.shape[0]}, got {x.shape[-1]}")
        q = self._split(x @ self.w_q.T)
        k = self._split(x @ self.w_k.T)
        v = self._split(x @ self.w_v.T)
        if self.capture:
            att = attention_weights(q, k, self.causal)
            self.last_attention = att.detach()
            heads = att @ v
        else:
            # fused kernel, same softmax(q k^T / sqrt(d)) v
            heads = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        heads = heads.transpose(-3, -2)
        concat = heads.reshape(*heads.shape[:-2], -1)
        return concat @ self.w_o.T


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_ffn, d_model))
        self.b1 = nn.Parameter(torch.zeros(d_ffn))
        self.w2 = nn.Parameter(torch.empty(d_model, d_ffn))
        self.b2 = nn.Parameter(torch.zeros(d_model))
        glorot_(self.w1)
        glorot_(self.w2)

    def forward(self, x):
        return ffn(x, self.w1, self.b1, self.w2, self.b2)


class EncoderBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ffn: int, causal: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads, causal)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ffn)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class Encoder(nn.Module):
    """Linear embedding, optional sinusoidal positions, stacked blocks, final layer norm."""

    def __init__(self, d_in: int, d_model: int, n_layers: int, n_heads: int, d_ffn: int,
                 causal: bool = True, positional_encoding: bool = False, name: str = "encoder"):
        super().__init__()
        self.embed = nn.Linear(d_in, d_model)
        glorot_(self.embed.weight)
        nn.init.zeros_(self.embed.bias)
        self.blocks = nn.ModuleList(EncoderBlock(d_model, n_heads, d_ffn, causal) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.positional_encoding = positional_encoding
        self.name = name

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed(tokens)
        if self.positional_encoding:
            x = x + sinusoidal_encoding(x.shape[-2], x.shape[-1], x.dtype)
        for layer, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activation in {self.name} layer {layer}")
        return self.norm(x)


# -- SigFormer --------------------------------------------------------------------


def lift(features: np.ndarray) -> np.ndarray:
    """Prepend one all-zero row so every prefix X_0..X_k spans at least two points."""
    x = np.asarray(features, dtype=np.float64)
    pad = np.zeros(x.shape[:-2] + (1, x.shape[-1]))
    return np.concatenate([pad, x], axis=-2)


def signature_tokens(features, depth: int) -> list[np.ndarray]:
    """Per-level token streams ``(..., n_steps, dim**i)`` of the lifted feature path."""
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    return list(stream_signature(lift(features), depth).levels)


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


class SigFormer(nn.Module):
    def __init__(self, cfg: SigFormerConfig):
        super().__init__()
        self.cfg = cfg
        self.levels = nn.ModuleList(
            Encoder(cfg.d_feat**i, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.ffn_width,
                    cfg.causal, cfg.positional_encoding, name=f"level {i}")
            for i in range(1, cfg.sig_depth + 1)
        )
        self.head = nn.Linear(cfg.sig_depth * cfg.d_model, cfg.d_hedge)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def level_streams(self, features) -> list[torch.Tensor]:
        """Encoded stream of every level before concatenation."""
        dtype = _param_dtype(self)
        tokens = signature_tokens(features, self.cfg.sig_depth)
        return [enc(torch.as_tensor(tok, dtype=dtype)) for enc, tok in zip(self.levels, tokens)]

    def forward(self, features) -> torch.Tensor:
        out = self.head(torch.cat(self.level_streams(features), dim=-1))
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite activation in output head")
        return out


@dataclass
class AttentionMap:
    matrix: np.ndarray
    layer: int
    level: int
    head: int


def collect_attention(model: nn.Module, features) -> dict[tuple[int, int], np.ndarray]:
    """Run one forward pass and return ``{(layer, level): (..., heads, n, n)}``.

    Levels are 1-based; models without signature levels report level 1.
    """
    encoders = list(model.levels) if hasattr(model, "levels") else [model.encoder]
    attns = [blk.attn for enc in encoders for blk in enc.blocks]
    for a in attns:
        a.capture = True
    try:
        with torch.no_grad():
            model(features)
        out = {}
        for level, enc in enumerate(encoders, start=1):
            for layer, blk in enumerate(enc.blocks):
                out[(layer, level)] = blk.attn.last_attention.cpu().numpy().astype(np.float64)
        return out
    finally:
        for a in attns:
            a.capture = False
            a.last_attention = None


def attention_map(model: nn.Module, features, layer: int, level: int, head: int) -> AttentionMap:
    """Attention matrix of one head for a single feature series ``(n_steps, d_feat)``."""
    maps = collect_attention(model, features)
    n_layers = max(k[0] for k in maps) + 1
    n_levels = max(k[1] for k in maps)
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} outside 0..{n_layers - 1}")
    if not 1 <= level <= n_levels:
        raise IndexError(f"level {level} outside 1..{n_levels}")
    att = maps[(layer, level)]
    if not 0 <= head < att.shape[-3]:
        raise IndexError(f"head {head} outside 0..{att.shape[-3] - 1}")
    return AttentionMap(att[..., head, :, :], layer, level, head)
