"""A tiny decoder-only transformer for offline smoke-scale fine-tuning.

Construction is fully local (no model hub): embeddings, pre-norm causal
self-attention blocks with rotary position encoding, and a language-model
head tied to the token embedding. Rotary encoding makes relative attention
patterns (previous-token heads, copy heads) learnable quickly, which small
models need. Attention projections are named q_proj/k_proj/v_proj/o_proj
so adapter injection can target them by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class TinyDecoderConfig:
    vocab_size: int
    d_model: int = 96
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 192
    max_seq: int = 256
    dropout: float = 0.0


def _rotary_tables(head_dim: int, max_seq: int) -> tuple[torch.Tensor, torch.Tensor]:
    half = head_dim // 2
    freqs = 1.0 / (10000 ** (torch.arange(half, dtype=torch.float32) / half))
    angles = torch.arange(max_seq, dtype=torch.float32)[:, None] * freqs[None, :]
    return torch.cos(angles), torch.sin(angles)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (batch, heads, seq, head_dim); tables: (seq, head_dim/2)
    x1, x2 = x.chunk(2, dim=-1)
    cos = cos[None, None, : x.shape[2]]
    sin = sin[None, None, : x.shape[2]]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: TinyDecoderConfig):
        super().__init__()
        if config.d_model % config.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        if self.head_dim % 2:
            raise ValueError("head dim must be even for rotary encoding")
        self.q_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.k_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.v_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.o_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        cos, sin = _rotary_tables(self.head_dim, config.max_seq)
        self.register_buffer("rot_cos", cos, persistent=False)
        self.register_buffer("rot_sin", sin, persistent=False)

    def forward(self, hidden: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        bsz, seq, dim = hidden.shape

        def split(proj):
            return proj(hidden).view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)

        q = _apply_rotary(split(self.q_proj), self.rot_cos, self.rot_sin)
        k = _apply_rotary(split(self.k_proj), self.rot_cos, self.rot_sin)
        v = split(self.v_proj)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=hidden.device), 1)
        scores = scores.masked_fill(causal, float("-inf"))
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, seq, dim)
        return self.o_proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, config: TinyDecoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU(),
            nn.Linear(config.d_ff, config.d_model),
        )

    def forward(self, hidden: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        hidden = hidden + self.attn(self.ln1(hidden), pad_mask)
        return hidden + self.mlp(self.ln2(hidden))


class TinyDecoder(nn.Module):
    def __init__(self, config: TinyDecoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)

    def forward(self, input_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        seq = input_ids.shape[1]
        if seq > self.config.max_seq:
            raise ValueError(f"sequence length {seq} exceeds max_seq {self.config.max_seq}")
        hidden = self.tok_emb(input_ids)
        for block in self.blocks:
            hidden = block(hidden, pad_mask)
        hidden = self.ln_f(hidden)
        return hidden @ self.tok_emb.weight.T  # tied head
