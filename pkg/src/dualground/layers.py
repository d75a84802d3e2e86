"""Attention and transformer building blocks shared by both grounding paths."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax that puts exactly zero weight on positions where ``mask`` is False."""
    if mask is None:
        return logits.softmax(dim=dim)
    logits = logits.masked_fill(~mask, float("-inf"))
    weights = logits.softmax(dim=dim)
    # rows with no valid entry come out as NaN; they are never read downstream
    return weights.masked_fill(~mask, 0.0)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention that also returns the per-head weights."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden size {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = x.shape
        return x.transpose(1, 2).reshape(b, n, self.d)

    def forward(self, query, key, value, key_mask=None):
        q = self.split(self.q_proj(query))
        k = self.split(self.k_proj(key))
        v = self.split(self.v_proj(value))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        weights = masked_softmax(logits, mask)
        out = self.merge(self.dropout(weights) @ v)
        return self.out_proj(out), weights


class TransformerLayer(nn.Module):
    """Post-norm self-attention layer with a 4x GELU feed-forward block."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0, expansion: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ffn = mlp(d, expansion * d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        attended, _ = self.attn(x, x, x, key_mask)
        x = self.norm1(x + self.dropout(attended))
        return self.norm2(x + self.dropout(self.ffn(x)))

    @torch.no_grad()
    def zero_residual_branches(self):
        """Zero the attention and MLP outputs so only the residual path (and norms) remain."""
        for lin in (self.attn.out_proj, self.ffn[-1]):
            lin.weight.zero_()
            lin.bias.zero_()


class TemporalEncoder(nn.Module):
    """Stack of clip-axis self-attention layers; padded clips are never attended and output zero."""

    def __init__(self, d: int, heads: int, num_layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(d, heads, dropout) for _ in range(num_layers))

    def forward(self, x, mask, pos=None):
        if pos is not None:
            x = x + pos
        keep = mask[..., None].to(x.dtype)
        x = x * keep
        for layer in self.layers:
            x = layer(x, key_mask=mask) * keep
        return x


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps)
