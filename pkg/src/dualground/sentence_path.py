"""Sentence-level branch: dummy-token encoder, adaptive cross attention on [EOS], clip self-attention."""
from __future__ import annotations

import math

import torch
from torch import nn

from .layers import TemporalEncoder, TransformerLayer, mlp


class DummyEncoder(nn.Module):
    """Contextualizes ``L_d`` learnable dummy tokens together with the sentence [EOS] embedding."""

    def __init__(self, d: int, heads: int, num_dummies: int = 3, num_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.num_dummies = num_dummies
        self.dummies = nn.Parameter(torch.randn(num_dummies, d) * d ** -0.5)
        self.layers = nn.ModuleList(TransformerLayer(d, heads, dropout) for _ in range(num_layers))

    def forward(self, eos: torch.Tensor) -> torch.Tensor:
        """Returns the key sequence ``[D'; eos]`` of shape (B, L_d + 1, d); the last row is ``eos`` itself."""
        if self.num_dummies == 0:
            return eos[:, None, :]
        x = torch.cat([self.dummies.expand(eos.shape[0], -1, -1), eos[:, None, :]], dim=1)
        for layer in self.layers:
            x = layer(x)
        return torch.cat([x[:, : self.num_dummies], eos[:, None, :]], dim=1)


class AdaptiveCrossAttention(nn.Module):
    """Clips attend over [dummies; EOS]; only the EOS value, scaled by its weight, is kept.

    Dummy keys compete in the softmax and so soak up attention from clips that do
    not match the sentence. Their values are projected but never read.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden size {d} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def logits(self, clips, keys):
        b, t, _ = clips.shape
        q = self.q_proj(clips).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keys).view(b, keys.shape[1], self.heads, self.head_dim).transpose(1, 2)
        return q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)

    def forward(self, clips, keys):
        """Returns (pre-residual output (B,T,d), per-head weights (B,H,T,K), alpha (B,T))."""
        b, t, d = clips.shape
        weights = self.logits(clips, keys).softmax(dim=-1)
        alpha_heads = weights[..., -1]
        u_eos = self.v_proj(keys[:, -1]).view(b, self.heads, 1, self.head_dim)
        out = (alpha_heads[..., None] * u_eos).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out), weights, alpha_heads.mean(dim=1)


class ACALayer(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.aca = AdaptiveCrossAttention(d, heads)
        self.ffn = mlp(d, 4 * d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, clips, keys):
        attended, weights, alpha = self.aca(clips, keys)
        x = self.norm1(clips + self.dropout(attended))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, weights, alpha


class SentencePath(nn.Module):
    def __init__(self, d: int, heads: int = 8, num_dummies: int = 3, enc_layers: int = 2,
                 aca_layers: int = 3, temporal_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.dummy_encoder = DummyEncoder(d, heads, num_dummies, enc_layers, dropout)
        self.aca_layers = nn.ModuleList(ACALayer(d, heads, dropout) for _ in range(aca_layers))
        self.temporal = TemporalEncoder(d, heads, temporal_layers, dropout)

    def align(self, video, eos, pos=None):
        """Runs the ACA stack; alpha and weights come from the last layer."""
        keys = self.dummy_encoder(eos)
        x = video if pos is None else video + pos
        weights = alpha = None
        for layer in self.aca_layers:
            x, weights, alpha = layer(x, keys)
        if alpha is None:
            alpha = torch.ones(video.shape[:2], dtype=video.dtype, device=video.device)
        return x, weights, alpha, keys

    def forward(self, video, clip_mask, eos, pos=None):
        attended, weights, alpha, keys = self.align(video, eos, pos)
        v_s = self.temporal(attended, clip_mask, pos)
        return {"v_s": v_s, "alpha": alpha * clip_mask.to(alpha.dtype), "aca_weights": weights, "keys": keys}
