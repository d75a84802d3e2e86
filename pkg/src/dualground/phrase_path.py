"""Phrase-level branch: recurrent phrase generation, slot refinement, global token, phrase-clip context."""
from __future__ import annotations

import math

import torch
from torch import nn

from .layers import TemporalEncoder, TransformerLayer, masked_softmax, mlp


def phrase_attention(guide, keys, word_mask):
    """Scaled dot-product weights of one guide vector per sample over its unmasked words.

    guide: (B, d); keys: (B, L, d); word_mask: (B, L) -> (B, L)
    """
    logits = torch.einsum("bd,bld->bl", guide, keys) / math.sqrt(keys.shape[-1])
    return masked_softmax(logits, word_mask)


class RecurrentPhraseGenerator(nn.Module):
    """Composes N phrases one after another, each guided by [EOS] and the previous phrase."""

    def __init__(self, d: int, num_phrases: int, max_words: int = 64):
        super().__init__()
        self.num_phrases = num_phrases
        self.word_pos = nn.Parameter(torch.randn(max_words, d) * 0.02)
        self.eos_proj = nn.ModuleList(nn.Linear(d, d, bias=False) for _ in range(num_phrases))
        self.phi = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, d), nn.GELU())

    def guide(self, step: int, eos, prev):
        return self.phi(torch.cat([self.eos_proj[step](eos), prev], dim=-1))

    def forward(self, words, word_mask, eos):
        """Returns phrases (B, N, d) and the soft word assignment A (B, N, L)."""
        if not bool(word_mask.any(dim=1).all()):
            raise ValueError("every query needs at least one unmasked word")
        keys = words + self.word_pos[: words.shape[1]]
        prev = torch.zeros_like(eos)
        phrases, rows = [], []
        for n in range(self.num_phrases):
            a = phrase_attention(self.guide(n, eos, prev), keys, word_mask)
            prev = torch.einsum("bl,bld->bd", a, words)
            phrases.append(prev)
            rows.append(a)
        return torch.stack(phrases, dim=1), torch.stack(rows, dim=1)


class SlotRefiner(nn.Module):
    """Slot attention seeded with the generated phrases; parameters are shared across iterations."""

    def __init__(self, d: int, iters: int = 2):
        super().__init__()
        self.iters = iters
        self.scale = d ** -0.5
        self.norm_inputs = nn.LayerNorm(d)
        self.norm_slots = nn.LayerNorm(d)
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(d, d, bias=False)
        self.to_v = nn.Linear(d, d, bias=False)
        self.update = mlp(d, d, d)

    def forward(self, slots, words, word_mask):
        """Returns refined slots and the last iteration's per-slot word weights (B, N, L)."""
        inputs = self.norm_inputs(words)
        k, v = self.to_k(inputs), self.to_v(inputs)
        keep = word_mask[:, None, :].to(words.dtype)
        attn = None
        for _ in range(self.iters):
            q = self.to_q(self.norm_slots(slots))
            logits = torch.einsum("bnd,bld->bnl", q, k) * self.scale
            # compete over slots for each word, then make each slot a weighted mean over words
            attn = logits.softmax(dim=1) * keep
            attn = attn / attn.sum(dim=-1, keepdim=True)
            slots = slots + self.update(torch.einsum("bnl,bld->bnd", attn, v))
        if attn is None:
            attn = torch.zeros(slots.shape[:2] + words.shape[1:2], dtype=words.dtype, device=words.device)
        return slots, attn


class GlobalReconstruction(nn.Module):
    """Appends a learnable global token to the phrases and runs one self-attention block."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.token = nn.Parameter(torch.randn(d) * d ** -0.5)
        self.block = TransformerLayer(d, heads, dropout)

    def forward(self, phrases):
        b = phrases.shape[0]
        x = torch.cat([phrases, self.token.expand(b, 1, -1)], dim=1)
        x = self.block(x)
        return x[:, :-1], x[:, -1]


class PhraseClipContext(nn.Module):
    """C = f_ctx(f_p(P) * f_v(V)) followed by clip-axis self-attention inside each phrase stream."""

    def __init__(self, d: int, heads: int, num_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.f_p = mlp(d, d, d)
        self.f_v = mlp(d, d, d)
        self.f_ctx = mlp(d, d, d)
        self.temporal = TemporalEncoder(d, heads, num_layers, dropout)

    def forward(self, phrases, video, clip_mask, pos=None):
        b, n, d = phrases.shape
        t = video.shape[1]
        ctx = self.f_ctx(self.f_p(phrases)[:, :, None, :] * self.f_v(video)[:, None, :, :])
        mask = clip_mask[:, None, :].expand(b, n, t).reshape(b * n, t)
        ctx = self.temporal(ctx.reshape(b * n, t, d), mask, pos)
        return ctx.view(b, n, t, d)


class PhraseAggregator(nn.Module):
    """Weights phrases by their match with the global token and sums the context over phrases."""

    def __init__(self, d: int):
        super().__init__()
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)

    def weights(self, phrases, token):
        logits = torch.einsum("bd,bnd->bn", self.w_q(token), self.w_k(phrases)) / math.sqrt(phrases.shape[-1])
        return logits.softmax(dim=-1)

    def forward(self, context, phrases, token):
        w = self.weights(phrases, token)
        return torch.einsum("bn,bntd->btd", w, context), w


class PhrasePath(nn.Module):
    def __init__(self, d: int, heads: int = 8, num_phrases: int = 4, slot_iters: int = 2,
                 temporal_layers: int = 2, max_words: int = 64, dropout: float = 0.0):
        super().__init__()
        self.generator = RecurrentPhraseGenerator(d, num_phrases, max_words)
        self.refiner = SlotRefiner(d, slot_iters)
        self.reconstruct = GlobalReconstruction(d, heads, dropout)
        self.context = PhraseClipContext(d, heads, temporal_layers, dropout)
        self.aggregate = PhraseAggregator(d)

    def forward(self, video, clip_mask, words, word_mask, eos, pos=None):
        initial, attn = self.generator(words, word_mask, eos)
        refined, slot_attn = self.refiner(initial, words, word_mask)
        phrases, p_eos = self.reconstruct(refined)
        ctx = self.context(phrases, video, clip_mask, pos)
        v_p, w = self.aggregate(ctx, phrases, p_eos)
        return {
            "v_p": v_p,
            "phrase_weights": w,
            "phrase_attn": attn,
            "slot_attn": slot_attn,
            "phrases": phrases,
            "p_eos": p_eos,
            "context": ctx,
        }
