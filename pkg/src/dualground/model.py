"""The dual-path grounding model: sentence path + phrase path -> fusion -> pyramid heads."""
from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig, TOKEN_CONDITIONS
from .grounding_head import Fusion, MomentHead, SaliencyHead, TemporalPyramid, decode_predictions
from .objectives import (LossBreakdown, LossWeights, assign_targets, default_level_ranges, dqa_loss,
                         eos_recon_loss, highlight_loss, moment_loss, total_loss)
from .phrase_path import PhrasePath
from .sentence_path import SentencePath


def apply_token_condition(words, word_mask, eos, mode: str):
    """Restricts the text input to one token role.

    word_only: every [EOS] use is replaced by the masked mean of the word tokens.
    eos_only: the word sequence becomes the single [EOS] embedding.
    """
    if mode == "full":
        return words, word_mask, eos
    if mode == "word_only":
        keep = word_mask[..., None].to(words.dtype)
        return words, word_mask, (words * keep).sum(1) / keep.sum(1).clamp(min=1)
    if mode == "eos_only":
        mask = torch.zeros_like(word_mask)
        mask[:, 0] = True
        return eos[:, None, :].expand(-1, word_mask.shape[1], -1) * mask[..., None], mask, eos
    raise ValueError(f"unknown token condition {mode!r}; expected one of {TOKEN_CONDITIONS}")


class DualGround(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        in_dim = cfg.input_dim or d
        self.token_condition = cfg.token_condition
        self.video_in = nn.Linear(in_dim, d)
        self.text_in = nn.Linear(in_dim, d)
        self.clip_pos = nn.Parameter(torch.randn(cfg.max_clips, d) * 0.02)
        self.sentence = SentencePath(d, cfg.heads, cfg.L_d, cfg.layers.d_enc, cfg.layers.aca,
                                     cfg.layers.s_enc, cfg.dropout)
        self.phrase = PhrasePath(d, cfg.heads, cfg.N, cfg.layers.p_sa, cfg.layers.p_enc,
                                 cfg.max_words, cfg.dropout)
        self.fusion = Fusion(d, cfg.fusion)
        self.pyramid = TemporalPyramid(d, cfg.pyramid_levels)
        self.moment_head = MomentHead(d)
        self.saliency_head = SaliencyHead(d)
        self.level_ranges = default_level_ranges(cfg.pyramid_levels, cfg.level_base)

    def forward(self, batch, token_condition: str | None = None) -> dict:
        mode = token_condition or self.token_condition
        words, word_mask, eos = apply_token_condition(batch["words"], batch["word_mask"], batch["eos"], mode)
        clip_mask = batch["clip_mask"]
        T = clip_mask.shape[1]
        video = self.video_in(batch["video"])
        words = self.text_in(words)
        eos = self.text_in(eos)
        pos = self.clip_pos[:T]

        sent = self.sentence(video, clip_mask, eos, pos)
        phr = self.phrase(video, clip_mask, words, word_mask, eos, pos)
        f = self.fusion(sent["v_s"], phr["v_p"]) * clip_mask[..., None].to(video.dtype)
        levels, masks = self.pyramid(f, clip_mask)
        raw = self.moment_head(levels, masks)
        saliency = self.saliency_head(f, self.saliency_head.global_vector(phr["p_eos"], eos))
        return {
            "raw": raw,
            "saliency": saliency.masked_fill(~clip_mask, 0.0),
            "alpha": sent["alpha"],
            "aca_weights": sent["aca_weights"],
            "v_s": sent["v_s"],
            "v_p": phr["v_p"],
            "fused": f,
            "phrase_attn": phr["phrase_attn"],
            "slot_attn": phr["slot_attn"],
            "phrase_weights": phr["phrase_weights"],
            "p_eos": phr["p_eos"],
            "e_eos": eos,
            "word_mask": word_mask,
        }

    def losses(self, out: dict, batch: dict, weights: LossWeights) -> LossBreakdown:
        raw = out["raw"]
        num_clips = batch["num_clips"]
        moments = [[(s * int(n), e * int(n)) for s, e in spans] for spans, n in zip(batch["moments"], num_clips)]
        assign = assign_targets(raw.centers, raw.levels, moments, self.level_ranges)
        assign.targets = assign.targets.to(raw.logits.dtype)
        cls, reg = moment_loss(raw.logits, raw.offsets_norm, raw.strides, raw.mask, assign, weights)
        hd = highlight_loss(out["saliency"], out["alpha"], batch["saliency"], batch["clip_mask"], weights,
                            batch.get("has_saliency"))
        dqa = dqa_loss(out["phrase_attn"], weights.r_dqa)
        eos = eos_recon_loss(out["p_eos"], out["e_eos"], weights.tau)
        return total_loss(cls, reg, *hd, dqa, eos, weights)

    @torch.no_grad()
    def predict(self, batch, nms_threshold: float = 0.7, top_k: int | None = 10, token_condition=None):
        """Returns (candidate lists, saliency lists) for every sample, cut to its unpadded length."""
        out = self(batch, token_condition)
        cands = decode_predictions(out["raw"], batch["num_clips"], nms_threshold, top_k)
        sal = [out["saliency"][b, : int(n)].tolist() for b, n in enumerate(batch["num_clips"])]
        return cands, sal, out

    @torch.no_grad()
    def diagnostic_attention(self, batch, token_condition=None):
        """Full-token cross-attention maps for the token-dependency analysis.

        The production model never lets clips attend to word tokens, so this
        extends the first ACA layer's keys with the words: keys are
        [dummies; words; EOS], softmax over all keys, mean over heads. Returns
        per-sample arrays of shape (num_words + 1, num_clips) with the [EOS]
        row last; dummy rows are dropped.
        """
        mode = token_condition or self.token_condition
        words, word_mask, eos = apply_token_condition(batch["words"], batch["word_mask"], batch["eos"], mode)
        clip_mask = batch["clip_mask"]
        video = self.video_in(batch["video"]) + self.clip_pos[: clip_mask.shape[1]]
        words, eos = self.text_in(words), self.text_in(eos)
        keys = self.sentence.dummy_encoder(eos)
        n_dummy = keys.shape[1] - 1
        full = torch.cat([keys[:, :n_dummy], words, keys[:, -1:]], dim=1)
        key_mask = torch.cat([
            torch.ones(words.shape[0], n_dummy, dtype=torch.bool), word_mask,
            torch.ones(words.shape[0], 1, dtype=torch.bool)], dim=1)
        if not len(self.sentence.aca_layers):
            raise ValueError("diagnostic attention needs at least one ACA layer")
        aca = self.sentence.aca_layers[0].aca
        logits = aca.logits(video, full).masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1).mean(dim=1)  # (B, T, K)
        maps = []
        for b in range(attn.shape[0]):
            n_words = int(word_mask[b].sum())
            t = int(clip_mask[b].sum())
            rows = attn[b, :t, n_dummy: n_dummy + n_words].T
            maps.append(torch.cat([rows, attn[b, :t, -1:].T], dim=0).numpy())
        return maps
