"""Decoding path: path fusion, temporal feature pyramid, shared moment head, saliency head, NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

FUSIONS = ("add", "hadamard", "gate", "concat_mlp")


class ConfigError(ValueError):
    pass


class Fusion(nn.Module):
    def __init__(self, d: int, strategy: str = "add"):
        super().__init__()
        if strategy not in FUSIONS:
            raise ConfigError(f"unknown fusion strategy {strategy!r}; expected one of {FUSIONS}")
        self.strategy = strategy
        if strategy == "gate":
            self.gate = nn.Linear(2 * d, d)
        elif strategy == "concat_mlp":
            self.proj = nn.Linear(2 * d, d)

    def forward(self, v_s, v_p):
        if self.strategy == "add":
            return v_s + v_p
        if self.strategy == "hadamard":
            return v_s * v_p
        both = torch.cat([v_s, v_p], dim=-1)
        if self.strategy == "gate":
            sigma = torch.sigmoid(self.gate(both))
            return sigma * v_s + (1 - sigma) * v_p
        return self.proj(both)


def pyramid_lengths(T: int, num_levels: int) -> list[int]:
    lengths = [T]
    for _ in range(num_levels - 1):
        lengths.append(math.ceil(lengths[-1] / 2))
    return lengths


def downsample_mask(mask: torch.Tensor) -> torch.Tensor:
    """Strided any-pooling: a coarse position is valid if either of its two children is."""
    if mask.shape[1] % 2:
        mask = F.pad(mask, (0, 1), value=False)
    return mask.view(mask.shape[0], -1, 2).any(dim=-1)


class TemporalPyramid(nn.Module):
    def __init__(self, d: int, num_levels: int = 4):
        super().__init__()
        if num_levels < 1:
            raise ConfigError("num_levels must be >= 1")
        self.num_levels = num_levels
        self.convs = nn.ModuleList(
            nn.Conv1d(d, d, kernel_size=3, stride=1 if i == 0 else 2, padding=1) for i in range(num_levels)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(num_levels))

    def forward(self, f, clip_mask):
        """Returns lists of level features (B, T_l, d) and masks (B, T_l)."""
        T = f.shape[1]
        need = 2 ** (self.num_levels - 1)
        if T < need:
            raise ConfigError(f"{self.num_levels} pyramid levels need at least T={need} clips, got T={T}")
        levels, masks = [], []
        x, mask = f, clip_mask
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            if i:
                mask = downsample_mask(mask)
            x = norm(conv(x.transpose(1, 2)).transpose(1, 2)) * mask[..., None].to(f.dtype)
            levels.append(x)
            masks.append(mask)
        return levels, masks


class MomentHead(nn.Module):
    """One head shared by every level: a conv trunk, then a confidence logit and two boundary offsets."""

    def __init__(self, d: int):
        super().__init__()
        self.trunk = nn.Conv1d(d, d, kernel_size=3, padding=1)
        self.cls = nn.Conv1d(d, 1, kernel_size=3, padding=1)
        self.reg = nn.Conv1d(d, 2, kernel_size=3, padding=1)

    def forward(self, levels, masks):
        logits, offsets, centers, strides, level_idx, valid = [], [], [], [], [], []
        for i, (x, mask) in enumerate(zip(levels, masks)):
            # keep padded positions at zero so boundary convs see the same context as an unpadded clip
            h = F.gelu(self.trunk(x.transpose(1, 2))) * mask[:, None, :].to(x.dtype)
            logits.append(self.cls(h).squeeze(1))
            offsets.append(F.softplus(self.reg(h)).transpose(1, 2))
            n, stride = x.shape[1], 2 ** i
            centers.append((torch.arange(n, dtype=x.dtype, device=x.device) + 0.5) * stride)
            strides.append(torch.full((n,), float(stride), dtype=x.dtype, device=x.device))
            level_idx.append(torch.full((n,), i, dtype=torch.long, device=x.device))
            valid.append(mask)
        stride = torch.cat(strides)
        norm_offsets = torch.cat(offsets, dim=1)
        return RawMomentPredictions(
            logits=torch.cat(logits, dim=1),
            offsets_norm=norm_offsets,
            offsets=norm_offsets * stride[None, :, None],
            centers=torch.cat(centers),
            strides=stride,
            levels=torch.cat(level_idx),
            mask=torch.cat(valid, dim=1),
        )


@dataclass
class RawMomentPredictions:
    """Flattened per-position predictions over all pyramid levels; offsets in base-clip units."""

    logits: torch.Tensor  # (B, P)
    offsets_norm: torch.Tensor  # (B, P, 2), in units of the level stride
    offsets: torch.Tensor  # (B, P, 2)
    centers: torch.Tensor  # (P,)
    strides: torch.Tensor  # (P,)
    levels: torch.Tensor  # (P,)
    mask: torch.Tensor  # (B, P)

    def spans(self) -> torch.Tensor:
        return torch.stack([self.centers - self.offsets[..., 0], self.centers + self.offsets[..., 1]], dim=-1)


class SaliencyHead(nn.Module):
    """s_t = w . (f_t * g) / sqrt(d) + b with g = P_[EOS] + linear([EOS])."""

    def __init__(self, d: int):
        super().__init__()
        self.eos_proj = nn.Linear(d, d)
        self.score = nn.Linear(d, 1)

    def global_vector(self, p_eos, eos):
        return p_eos + self.eos_proj(eos)

    def forward(self, f, global_vec):
        return self.score(f * global_vec[:, None, :] / math.sqrt(f.shape[-1])).squeeze(-1)


@dataclass(frozen=True)
class MomentCandidate:
    start: float
    end: float
    confidence: float

    def seconds(self, num_clips: int, clip_seconds: float) -> tuple[float, float]:
        duration = num_clips * clip_seconds
        return self.start * duration, self.end * duration


def interval_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def nms(candidates: list[MomentCandidate], threshold: float = 0.7, top_k: int | None = None):
    """Greedy NMS; equal confidences keep the earlier start first."""
    if not 0 < threshold <= 1:
        raise ValueError("nms threshold must lie in (0, 1]")
    ranked = sorted(candidates, key=lambda c: (-c.confidence, c.start, c.end))
    kept: list[MomentCandidate] = []
    for cand in ranked:
        if all(interval_iou((cand.start, cand.end), (k.start, k.end)) <= threshold for k in kept):
            kept.append(cand)
            if top_k is not None and len(kept) >= top_k:
                break
    return kept


def decode_sample(spans, logits, valid, num_clips: int, nms_threshold: float = 0.7, top_k: int | None = 10):
    """Turns one sample's raw spans (P, 2) in clip units into normalized, NMS-filtered candidates."""
    conf = torch.sigmoid(logits).tolist()
    spans = spans.clamp(0, num_clips).tolist()
    valid = valid.tolist()
    cands = []
    for (s, e), c, ok in zip(spans, conf, valid):
        if ok and e > s:
            cands.append(MomentCandidate(s / num_clips, e / num_clips, c))
    return nms(cands, nms_threshold, top_k)


def decode_predictions(raw: RawMomentPredictions, num_clips, nms_threshold: float = 0.7, top_k: int | None = 10):
    """Per-sample candidate lists; ``num_clips`` gives each sample's unpadded length."""
    spans = raw.spans().detach()
    logits = raw.logits.detach()
    return [
        decode_sample(spans[b], logits[b], raw.mask[b], int(num_clips[b]), nms_threshold, top_k)
        for b in range(logits.shape[0])
    ]
