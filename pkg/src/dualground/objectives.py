"""Training objectives: focal + L1 moment loss, four-part highlight loss, DQA, [EOS] reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_mr: float = 5.0
    lambda_hd: float = 1.0
    lambda_phrase: float = 1.0
    lambda_attn: float = 1.0
    r_dqa: float = 0.3
    tau: float = 0.07
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    rank_margin: float = 0.2
    max_rank_pairs: int = 64

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"loss.{f.name} must be positive")


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    hd_rank_s: torch.Tensor
    hd_contrast_s: torch.Tensor
    hd_rank_alpha: torch.Tensor
    hd_contrast_alpha: torch.Tensor
    dqa: torch.Tensor
    eos_recon: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def default_level_ranges(num_levels: int, base: float = 8.0) -> list[tuple[float, float]]:
    """Moment-length ranges (in base clips) handled by each level: (0, 8], (8, 16], ..., last unbounded."""
    ranges = []
    for i in range(num_levels):
        lo = 0.0 if i == 0 else base * 2 ** (i - 1)
        hi = math.inf if i == num_levels - 1 else base * 2 ** i
        ranges.append((lo, hi))
    return ranges


@dataclass
class MatchAssignment:
    positive: torch.Tensor  # (B, P) bool
    matched: torch.Tensor  # (B, P) long, -1 where negative
    targets: torch.Tensor  # (B, P, 2) center-to-boundary distances in base clips


def assign_targets(centers, levels, moments, level_ranges) -> MatchAssignment:
    """Label every pyramid position against the ground-truth moments of each sample.

    centers/levels: (P,) position centers in base clips and their level index.
    moments: per sample, a list of (start, end) in base-clip units.
    A position is positive when its center lies strictly inside a moment whose
    length falls in the position's level range; among several, the shortest wins.
    """
    lo = torch.tensor([r[0] for r in level_ranges], dtype=centers.dtype)[levels]
    hi = torch.tensor([r[1] for r in level_ranges], dtype=centers.dtype)[levels]
    B, P = len(moments), centers.shape[0]
    positive = torch.zeros(B, P, dtype=torch.bool)
    matched = torch.full((B, P), -1, dtype=torch.long)
    targets = torch.zeros(B, P, 2, dtype=centers.dtype)
    for b, spans in enumerate(moments):
        if not spans:
            continue
        m = torch.tensor(spans, dtype=centers.dtype)  # (M, 2)
        length = m[:, 1] - m[:, 0]
        inside = (centers[:, None] > m[None, :, 0]) & (centers[:, None] < m[None, :, 1])
        in_range = (length[None, :] > lo[:, None]) & (length[None, :] <= hi[:, None])
        ok = inside & in_range
        cost = torch.where(ok, length[None, :].expand(P, -1), torch.full_like(ok, math.inf, dtype=centers.dtype))
        best_cost, best = cost.min(dim=1)
        pos = torch.isfinite(best_cost)
        positive[b] = pos
        matched[b] = torch.where(pos, best, torch.full_like(best, -1))
        chosen = m[best]
        targets[b, :, 0] = torch.where(pos, centers - chosen[:, 0], torch.zeros_like(centers))
        targets[b, :, 1] = torch.where(pos, chosen[:, 1] - centers, torch.zeros_like(centers))
    return MatchAssignment(positive, matched, targets)


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss on logits."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def moment_loss(logits, offsets_norm, strides, valid, assign: MatchAssignment, weights: LossWeights):
    """(cls, reg): focal loss averaged over valid positions, L1 over positives in stride units."""
    target = assign.positive.to(logits.dtype)
    focal = sigmoid_focal_loss(logits, target, weights.focal_alpha, weights.focal_gamma)
    valid_f = valid.to(logits.dtype)
    cls = (focal * valid_f).sum() / valid_f.sum().clamp(min=1)
    pos = assign.positive & valid
    if not bool(pos.any()):
        return cls, logits.new_zeros(())
    reg_target = assign.targets / strides[None, :, None]
    reg = (offsets_norm[pos] - reg_target[pos]).abs().mean()
    return cls, reg


def rank_pairs(labels, mask, high: int = 3, low: int = 1, cap: int = 64):
    """All (high-label, low-label) clip index pairs in index order, truncated to ``cap``."""
    hi = [i for i in range(len(labels)) if mask[i] and labels[i] >= high]
    lo = [i for i in range(len(labels)) if mask[i] and labels[i] <= low]
    pairs = [(h, l) for h in hi for l in lo]
    return pairs[:cap]


def ranking_loss(scores, labels, mask, margin: float = 0.2, cap: int = 64):
    """Hinge ranking loss for one sample; returns (loss, degenerate) where degenerate means no pairs."""
    pairs = rank_pairs(labels.tolist(), mask.tolist(), cap=cap)
    if not pairs:
        return scores.new_zeros(()), True
    idx = torch.tensor(pairs)
    return F.relu(margin - (scores[idx[:, 0]] - scores[idx[:, 1]])).mean(), False


def contrastive_loss(scores, labels, mask, tau: float = 0.07):
    """InfoNCE with all max-label clips as the positive set: -log(sum_pos e^{s/tau} / sum_valid e^{s/tau})."""
    valid_labels = labels[mask]
    if valid_labels.numel() == 0 or bool((valid_labels == valid_labels[0]).all()):
        return scores.new_zeros(()), True
    positives = mask & (labels == valid_labels.max())
    logits = (scores / tau).masked_fill(~mask, float("-inf"))
    log_all = torch.logsumexp(logits, dim=0)
    log_pos = torch.logsumexp(logits.masked_fill(~positives, float("-inf")), dim=0)
    return log_all - log_pos, False


def highlight_loss(saliency, alpha, labels, mask, weights: LossWeights, has_labels=None):
    """Returns (rank_s, contrast_s, rank_alpha, contrast_alpha), each a batch mean over usable samples."""
    B = saliency.shape[0]
    out = []
    for scores in (saliency, alpha):
        ranks, contrasts = [], []
        for b in range(B):
            if has_labels is not None and not bool(has_labels[b]):
                continue
            r, r_deg = ranking_loss(scores[b], labels[b], mask[b], weights.rank_margin, weights.max_rank_pairs)
            c, c_deg = contrastive_loss(scores[b], labels[b], mask[b], weights.tau)
            if not r_deg:
                ranks.append(r)
            if not c_deg:
                contrasts.append(c)
        zero = saliency.new_zeros(())
        out.append(torch.stack(ranks).mean() if ranks else zero)
        out.append(torch.stack(contrasts).mean() if contrasts else zero)
    rank_s, contrast_s, rank_a, contrast_a = out
    return rank_s, contrast_s, rank_a, contrast_a


def dqa_loss(attn, r: float = 0.3):
    """Mean over the batch of ||A A^T - r I||_F^2 for phrase-to-word attention A (B, N, L)."""
    gram = attn @ attn.transpose(1, 2)
    eye = torch.eye(attn.shape[1], dtype=attn.dtype, device=attn.device)
    return ((gram - r * eye) ** 2).sum(dim=(1, 2)).mean()


def eos_recon_loss(p_eos, e_eos, tau: float = 0.07):
    """In-batch InfoNCE on cosine similarity between reconstructed and original [EOS] vectors."""
    if bool((p_eos.norm(dim=-1) == 0).any()) or bool((e_eos.norm(dim=-1) == 0).any()):
        raise ValueError("cosine similarity is undefined for zero vectors")
    sim = F.normalize(p_eos, dim=-1) @ F.normalize(e_eos, dim=-1).T / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    return F.cross_entropy(sim, target)


def total_loss(cls, reg, hd_rank_s, hd_contrast_s, hd_rank_alpha, hd_contrast_alpha, dqa, eos_recon,
               weights: LossWeights) -> LossBreakdown:
    hd = hd_rank_s + hd_contrast_s + weights.lambda_attn * (hd_rank_alpha + hd_contrast_alpha)
    total = weights.lambda_mr * (cls + reg) + weights.lambda_hd * hd + weights.lambda_phrase * (dqa + eos_recon)
    return LossBreakdown(cls, reg, hd_rank_s, hd_contrast_s, hd_rank_alpha, hd_contrast_alpha, dqa, eos_recon, total)
