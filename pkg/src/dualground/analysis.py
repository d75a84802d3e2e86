"""Token-dependency analysis: [EOS]/word attention correlation, token-condition runs, diagnostic plots."""
from __future__ import annotations

import json
import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .evaluation import MetricReport, write_report

log = logging.getLogger(__name__)


class UndefinedCorrelation(ValueError):
    pass


def pearson(x, y) -> float:
    """Sample Pearson r. r^2 is formed in exact rational arithmetic, so |r| <= 1 holds without clamping."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two 1-D vectors of equal length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation is undefined for a constant vector")
    fx, fy = [Fraction(v) for v in x.tolist()], [Fraction(v) for v in y.tolist()]
    mx, my = sum(fx) / len(fx), sum(fy) / len(fy)
    dx, dy = [v - mx for v in fx], [v - my for v in fy]
    sxy = sum(a * b for a, b in zip(dx, dy))
    r2 = sxy * sxy / (sum(a * a for a in dx) * sum(b * b for b in dy))
    return math.copysign(math.sqrt(float(r2)), sxy) if sxy else 0.0


def spearman(x, y) -> float:
    """Rank correlation; tie-free inputs use 1 - 6 sum d^2 / (n (n^2 - 1)), ties fall back to Pearson on average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two 1-D vectors of equal length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation is undefined for a constant vector")
    rx, ry = rankdata(x), rankdata(y)
    n = len(x)
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rx - ry
        return float(1 - 6 * np.dot(d, d) / (n * (n * n - 1)))
    return pearson(rx, ry)


@dataclass
class CorrelationReport:
    mean_pearson: float
    mean_spearman: float
    per_sample: list = field(default_factory=list)
    split: str = ""
    skipped: int = 0

    def to_dict(self):
        return asdict(self)


def correlation_from_maps(maps, query_ids, split: str = "") -> CorrelationReport:
    """Per map (words + [EOS] rows by clips, [EOS] last): correlate each word row with the [EOS] row,
    average over words, then over samples."""
    per_sample, skipped = [], 0
    for qid, a in zip(query_ids, maps):
        a = np.asarray(a, dtype=float)
        if a.shape[1] < 2 or a.shape[0] < 2:
            skipped += 1
            continue
        eos = a[-1]
        try:
            ps = [pearson(row, eos) for row in a[:-1]]
            ss = [spearman(row, eos) for row in a[:-1]]
        except UndefinedCorrelation:
            skipped += 1
            continue
        per_sample.append((qid, math.fsum(ps) / len(ps), math.fsum(ss) / len(ss)))
    if not per_sample:
        return CorrelationReport(float("nan"), float("nan"), [], split, skipped)
    return CorrelationReport(
        mean_pearson=math.fsum(p for _, p, _ in per_sample) / len(per_sample),
        mean_spearman=math.fsum(s for _, _, s in per_sample) / len(per_sample),
        per_sample=per_sample,
        split=split,
        skipped=skipped,
    )


def eos_word_attention_correlation(model, dataset, split: str = "val", batch_size: int = 32) -> CorrelationReport:
    """``model`` must provide ``diagnostic_attention(batch)`` returning per-sample (words+1, clips) maps."""
    from .data_io import collate

    maps, qids = [], []
    samples = list(dataset)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        batch = collate(chunk)
        maps.extend(model.diagnostic_attention(batch))
        qids.extend(batch["query_ids"])
    return correlation_from_maps(maps, qids, split)


def write_correlation_report(path, report: CorrelationReport):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def run_token_condition(model, dataset, mode: str, eval_cfg, out_dir=None, run_id: str = "run") -> MetricReport:
    """Evaluates ``model`` with the text input restricted to ``mode``; writes ``<run_id>_<mode>_report.json``."""
    from .training import evaluate_model

    report, _ = evaluate_model(model, dataset, eval_cfg, token_condition=mode)
    report.meta["token_condition"] = mode
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / f"{run_id}_{mode}_report.json", report)
    return report


# ---------------------------------------------------------------------------
# plots

FIGURES = ("moments", "saliency", "phrase_norm", "sentence_norm", "phrase_attention")


def emit_plots(artifacts: dict, out_dir, run_id: str = "run") -> list[Path]:
    """Writes up to five PNGs for one sample; missing artifacts skip their figure with a warning.

    artifacts keys: moments [(s, e, conf)], gt_moments [(s, e)], saliency (T,),
    labels (T,), v_p (T, d), v_s (T, d), phrase_attention (N, L).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = out / f"{run_id}_{name}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    def missing(name, keys):
        absent = [k for k in keys if artifacts.get(k) is None]
        if absent:
            log.warning("skipping %s plot: missing %s", name, ", ".join(absent))
        return bool(absent)

    if not missing("moments", ["moments"]):
        fig, ax = plt.subplots(figsize=(8, 2))
        for k, (s, e, c) in enumerate(artifacts["moments"][:5]):
            ax.barh(k, e - s, left=s, color="tab:blue", alpha=0.3 + 0.7 * c)
            ax.text(e, k, f" {c:.2f}", va="center", fontsize=7)
        for s, e in artifacts.get("gt_moments") or []:
            ax.axvspan(s, e, color="tab:green", alpha=0.2)
        ax.set_xlim(0, 1)
        ax.set_xlabel("normalized time")
        ax.set_ylabel("rank")
        ax.set_title("moment predictions (green: ground truth)")
        save(fig, "moments")

    if not missing("saliency", ["saliency"]):
        fig, ax = plt.subplots(figsize=(8, 2))
        sal = np.asarray(artifacts["saliency"])
        ax.plot(sal, label="predicted")
        if artifacts.get("labels") is not None:
            ax2 = ax.twinx()
            ax2.step(np.arange(len(sal)), artifacts["labels"], where="mid", color="tab:orange", label="label")
            ax2.set_ylim(-0.2, 4.2)
        ax.set_xlabel("clip")
        ax.set_title("highlight scores")
        save(fig, "saliency")

    for name, key, title in (("phrase_norm", "v_p", "phrase-level"), ("sentence_norm", "v_s", "sentence-level")):
        if missing(name, [key]):
            continue
        norms = np.linalg.norm(np.asarray(artifacts[key], dtype=float), axis=-1)
        fig, ax = plt.subplots(figsize=(8, 1.6))
        ax.imshow(norms[None, :], aspect="auto", cmap="viridis")
        ax.plot(norms / max(norms.max(), 1e-12) * -0.5 + 0.25, color="white", lw=1)
        ax.set_yticks([])
        ax.set_xlabel("clip")
        ax.set_title(f"L2 norm of {title} clip features")
        save(fig, name)

    if not missing("phrase_attention", ["phrase_attention"]):
        attn = np.asarray(artifacts["phrase_attention"], dtype=float)
        fig, (ax, side) = plt.subplots(1, 2, figsize=(8, 2.5), gridspec_kw={"width_ratios": [6, 1]})
        ax.imshow(attn, aspect="auto", cmap="magma", vmin=0)
        ax.set_xlabel("word")
        ax.set_ylabel("phrase")
        ax.set_title("phrase-to-word attention")
        side.axis("off")
        for n, total in enumerate(attn.sum(axis=1)):
            side.text(0, 1 - (n + 0.5) / len(attn), f"sum={total:.2f}", va="center", fontsize=8)
        save(fig, "phrase_attention")
    return written
