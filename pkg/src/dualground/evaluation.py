"""Moment retrieval and highlight detection metrics, plus an exhaustive oracle used by the tests.

Conventions: spans are (start, end) with start < end in any common unit; a
prediction list is ranked by descending confidence with ties kept in input
order; highlight positives are clips labeled >= 3; AP uses the precision
envelope (interpolated precision at recall r is the max precision at recall >= r).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

DEFAULT_MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
HD_POSITIVE = 3


@dataclass
class MetricReport:
    r1_at: dict = field(default_factory=dict)
    map_avg: float = 0.0
    map_at: dict = field(default_factory=dict)
    miou: float = 0.0
    hd_map: float | None = None
    hit_at_1: float | None = None
    n_samples: int = 0
    n_hd_excluded: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r1_at"] = {str(k): v for k, v in self.r1_at.items()}
        d["map_at"] = {str(k): v for k, v in self.map_at.items()}
        return d

    def flat(self) -> dict:
        """Single-level metric mapping used for logs and comparison tables."""
        row = {f"R1@{k}": v for k, v in self.r1_at.items()}
        row["mAP"] = self.map_avg
        for k in (0.5, 0.75):
            if k in self.map_at:
                row[f"mAP@{k}"] = self.map_at[k]
        row["mIoU"] = self.miou
        if self.hd_map is not None:
            row["HD-mAP"] = self.hd_map
            row["HIT@1"] = self.hit_at_1
        return row


def temporal_iou(a, b) -> float:
    if not (a[0] < a[1] and b[0] < b[1]):
        raise ValueError(f"degenerate span in IoU: {a}, {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def _rank(preds):
    """Stable descending-confidence order of (start, end, conf) triples."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    return [preds[i] for i in order]


def _mean(values) -> float:
    """Correctly rounded mean, so results do not depend on summation order."""
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _best_iou(span, gts) -> float:
    return max((temporal_iou(span[:2], g) for g in gts), default=0.0)


def recall_at_1(predictions, gts, threshold: float) -> float:
    if not predictions:
        return 0.0
    hits = 0
    for preds, g in zip(predictions, gts):
        if preds and _best_iou(_rank(preds)[0], g) >= threshold:
            hits += 1
    return hits / len(predictions)


def mean_top1_iou(predictions, gts) -> float:
    if not predictions:
        return 0.0
    return _mean(_best_iou(_rank(p)[0], g) if p else 0.0 for p, g in zip(predictions, gts))


def _greedy_tp(ranked, gts, threshold):
    """Each ranked prediction claims the unmatched GT of highest IoU >= threshold (lowest index on ties)."""
    used = [False] * len(gts)
    tp = np.zeros(len(ranked))
    for i, p in enumerate(ranked):
        best, best_j = threshold, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            iou = temporal_iou(p[:2], g)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = 1
    return tp


def _envelope_ap(tp, num_gt):
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return math.fsum((mrec[steps] - mrec[steps - 1]) * mprec[steps])


def average_precision(preds, gts, threshold: float) -> float:
    return _envelope_ap(_greedy_tp(_rank(preds), gts, threshold), len(gts))


def mean_ap(predictions, gts, thresholds=DEFAULT_MAP_THRESHOLDS):
    """Returns (mean over thresholds, {threshold: mean per-sample AP})."""
    map_at = {}
    for th in thresholds:
        aps = [average_precision(p, g, th) for p, g in zip(predictions, gts)]
        map_at[th] = _mean(aps)
    return _mean(map_at.values()), map_at


def hd_sample(scores, labels):
    """(AP, hit@1) of one clip ranking, or None when the sample has no positive clip."""
    labels = np.asarray(labels)
    positive = labels >= HD_POSITIVE
    if not positive.any():
        return None
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    hits = positive[order].astype(float)
    return _envelope_ap(hits, int(positive.sum())), float(hits[0])


def hd_metrics(scores, labels):
    """Returns (hd_map, hit_at_1, n_excluded) over samples with at least one positive clip."""
    aps, hits, excluded = [], [], 0
    for s, l in zip(scores, labels):
        res = hd_sample(s, l)
        if res is None:
            excluded += 1
            continue
        aps.append(res[0])
        hits.append(res[1])
    if not aps:
        return None, None, excluded
    return _mean(aps), _mean(hits), excluded


def evaluate(predictions, gts, saliency=None, labels=None, r1_thresholds=(0.5, 0.7),
             map_thresholds=DEFAULT_MAP_THRESHOLDS) -> MetricReport:
    """Full metric report. ``saliency``/``labels`` may hold None entries for samples without HD labels."""
    report = MetricReport(n_samples=len(predictions))
    report.r1_at = {th: recall_at_1(predictions, gts, th) for th in r1_thresholds}
    report.map_avg, report.map_at = mean_ap(predictions, gts, map_thresholds)
    report.miou = mean_top1_iou(predictions, gts)
    if saliency is not None and labels is not None:
        pairs = [(s, l) for s, l in zip(saliency, labels) if l is not None]
        if pairs:
            report.hd_map, report.hit_at_1, report.n_hd_excluded = hd_metrics(*zip(*pairs))
    return report


# ---------------------------------------------------------------------------
# exhaustive oracle


def _oracle_tp(ranked, gts, threshold):
    """TP flags from the matching that is lexicographically best along the ranking.

    Enumerates every one-to-one partial assignment of predictions to GTs with
    IoU >= threshold and keeps the one whose per-rank (IoU, -gt index) sequence
    is lexicographically largest, i.e. earlier predictions get priority.
    """
    ious = [[temporal_iou(p[:2], g) for g in gts] for p in ranked]
    best = {"key": None, "tp": []}

    def walk(i, used, key, tp):
        if i == len(ranked):
            if best["key"] is None or key > best["key"]:
                best["key"], best["tp"] = list(key), list(tp)
            return
        walk(i + 1, used, key + [(-1.0, 0)], tp + [0])
        for j, iou in enumerate(ious[i]):
            if iou >= threshold and j not in used:
                walk(i + 1, used | {j}, key + [(iou, -j)], tp + [1])

    walk(0, frozenset(), [], [])
    return best["tp"]


def _oracle_ap(tp, num_gt):
    """AP as a sum over recall increments of the max precision at any rank with at least that recall."""
    if num_gt == 0 or not tp:
        return 0.0
    n = len(tp)
    prec = [sum(tp[: k + 1]) / (k + 1) for k in range(n)]
    rec = [sum(tp[: k + 1]) / num_gt for k in range(n)]
    terms, prev_rec = [], 0.0
    for k in range(n):
        if rec[k] > prev_rec:
            terms.append((rec[k] - prev_rec) * max(prec[j] for j in range(n) if rec[j] >= rec[k]))
            prev_rec = rec[k]
    return math.fsum(terms)


def oracle_metrics(predictions, gts, saliency=None, labels=None, r1_thresholds=(0.5, 0.7),
                   map_thresholds=DEFAULT_MAP_THRESHOLDS) -> MetricReport:
    for p, g in zip(predictions, gts):
        if len(p) > 10 or len(g) > 5:
            raise ValueError("oracle_metrics only handles <= 10 predictions and <= 5 GTs per sample")
    report = MetricReport(n_samples=len(predictions))
    tops = []
    for preds in predictions:
        if not preds:
            tops.append(None)
            continue
        top_conf = max(p[2] for p in preds)
        tops.append(next(p for p in preds if p[2] == top_conf))
    ious = [0.0 if t is None else max(temporal_iou(t[:2], x) for x in g) for t, g in zip(tops, gts)]
    n = len(predictions)
    report.r1_at = {th: (sum(i >= th for i in ious) / n if n else 0.0) for th in r1_thresholds}
    report.miou = math.fsum(ious) / n if n else 0.0
    for th in map_thresholds:
        aps = []
        for preds, g in zip(predictions, gts):
            ranked = [p for _, p in sorted(enumerate(preds), key=lambda ip: (-ip[1][2], ip[0]))]
            aps.append(_oracle_ap(_oracle_tp(ranked, g, th), len(g)))
        report.map_at[th] = math.fsum(aps) / n if n else 0.0
    report.map_avg = math.fsum(report.map_at.values()) / len(map_thresholds) if map_thresholds else 0.0
    if saliency is not None and labels is not None:
        aps, hits, excluded = [], [], 0
        for s, l in zip(saliency, labels):
            if l is None:
                continue
            pos = [x >= HD_POSITIVE for x in l]
            if not any(pos):
                excluded += 1
                continue
            ranked = [i for _, i in sorted((-float(s[i]), i) for i in range(len(s)))]
            flags = [1 if pos[i] else 0 for i in ranked]
            aps.append(_oracle_ap(flags, sum(pos)))
            hits.append(float(flags[0]))
        if aps:
            report.hd_map = math.fsum(aps) / len(aps)
            report.hit_at_1 = math.fsum(hits) / len(hits)
        report.n_hd_excluded = excluded
    return report


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(path, query_ids, candidates, saliency):
    """One JSON record per line: {query_id, moments: [[start, end, conf], ...], saliency: [...]}."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, cands, sal in zip(query_ids, candidates, saliency):
            rec = {"query_id": qid,
                   "moments": [[c.start, c.end, c.confidence] for c in cands],
                   "saliency": list(sal)}
            f.write(json.dumps(rec) + "\n")


def read_predictions(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["query_id"]] = rec
    return out


def score_prediction_file(path, dataset, r1_thresholds=(0.5, 0.7), map_thresholds=DEFAULT_MAP_THRESHOLDS):
    """Re-scores a prediction file against the ground truth of ``dataset`` (matched by query_id)."""
    recs = read_predictions(path)
    preds, gts, sal, labels = [], [], [], []
    for sample in dataset:
        rec = recs.get(sample.query_id, {"moments": [], "saliency": []})
        preds.append([tuple(m) for m in rec["moments"]])
        gts.append(list(sample.gt.moments))
        sal.append(rec["saliency"])
        labels.append(None if sample.gt.saliency_labels is None else list(sample.gt.saliency_labels))
    return evaluate(preds, gts, sal, labels, r1_thresholds, map_thresholds)


def write_report(path, report: MetricReport):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
