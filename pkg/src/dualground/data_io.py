"""Precomputed-feature archives, the synthetic planted-moment benchmark, and batching.

Archive layout (everything relative to the archive root)::

    manifest.json
    videos/<video_id>.f32      T x d float32, little-endian, row-major, no header
    tokens/<query_id>.f32      L x d float32; the last row is the [EOS] embedding

Moments are stored in seconds in the manifest and exposed in normalized [0, 1]
video time once loaded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from collections.abc import Sequence

import numpy as np
import torch

MANIFEST = "manifest.json"
_F32 = np.dtype("<f4")


class ArchiveError(Exception):
    """Raised for malformed archives: missing manifest, size mismatches, non-finite values."""


@dataclass
class VideoFeatures:
    clips: np.ndarray
    video_id: str
    clip_seconds: float = 2.0

    @property
    def num_clips(self) -> int:
        return self.clips.shape[0]


@dataclass
class QueryTokens:
    words: np.ndarray
    eos: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(len(self.words), dtype=bool)

    @property
    def num_words(self) -> int:
        return int(self.mask.sum())


@dataclass
class GroundTruthAnnotation:
    moments: list[tuple[float, float]]
    saliency_labels: np.ndarray | None = None
    highlight_set: list[int] | None = None


@dataclass
class Sample:
    query_id: str
    video: VideoFeatures
    query: QueryTokens
    gt: GroundTruthAnnotation
    # generator-side facts (planted cue vector, distractor span); never serialized
    meta: dict = field(default_factory=dict)


@dataclass
class SyntheticSpec:
    num_samples: int = 200
    T: int = 32
    L: int = 10
    d: int = 32
    N_latent: int = 8
    moment_min_len: float = 0.15
    moment_max_len: float = 0.4
    noise_sigma: float = 0.1
    seed: int = 0
    # seeds the cue/scene basis separately so splits drawn with different seeds share one feature space
    basis_seed: int = 0
    # a second segment sharing only the [EOS]-visible cue; makes word tokens necessary
    distractor: bool = True
    # amplitude of a query-independent direction following each segment's saliency profile
    salience: float = 0.5
    clip_seconds: float = 2.0

    def validate(self):
        if not 0 < self.moment_min_len <= self.moment_max_len <= 1:
            raise ValueError("need 0 < moment_min_len <= moment_max_len <= 1")
        if self.d < self.N_latent:
            raise ValueError(f"d={self.d} must be >= N_latent={self.N_latent}")
        if self.N_latent < 1 or self.T < 1 or self.L < 2 or self.num_samples < 0:
            raise ValueError("N_latent >= 1, T >= 1, L >= 2 and num_samples >= 0 are required")
        if self.noise_sigma < 0 or self.salience < 0:
            raise ValueError("noise_sigma and salience must be non-negative")
        if self.d < self.N_latent + 2:
            raise ValueError("d must leave at least two dimensions outside the cue subspace")


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise ArchiveError(f"non-finite values in {what}")


def _read_f32(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise ArchiveError(f"missing tensor file {path}")
    expected = rows * cols * _F32.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ArchiveError(
            f"shape mismatch in {path}: manifest implies {rows}x{cols} float32 "
            f"({expected} bytes) but file has {actual} bytes"
        )
    arr = np.fromfile(path, dtype=_F32).reshape(rows, cols)
    _check_finite(arr, str(path))
    return arr


class FeatureArchive(Sequence):
    """Read-only dataset view over an on-disk archive; tensors are read on access."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self._videos = {v["video_id"]: v for v in manifest["videos"]}
        self._queries = manifest["queries"]

    def __len__(self):
        return len(self._queries)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        q = self._queries[idx]
        v = self._videos[q["video_id"]]
        T, d = v["num_clips"], v["dim"]
        clips = _read_f32(self.root / v["feature_file"], T, d)
        tokens = _read_f32(self.root / q["token_file"], q["num_tokens"], q["dim"])
        duration = T * v["clip_seconds"]
        moments = [(s / duration, e / duration) for s, e in q["moments"]]
        sal = q.get("saliency")
        labels = None if sal is None else np.asarray(sal, dtype=np.int64)
        highlight = None if labels is None else [int(i) for i in np.flatnonzero(labels == labels.max())]
        return Sample(
            query_id=q["query_id"],
            video=VideoFeatures(clips, v["video_id"], v["clip_seconds"]),
            query=QueryTokens(tokens[:-1], tokens[-1]),
            gt=GroundTruthAnnotation(moments, labels, highlight),
        )


def _validate_manifest(root: Path, manifest: dict):
    for key in ("videos", "queries"):
        if key not in manifest or not isinstance(manifest[key], list):
            raise ArchiveError(f"manifest lacks a '{key}' list")
    dims = set()
    videos = {}
    for v in manifest["videos"]:
        if v["num_clips"] < 1 or v["dim"] < 1 or v["clip_seconds"] <= 0:
            raise ArchiveError(f"video {v['video_id']}: num_clips, dim and clip_seconds must be positive")
        _read_f32(root / v["feature_file"], v["num_clips"], v["dim"])
        dims.add(v["dim"])
        videos[v["video_id"]] = v
    for q in manifest["queries"]:
        v = videos.get(q["video_id"])
        if v is None:
            raise ArchiveError(f"query {q['query_id']} references unknown video {q['video_id']}")
        if q["num_tokens"] < 2:
            raise ArchiveError(f"query {q['query_id']}: need at least one word plus [EOS]")
        _read_f32(root / q["token_file"], q["num_tokens"], q["dim"])
        dims.add(q["dim"])
        duration = v["num_clips"] * v["clip_seconds"]
        for s, e in q["moments"]:
            if not 0 <= s < e <= duration + 1e-6:
                raise ArchiveError(f"query {q['query_id']}: moment [{s}, {e}] outside [0, {duration}]")
        sal = q.get("saliency")
        if sal is not None and (len(sal) != v["num_clips"] or any(not 0 <= x <= 4 for x in sal)):
            raise ArchiveError(f"query {q['query_id']}: saliency must be {v['num_clips']} integers in [0, 4]")
    if len(dims) > 1:
        raise ArchiveError(f"mixed feature dims in archive: {sorted(dims)}")


def load_feature_archive(root) -> FeatureArchive:
    """Open and fully validate an archive; returns a lazily-reading dataset."""
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise ArchiveError(f"no {MANIFEST} under {root}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    _validate_manifest(root, manifest)
    return FeatureArchive(root, manifest)


def _write_f32(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(arr, dtype=_F32).tofile(path)


def write_feature_archive(dataset, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    videos, queries, seen = [], [], set()
    for sample in dataset:
        v = sample.video
        T, d = v.clips.shape
        if v.video_id not in seen:
            seen.add(v.video_id)
            rel = f"videos/{v.video_id}.f32"
            _write_f32(root / rel, v.clips)
            videos.append({"video_id": v.video_id, "feature_file": rel, "num_clips": T,
                           "dim": d, "clip_seconds": float(v.clip_seconds)})
        q = sample.query
        tokens = np.concatenate([q.words[q.mask], q.eos[None]], axis=0)
        rel = f"tokens/{sample.query_id}.f32"
        _write_f32(root / rel, tokens)
        duration = T * v.clip_seconds
        entry = {"query_id": sample.query_id, "video_id": v.video_id, "token_file": rel,
                 "num_tokens": len(tokens), "dim": tokens.shape[1],
                 "moments": [[float(s) * duration, float(e) * duration] for s, e in sample.gt.moments]}
        if sample.gt.saliency_labels is not None:
            entry["saliency"] = [int(x) for x in sample.gt.saliency_labels]
        queries.append(entry)
    with open(root / MANIFEST, "w", encoding="utf-8") as f:
        json.dump({"videos": videos, "queries": queries}, f, indent=2)
        f.write("\n")


def saliency_profile(T: int, start: int, end: int) -> np.ndarray:
    """Triangular 0-4 labels peaking at the center of clips [start, end); zero outside."""
    labels = np.zeros(T, dtype=np.int64)
    center = (start + end) / 2
    half = (end - start) / 2
    for t in range(start, end):
        dist = max(abs(t + 0.5 - center) - 0.5, 0.0)
        labels[t] = min(4, max(1, math.ceil(4 * (1 - dist / half) - 1e-9)))
    return labels


def _orthonormal(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return q.T


def synthesize_dataset(spec: SyntheticSpec, id_prefix: str = "syn") -> list[Sample]:
    """Planted-moment grounding data; a pure function of ``spec``.

    Each query draws two or three of ``N_latent`` orthonormal cue directions. The
    target moment's clips carry the sum of all of them, the query's word tokens
    carry each one (among distractor words), and the [EOS] embedding carries only
    the first. When ``distractor`` is set, a disjoint segment carries the first
    cue plus one the query never mentions, so only the words disambiguate.
    Both segments also carry a query-independent direction scaled by their
    triangular saliency profile, so clip-level highlight strength is observable.
    """
    spec.validate()
    basis = _orthonormal(np.random.default_rng(spec.basis_seed), spec.d, spec.d)
    rng = np.random.default_rng(spec.seed)
    cues, salient, rest = basis[: spec.N_latent], basis[spec.N_latent], basis[spec.N_latent + 1:]
    T, n_words_max = spec.T, spec.L - 1
    min_len = max(1, round(spec.moment_min_len * T))
    max_len = max(min_len, round(spec.moment_max_len * T))
    k_lo, k_hi = min(2, spec.N_latent), min(3, spec.N_latent, n_words_max)
    k_lo = min(k_lo, k_hi)
    samples = []
    for i in range(spec.num_samples):
        k = int(rng.integers(k_lo, k_hi + 1))
        chosen = rng.permutation(spec.N_latent)[:k]
        cue = cues[chosen].sum(axis=0)
        length = int(rng.integers(min_len, max_len + 1))

        spans = [(length, True)]
        others = np.setdiff1d(np.arange(spec.N_latent), chosen)
        d_len = int(rng.integers(min_len, max_len + 1))
        if spec.distractor and len(others) and length + d_len + 1 <= T:
            spans.append((d_len, False))
        # place target (and distractor) disjointly, separated by at least one clip
        free = T - sum(s for s, _ in spans) - (len(spans) - 1)
        cuts = np.sort(rng.integers(0, free + 1, size=len(spans)))
        order = rng.permutation(len(spans))
        pos = 0
        placed = {}
        for j, which in enumerate(order):
            span_len, is_target = spans[which]
            start = int(cuts[j]) + pos
            placed[is_target] = (start, start + span_len)
            pos += span_len + 1
        start, end = placed[True]

        scene = rest[int(rng.integers(len(rest)))] * 0.5
        clips = np.tile(scene, (T, 1)) + spec.noise_sigma * rng.standard_normal((T, spec.d))
        clips[start:end] += cue
        labels = saliency_profile(T, start, end)
        if False in placed:
            ds, de = placed[False]
            clips[ds:de] += cues[chosen[0]] + cues[int(rng.choice(others))]
            clips += np.outer(saliency_profile(T, ds, de) / 4 * spec.salience, salient)
        clips += np.outer(labels / 4 * spec.salience, salient)

        n_words = int(rng.integers(k, n_words_max + 1))
        words = np.empty((n_words, spec.d))
        slots = rng.permutation(n_words)
        for j in range(n_words):
            if j < k:
                words[slots[j]] = cues[chosen[j]]
            else:
                w = rest.T @ rng.standard_normal(len(rest))
                words[slots[j]] = w / np.linalg.norm(w)
        words += 0.05 * rng.standard_normal(words.shape)
        eos = cues[chosen[0]] + 0.05 * rng.standard_normal(spec.d)

        vid = f"{id_prefix}{i:06d}"
        samples.append(Sample(
            query_id=f"{vid}_q",
            video=VideoFeatures(clips.astype(np.float32), vid, spec.clip_seconds),
            query=QueryTokens(words.astype(np.float32), eos.astype(np.float32)),
            gt=GroundTruthAnnotation([(start / T, end / T)], labels,
                                     [int(t) for t in np.flatnonzero(labels == labels.max())]),
            meta={"cue": cue, "span": (start, end), "distractor_span": placed.get(False)},
        ))
    return samples


def window_scan_oracle(clips: np.ndarray, cue: np.ndarray) -> tuple[int, int]:
    """Brute-force window maximizing the mean projection onto ``cue``; ties (within float32
    rounding) go to the longest window."""
    proj = clips @ (cue / np.linalg.norm(cue))
    T = len(proj)
    csum = np.concatenate([[0.0], np.cumsum(proj)])
    best, best_span = -np.inf, None
    for length in range(T, 0, -1):
        for s in range(T - length + 1):
            mean = (csum[s + length] - csum[s]) / length
            if best_span is None or mean > best + 1e-6 * max(1.0, abs(best)):
                best, best_span = mean, (s, s + length)
    return best_span


def collate(samples, pad_to_T: int | None = None, pad_to_L: int | None = None) -> dict:
    """Stack samples into zero-padded tensors with boolean clip and word masks."""
    dims = {s.video.clips.shape[1] for s in samples} | {s.query.words.shape[1] for s in samples}
    if len(dims) != 1:
        raise ValueError(f"cannot batch samples with mixed feature dims {sorted(dims)}")
    d = dims.pop()
    B = len(samples)
    T = max([s.video.num_clips for s in samples] + [pad_to_T or 0])
    L = max([s.query.num_words for s in samples] + [pad_to_L or 0])
    video = np.zeros((B, T, d), dtype=np.float32)
    clip_mask = np.zeros((B, T), dtype=bool)
    words = np.zeros((B, L, d), dtype=np.float32)
    word_mask = np.zeros((B, L), dtype=bool)
    eos = np.zeros((B, d), dtype=np.float32)
    saliency = np.zeros((B, T), dtype=np.int64)
    has_saliency = np.zeros(B, dtype=bool)
    for b, s in enumerate(samples):
        n = s.video.num_clips
        video[b, :n] = s.video.clips
        clip_mask[b, :n] = True
        w = s.query.words[s.query.mask]
        words[b, : len(w)] = w
        word_mask[b, : len(w)] = True
        eos[b] = s.query.eos
        if s.gt.saliency_labels is not None:
            saliency[b, :n] = s.gt.saliency_labels
            has_saliency[b] = True
    return {
        "video": torch.from_numpy(video),
        "clip_mask": torch.from_numpy(clip_mask),
        "words": torch.from_numpy(words),
        "word_mask": torch.from_numpy(word_mask),
        "eos": torch.from_numpy(eos),
        "saliency": torch.from_numpy(saliency),
        "has_saliency": torch.from_numpy(has_saliency),
        "moments": [list(s.gt.moments) for s in samples],
        "num_clips": torch.tensor([s.video.num_clips for s in samples]),
        "query_ids": [s.query_id for s in samples],
    }
