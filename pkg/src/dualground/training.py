"""Seeded training loop with resumable checkpoints, plus model evaluation over a dataset."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from .data_io import ArchiveError, collate, load_feature_archive, synthesize_dataset
from .evaluation import MetricReport, evaluate
from .model import DualGround

log = logging.getLogger(__name__)


class IncompatibleCheckpoint(Exception):
    pass


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def build_datasets(cfg: RunConfig):
    """Returns (train, val) sample sequences. Archive paths take precedence over the synthetic spec."""
    data = cfg.data
    if data.archive_root:
        train = load_feature_archive(data.archive_root)
        if data.val_archive_root:
            return train, load_feature_archive(data.val_archive_root)
        n_val = int(round(len(train) * data.val_fraction))
        cut = len(train) - n_val
        return train[:cut], train[cut:]
    spec = data.synthetic
    train = synthesize_dataset(spec, id_prefix="train")
    val_spec = dataclasses.replace(spec, num_samples=data.val_samples, seed=(spec.seed + 1) % 2 ** 64)
    return train, synthesize_dataset(val_spec, id_prefix="val")


def feature_dim(dataset) -> int:
    if len(dataset) == 0:
        raise ArchiveError("dataset is empty")
    return int(dataset[0].video.clips.shape[1])


def build_model(cfg: RunConfig) -> DualGround:
    return DualGround(cfg.model)


def make_optimizer(model, cfg: RunConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    o = cfg.optim

    def factor(step):
        warm = min(1.0, (step + 1) / o.warmup_steps) if o.warmup_steps else 1.0
        if o.lr_schedule == "cosine" and o.max_steps:
            return warm * 0.5 * (1 + math.cos(math.pi * min(step, o.max_steps) / o.max_steps))
        return warm

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed % 2 ** 63, epoch]).permutation(n)


def _batches(order, batch_size):
    return [order[i: i + batch_size] for i in range(0, len(order), batch_size)]


@torch.no_grad()
def evaluate_model(model, dataset, eval_cfg, token_condition=None, batch_size: int = 64):
    """Returns (MetricReport, predictions) where predictions = (query_ids, candidates, saliency)."""
    was_training = model.training
    model.eval()
    qids, cands, sal = [], [], []
    gts, labels = [], []
    samples = list(dataset)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        batch = collate(chunk)
        c, s, _ = model.predict(batch, eval_cfg.nms_threshold, eval_cfg.top_k, token_condition)
        qids.extend(batch["query_ids"])
        cands.extend(c)
        sal.extend(s)
        gts.extend(list(x.gt.moments) for x in chunk)
        labels.extend(None if x.gt.saliency_labels is None else list(x.gt.saliency_labels) for x in chunk)
    model.train(was_training)
    preds = [[(m.start, m.end, m.confidence) for m in c] for c in cands]
    report = evaluate(preds, gts, sal, labels, tuple(eval_cfg.iou_thresholds), tuple(eval_cfg.map_thresholds))
    return report, (qids, cands, sal)


def save_checkpoint(path, model, opt, sched, cfg: RunConfig, state: dict):
    torch.save({
        "model": model.state_dict(),
        "optimizer": opt.state_dict(),
        "scheduler": sched.state_dict(),
        "config": cfg.to_dict(),
        "state": state,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()},
    }, path)


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(path, cfg: RunConfig | None = None) -> tuple[DualGround, RunConfig]:
    """Rebuilds the model saved at ``path``; if ``cfg`` is given its model section must match."""
    ckpt = load_checkpoint(path)
    saved = config_from_dict(ckpt["config"])
    if cfg is not None:
        cfg.model.input_dim = cfg.model.input_dim or saved.model.input_dim
        if cfg.model_hash() != saved.model_hash():
            raise IncompatibleCheckpoint(
                f"checkpoint model config {saved.model_hash()} does not match requested {cfg.model_hash()}")
    model = build_model(saved)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, saved


class JsonLines:
    def __init__(self, path, append: bool):
        self.f = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, rec: dict):
        self.f.write(json.dumps(rec) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def train(cfg: RunConfig, out_dir, resume=None, datasets=None) -> dict:
    """Trains until ``optim.epochs`` or ``optim.max_steps``; returns a summary dict.

    Writes ``train_log.jsonl`` (one record per step), ``eval_log.jsonl`` (one per
    evaluation), ``last.pt`` and ``best.pt`` (highest R1@0.7) into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = datasets if datasets is not None else build_datasets(cfg)
    if cfg.model.input_dim is None:
        cfg.model.input_dim = feature_dim(train_set)
    torch.use_deterministic_algorithms(True)
    seed_everything(cfg.seed)
    model = build_model(cfg)
    opt, sched = make_optimizer(model, cfg)
    state = {"step": 0, "epoch": 0, "batch": 0, "best": -1.0}
    if resume is not None:
        ckpt = load_checkpoint(resume)
        saved = config_from_dict(ckpt["config"])
        if saved.model_hash() != cfg.model_hash():
            raise IncompatibleCheckpoint(
                f"checkpoint model config {saved.model_hash()} does not match requested {cfg.model_hash()}")
        model.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        sched.load_state_dict(ckpt["scheduler"])
        state = dict(ckpt["state"])
        torch.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])
        random.setstate(ckpt["rng"]["python"])
    cfg.save(out / "config.json")

    step_log = JsonLines(out / "train_log.jsonl", append=resume is not None)
    eval_log = JsonLines(out / "eval_log.jsonl", append=resume is not None)
    o = cfg.optim
    best_report = None
    model.train()
    try:
        while state["epoch"] < o.epochs and (o.max_steps is None or state["step"] < o.max_steps):
            batches = _batches(epoch_order(cfg.seed, state["epoch"], len(train_set)), o.batch_size)
            while state["batch"] < len(batches):
                batch = collate([train_set[int(i)] for i in batches[state["batch"]]])
                outputs = model(batch)
                losses = model.losses(outputs, batch, cfg.loss)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                if o.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), o.grad_clip)
                opt.step()
                sched.step()
                state["step"] += 1
                state["batch"] += 1
                step_log.write({"step": state["step"], "epoch": state["epoch"], **losses.as_floats()})
                if o.max_steps is not None and state["step"] >= o.max_steps:
                    break
            if state["batch"] >= len(batches):
                state["epoch"] += 1
                state["batch"] = 0
                if state["epoch"] % cfg.eval.every_epochs == 0 and len(val_set):
                    report, _ = evaluate_model(model, val_set, cfg.eval)
                    score = report.r1_at.get(0.7, report.map_avg)
                    eval_log.write({"step": state["step"], "epoch": state["epoch"], **report.flat()})
                    if score > state["best"]:
                        state["best"] = score
                        best_report = report
                        save_checkpoint(out / "best.pt", model, opt, sched, cfg, state)
            save_checkpoint(out / "last.pt", model, opt, sched, cfg, state)
    finally:
        step_log.close()
        eval_log.close()
    return {"model": model, "state": state, "best_report": best_report, "out_dir": out}
