"""Command-line entry point: ``dualground {train,eval,synth,ablate,analyze}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 checkpoint incompatible with the requested configuration.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TOKEN_CONDITIONS, RunConfig, load_config
from .grounding_head import FUSIONS, ConfigError as HeadConfigError
from .data_io import ArchiveError, SyntheticSpec, load_feature_archive, synthesize_dataset, write_feature_archive

log = logging.getLogger("dualground")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
ABLATION_AXES = ("phrase_n", "fusion", "token_condition")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override, e.g. model.d=32 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualground", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint by R1@0.7")
    _common(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes predictions.jsonl and report.json")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="feature archive to evaluate on (default: the config's split)")
    p.add_argument("--split", choices=("train", "val"), default="val")

    p = sub.add_parser("synth", help="write a synthetic feature archive")
    p.add_argument("--spec", type=Path, help="JSON file with SyntheticSpec fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("ablate", help="train and evaluate one run per value of an ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--values", help="comma-separated values (default: the full sweep for the axis)")

    p = sub.add_parser("analyze", help="token-dependency correlation or diagnostic plots")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--what", required=True, help="correlation or plots")
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--sample", type=int, default=0, help="sample index for plots")
    p.add_argument("--run-id", default="run")
    return parser


def _config(args) -> RunConfig:
    return load_config(args.config, args.override, args.seed)


def _dataset(args, cfg: RunConfig):
    from .training import build_datasets

    if getattr(args, "data", None) is not None:
        return load_feature_archive(args.data)
    train, val = build_datasets(cfg)
    return train if args.split == "train" else val


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    result = train(cfg, args.out, resume=args.resume)
    report = result["best_report"]
    if report is not None:
        print(json.dumps(report.flat()))
    return EXIT_OK


def _load_model(args):
    from .training import model_from_checkpoint

    cfg = _config(args) if (args.config or args.override) else None
    model, saved = model_from_checkpoint(args.checkpoint, cfg)
    if cfg is None:
        cfg = saved
        if args.seed is not None:
            cfg.seed = args.seed
    return model, cfg


def cmd_eval(args) -> int:
    from .evaluation import write_predictions, write_report
    from .training import evaluate_model

    model, cfg = _load_model(args)
    dataset = _dataset(args, cfg)
    report, (qids, cands, sal) = evaluate_model(model, dataset, cfg.eval)
    args.out.mkdir(parents=True, exist_ok=True)
    write_predictions(args.out / "predictions.jsonl", qids, cands, sal)
    write_report(args.out / "report.json", report)
    print(json.dumps(report.flat()))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .config import _build, apply_overrides

    data = dataclasses.asdict(SyntheticSpec())
    if args.spec is not None:
        data.update(json.loads(args.spec.read_text(encoding="utf-8")))
    apply_overrides(data, args.override)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = _build(SyntheticSpec, data, "spec")
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError("spec", str(e)) from None
    write_feature_archive(synthesize_dataset(spec), args.out)
    print(f"wrote {spec.num_samples} samples to {args.out}")
    return EXIT_OK


def _axis_values(axis: str, raw: str | None) -> list:
    if axis == "phrase_n":
        values = [int(v) for v in raw.split(",")] if raw else list(range(1, 7))
        if any(v < 1 for v in values):
            raise UsageError("phrase_n values must be positive integers")
        return values
    allowed = FUSIONS if axis == "fusion" else TOKEN_CONDITIONS
    values = raw.split(",") if raw else list(allowed)
    bad = [v for v in values if v not in allowed]
    if bad:
        raise UsageError(f"invalid {axis} values {bad}; expected a subset of {list(allowed)}")
    return values


def run_ablation(cfg: RunConfig, axis: str, values: list, out: Path) -> list[dict]:
    """One run per value; returns rows {axis_value, metrics...} and writes ablation.csv/.json."""
    from .analysis import run_token_condition
    from .training import build_datasets, train

    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(cfg)
    rows, reports = [], {}
    shared = None
    for value in values:
        run_cfg = copy.deepcopy(cfg)
        run_dir = out / f"{axis}_{value}"
        if axis == "phrase_n":
            run_cfg.model.N = value
        elif axis == "fusion":
            run_cfg.model.fusion = value
        if axis == "token_condition":
            if cfg.analysis.token_condition_phase == "train":
                run_cfg.model.token_condition = value
                model = train(run_cfg.validate(), run_dir, datasets=datasets)["model"]
            else:
                if shared is None:
                    shared = train(run_cfg.validate(), out / "shared", datasets=datasets)["model"]
                model = shared
            report = run_token_condition(model, datasets[1], value, cfg.eval, out, run_id=axis)
        else:
            from .evaluation import write_report
            from .training import evaluate_model

            model = train(run_cfg.validate(), run_dir, datasets=datasets)["model"]
            report, _ = evaluate_model(model, datasets[1], cfg.eval)
            report.meta[axis] = value
            write_report(run_dir / "report.json", report)
        reports[str(value)] = report.to_dict()
        rows.append({"axis_value": value, **report.flat()})

    columns = ["axis_value"] + [k for k in rows[0] if k != "axis_value"]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    (out / "ablation.json").write_text(json.dumps({"axis": axis, "reports": reports}, indent=2) + "\n",
                                       encoding="utf-8")
    return rows


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; expected one of {ABLATION_AXES}")
    values = _axis_values(args.axis, args.values)
    rows = run_ablation(_config(args), args.axis, values, args.out)
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def plot_artifacts(model, sample, eval_cfg) -> dict:
    """Forward one sample and collect everything the diagnostic plots need."""
    from .data_io import collate

    batch = collate([sample])
    cands, sal, out = model.predict(batch, eval_cfg.nms_threshold, eval_cfg.top_k)
    T = int(batch["num_clips"][0])
    n_words = int(batch["word_mask"][0].sum())
    return {
        "moments": [(c.start, c.end, c.confidence) for c in cands[0]],
        "gt_moments": list(sample.gt.moments),
        "saliency": sal[0],
        "labels": None if sample.gt.saliency_labels is None else list(sample.gt.saliency_labels),
        "v_p": out["v_p"][0, :T].numpy(),
        "v_s": out["v_s"][0, :T].numpy(),
        "phrase_attention": out["phrase_attn"][0, :, :n_words].numpy(),
    }


def cmd_analyze(args) -> int:
    from .analysis import emit_plots, eos_word_attention_correlation, write_correlation_report

    if args.what not in ("correlation", "plots"):
        raise UsageError(f"unknown analysis {args.what!r}; expected 'correlation' or 'plots'")
    model, cfg = _load_model(args)
    dataset = _dataset(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.what == "correlation":
        report = eos_word_attention_correlation(model, dataset, split=args.split)
        path = args.out / f"{args.run_id}_correlation.json"
        write_correlation_report(path, report)
        print(json.dumps({"mean_pearson": report.mean_pearson, "mean_spearman": report.mean_spearman,
                          "skipped": report.skipped}))
    else:
        if not 0 <= args.sample < len(dataset):
            raise UsageError(f"--sample {args.sample} out of range for {len(dataset)} samples")
        paths = emit_plots(plot_artifacts(model, dataset[args.sample], cfg.eval), args.out, args.run_id)
        for p in paths:
            print(p)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "synth": cmd_synth, "ablate": cmd_ablate,
            "analyze": cmd_analyze}


def main(argv=None) -> int:
    from .training import IncompatibleCheckpoint

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, HeadConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except IncompatibleCheckpoint as e:
        print(f"incompatible checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
