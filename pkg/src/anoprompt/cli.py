"""Command-line entry points: train, eval, predict, synth.

Every run writes its artifacts under one output directory together with a
manifest (config hash + seeds + library versions) sufficient to reproduce
it. Exit codes: 0 success, 2 configuration/schema errors, 3 dataset
ingestion errors, 4 undefined metrics, 1 any other package error.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from .configs import RunConfig, apply_overrides
from .datasets import generate_synthetic_dataset, load_image
from .episodes import (
    load_bundle_from_checkpoint,
    run_episode,
    train_run,
    write_manifest,
    write_results,
)
from .errors import AnopromptError, ConfigError, IngestionError, MetricError
from .memory import MemoryBank
from .prompting import class_text_features
from .scoring import write_heatmap_png16, write_scores_csv


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    for name in ("k", "epochs", "output_dir", "dataset_root"):
        value = getattr(args, name, None)
        if value is not None:
            overrides.append(f"{name}={value}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if getattr(args, "per_class", False):
        overrides.append("per_class=true")
    if getattr(args, "no_memory", False):
        overrides.append("use_memory=false")
    return apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    checkpoints = train_run(cfg, cfg.output_dir)
    for path in checkpoints:
        print(path)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in cfg.seeds:
        run = run_episode(cfg, seed, metrics_path=out_dir / f"metrics_seed{seed}.jsonl")
        print(
            f"seed {seed}: image AUROC {run.image_auroc:.4f}, "
            f"pixel AUROC {run.pixel_auroc:.4f}"
        )
        runs.append(run)
    write_results(runs, out_dir)
    write_manifest(cfg, cfg.seeds, out_dir / "manifest.json")
    print(out_dir / "results.json")
    return 0


def cmd_predict(args) -> int:
    import torch

    bundle = load_bundle_from_checkpoint(args.checkpoint)
    bank = MemoryBank.load(args.bank) if args.bank else None
    out_dir = Path(args.output_dir)
    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        w_pos, w_neg = class_text_features(bundle.backbone, bundle.stack, bundle.text_inputs)
    from .episodes import score_test_image

    reports = []
    for path in args.images:
        try:
            image = load_image(path)
        except IngestionError as exc:
            warnings.warn(f"skipping unreadable image: {exc}")
            continue
        report = score_test_image(bundle, bank, w_pos, w_neg, image, Path(path).name)
        write_heatmap_png16(report.fused_map, heat_dir / f"{Path(path).stem}.png")
        reports.append(report)
    write_scores_csv(reports, out_dir / "scores.csv")
    print(out_dir / "scores.csv")
    return 0


def cmd_synth(args) -> int:
    path = generate_synthetic_dataset(
        args.output_dir,
        category=args.category,
        n_train=args.n_train,
        n_test_normal=args.n_test_normal,
        n_test_defect=args.n_test_defect,
        size=args.size,
        seed=args.seed,
    )
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anoprompt")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file (RunConfig schema)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config field (repeatable; values parsed as YAML)",
        )
        p.add_argument("--k", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int, help="single seed (replaces the seeds list)")
        p.add_argument("--dataset-root", dest="dataset_root")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--per-class", action="store_true", dest="per_class")
        p.add_argument("--no-memory", action="store_true", dest="no_memory")

    p_train = sub.add_parser("train", help="train prompts and decoder, write a checkpoint")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="run k-shot episodes over the configured seeds")
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="score images with a trained checkpoint")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--bank", help="memory bank .npz (omit for prompt-only scoring)")
    p_pred.add_argument("--output-dir", dest="output_dir", default="predictions")
    p_pred.add_argument("images", nargs="+")
    p_pred.set_defaults(func=cmd_predict)

    p_synth = sub.add_parser("synth", help="generate the synthetic desk-scale dataset")
    p_synth.add_argument("--output-dir", dest="output_dir", required=True)
    p_synth.add_argument("--category", default="synthtex")
    p_synth.add_argument("--n-train", type=int, default=64)
    p_synth.add_argument("--n-test-normal", type=int, default=100)
    p_synth.add_argument("--n-test-defect", type=int, default=100)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return 3
    except MetricError as exc:
        print(f"metric error: {exc}", file=sys.stderr)
        return 4
    except AnopromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
