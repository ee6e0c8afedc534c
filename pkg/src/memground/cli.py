"""Command-line pipeline: corpus generation, training, evaluation, the
ablation matrix, and memory snapshot / projection export."""

from __future__ import annotations

import argparse
import os
import statistics
import sys

import numpy as np

from . import grounding, memory, metrics, synthdata, train as training
from .config import RunConfig, RunConfigError
from .model import GroundingModel
from .synthdata import CorpusConfigError


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.corpus.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
        if cfg.epochs < 1:
            raise RunConfigError("epochs must be >= 1")
    if getattr(args, "memory", None) is not None:
        cfg.memory_enabled = args.memory == "on"
    if getattr(args, "fusion", None) is not None:
        cfg.fusion_mode = args.fusion
        cfg.fusion_enabled = True
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "topn", None) is not None:
        cfg.top_n = args.topn
    return cfg


def _corpus_for(cfg: RunConfig, corpus_path, generate_missing=True):
    if corpus_path and os.path.exists(corpus_path):
        return synthdata.load_corpus(corpus_path)
    corpus = synthdata.generate_corpus(cfg.corpus)
    if corpus_path and generate_missing:
        os.makedirs(os.path.dirname(corpus_path) or ".", exist_ok=True)
        synthdata.save_corpus(corpus_path, corpus)
    return corpus


def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    corpus = synthdata.generate_corpus(cfg.corpus)
    path = args.corpus or os.path.join(cfg.out_dir, "corpus.bin")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    synthdata.save_corpus(path, corpus)
    rare = sum(s.rare for s in corpus.samples)
    print(f"wrote {path}: {len(corpus.samples)} samples, "
          f"{rare} rare ({100.0 * rare / len(corpus.samples):.1f}%)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg, args.corpus)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = GroundingModel(cfg.model_config())
    result = training.train_model(model, corpus, cfg, log=print,
                                  checkpoint_dir=cfg.out_dir)
    training.write_loss_csv(os.path.join(cfg.out_dir, "loss.csv"), result)
    print(f"done in {result.wall_seconds:.1f}s; best epoch {result.best_epoch} "
          f"val R@1/0.5 {result.best_val_recall:.2f}")
    return 0


def cmd_eval(args) -> int:
    model, _, _, _, cfg = training.load_checkpoint(args.checkpoint)
    if getattr(args, "topn", None) is not None:
        cfg.top_n = args.topn
    out_dir = args.out or cfg.out_dir
    corpus = _corpus_for(cfg, args.corpus, generate_missing=False)
    samples = corpus.split(args.split)
    if not samples:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return 2
    report, records = training.evaluate_model(model, samples, top_n=cfg.top_n)
    os.makedirs(out_dir, exist_ok=True)
    metrics.write_report_text(os.path.join(out_dir, f"metrics_{args.split}.txt"), report)
    metrics.write_report_csv(os.path.join(out_dir, f"metrics_{args.split}.csv"), report)
    grounding.write_prediction_dump(
        os.path.join(out_dir, f"predictions_{args.split}.jsonl"), records)
    print(metrics.format_report(report), end="")
    return 0


def _ablation_variants():
    return [
        ("baseline", {"memory_enabled": False, "fusion_enabled": False}),
        ("memory-only", {"memory_enabled": True, "fusion_enabled": False}),
        ("attention-only", {"memory_enabled": False, "fusion_enabled": True}),
        ("full", {"memory_enabled": True, "fusion_enabled": True}),
        ("fusion-inter-only", {"fusion_mode": "inter-only"}),
        ("fusion-no-self", {"fusion_mode": "no-self"}),
        ("fusion-no-calibration", {"fusion_mode": "no-calibration"}),
    ]


def run_variant(cfg: RunConfig, corpus, name: str, overrides: dict, seed: int):
    """Train one ablation variant and return its test-split recall entry."""
    import dataclasses
    variant = dataclasses.replace(cfg, **overrides)
    variant.seed = seed
    model = GroundingModel(variant.model_config())
    training.train_model(model, corpus, variant)
    report, _ = training.evaluate_model(
        model, corpus.split("test"), grid=((1, 0.5), (1, 0.7)), top_n=variant.top_n)
    return {"variant": name, "seed": seed, "recalls": report.recalls}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg, args.corpus)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = []
    for name, overrides in _ablation_variants():
        per_seed = [run_variant(cfg, corpus, name, overrides, seed) for seed in seeds]
        entry = {"variant": name}
        for key, split in (("r1_05", "overall"), ("r1_05_rare", "rare"),
                           ("r1_05_common", "common")):
            values = [r["recalls"][(1, 0.5)][split] for r in per_seed]
            values = [v for v in values if v is not None]
            entry[key] = statistics.median(values) if values else float("nan")
        entry["r1_07"] = statistics.median(
            [r["recalls"][(1, 0.7)]["overall"] for r in per_seed])
        rows.append(entry)
        print(f"{name:24s} R@1/0.5 {entry['r1_05']:6.2f}  "
              f"rare {entry['r1_05_rare']:6.2f}  common {entry['r1_05_common']:6.2f}  "
              f"R@1/0.7 {entry['r1_07']:6.2f}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    import csv
    with open(os.path.join(cfg.out_dir, "ablation.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_export_memory(args) -> int:
    model, _, _, _, cfg = training.load_checkpoint(args.checkpoint)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    for i, bank in enumerate(model.banks()):
        path = os.path.join(out_dir, f"memory_{bank.domain}_{i}.bank")
        memory.save_bank(path, bank)
        print(f"wrote {path} ({bank.n_slots}x{bank.dim}, {bank.write_count} writes)")
    return 0


def cmd_project_memory(args) -> int:
    if args.bank:
        banks = [(os.path.basename(args.bank), memory.load_bank(args.bank))]
        out_dir = args.out or "."
    else:
        model, _, _, _, cfg = training.load_checkpoint(args.checkpoint)
        banks = [(f"memory_{b.domain}_{i}", b) for i, b in enumerate(model.banks())]
        out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    for name, bank in banks:
        projection = metrics.memory_projection(bank.slots)
        path = os.path.join(out_dir, f"{name}_projection.csv")
        metrics.write_projection_csv(path, projection)
        print(f"wrote {path} ({projection.shape[0]} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memground",
        description="memory-augmented temporal grounding on a synthetic corpus")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--corpus", help="corpus container path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gen-corpus", help="generate and write the corpus container")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model, write loss curve and checkpoints")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--memory", choices=("on", "off"))
    p.add_argument("--fusion", choices=("full", "inter-only", "no-calibration", "no-self"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--topn", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the memory/attention and fusion variants")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", help="comma-separated seeds, medians reported")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-memory", help="write memory bank snapshots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_memory)

    p = sub.add_parser("project-memory", help="write 2-D slot projections as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--bank", help="project a snapshot file instead of a checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_project_memory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "project-memory" and not (args.checkpoint or args.bank):
        parser.error("project-memory needs --checkpoint or --bank")
    try:
        return args.func(args)
    except (RunConfigError, CorpusConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
