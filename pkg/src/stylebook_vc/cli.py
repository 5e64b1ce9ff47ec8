"""Command-line interface.

Subcommands cover the full pipeline: corpus synthesis, unit fitting,
training, enrollment, conversion, the kNN baseline, the memory benchmark,
evaluation, and attention analysis. Every subcommand is deterministic given
its config and seed, exits 0 on success, and on failure prints one
machine-readable JSON error line to stderr and exits nonzero.

Config handling: `--config FILE` loads a JSON run config (missing keys fall
back to defaults), and repeated `--set section.key=value` flags override
individual fields. The output directory may also come from the
STYLEBOOK_VC_RUN_DIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio, knn
from .content import Codebook, fit_codebook, quantize
from .corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus, split_corpus
from .diffusion import DiffusionSchedule
from .harness import (
    RunConfig,
    analyze_attention,
    convert,
    enroll,
    evaluate,
    memory_table,
    train,
)
from .model import load_checkpoint
from .stylebook import Stylebook

RUN_DIR_ENV = "STYLEBOOK_VC_RUN_DIR"


class CliError(Exception):
    pass


def _load_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = RunConfig.from_dict(fileio.read_json(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        config = config.override(overrides)
    return config


def _out_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(RUN_DIR_ENV)
    if not out:
        raise CliError(f"no output directory: pass --out or set {RUN_DIR_ENV}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_source(path, content_dim: int):
    from .corpus import Utterance

    stacked, labels = fileio.read_matrix(path)
    if labels is None:
        labels = np.zeros(stacked.shape[0], dtype=np.int64)
    return Utterance(
        content_features=stacked[:, :content_dim],
        mel_frames=stacked[:, content_dim:],
        phone_labels=labels,
        speaker_id=-1,
    )


def cmd_synth_corpus(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    corpus = generate_corpus(config.corpus, config.utterances_per_speaker, config.frames_per_utterance)
    save_corpus(out, config.corpus, corpus)
    print(f"wrote {len(corpus)} utterances to {out}")
    return 0


def cmd_fit_units(args) -> int:
    _, corpus = load_corpus(args.corpus)
    frames = np.concatenate([utt.content_features for utt in corpus], axis=0)
    codebook = fit_codebook(frames, args.clusters, iters=args.iters, seed=args.seed)
    fileio.save_tensors(
        args.out,
        {"codebook.centroids": codebook.centroids.astype(np.float32)},
        {"clusters": args.clusters, "iters": args.iters, "seed": args.seed},
    )
    print(f"fit {args.clusters} units on {frames.shape[0]} frames -> {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    spec, corpus = load_corpus(args.corpus)
    config = RunConfig.from_dict({**config.to_dict(), "corpus": spec.to_dict()})
    codebook = None
    if args.codebook:
        tensors, _ = fileio.load_tensors(args.codebook)
        codebook = Codebook(centroids=tensors["codebook.centroids"].astype(np.float64))
    train_part, _ = split_corpus(corpus, config.training.train_fraction)
    result = train(config, train_part, out_dir=out, codebook=codebook)
    final = result.history[-1]
    print(
        f"trained {final['step']} steps: total={final['total']:.4f} "
        f"diffusion={final['diffusion']:.4f} encoder={final['encoder']:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_enroll(args) -> int:
    model, codebook, _ = load_checkpoint(args.checkpoint)
    _, corpus = load_corpus(args.corpus)
    targets = [utt for utt in corpus if utt.speaker_id == args.speaker]
    if args.max_utterances:
        targets = targets[: args.max_utterances]
    if not targets:
        raise CliError(f"no utterances for speaker {args.speaker}")
    book = enroll(model, codebook, targets)
    book.save(args.out)
    print(f"enrolled speaker {args.speaker} from {len(targets)} utterance(s) -> {args.out}")
    return 0


def cmd_convert(args) -> int:
    model, codebook, meta = load_checkpoint(args.checkpoint)
    schedule_args = dict(meta.get("run_config", {}).get("schedule", {}))
    if args.steps is not None:
        schedule_args["num_steps"] = args.steps
    if args.guidance_style is not None:
        schedule_args["guidance_scale_style"] = args.guidance_style
    schedule = DiffusionSchedule(**schedule_args)
    book = Stylebook.load(args.stylebook)
    source = _load_source(args.source, codebook.dim)
    mel = convert(model, codebook, source, book, schedule, seed=args.seed)
    fileio.write_matrix(args.out, mel)
    print(f"converted {mel.shape[0]} frames -> {args.out}")
    return 0


def cmd_baseline_knn(args) -> int:
    _, corpus = load_corpus(args.corpus)
    spec_dim = corpus[0].content_features.shape[1]
    targets = [utt for utt in corpus if utt.speaker_id == args.target_speaker]
    if not targets:
        raise CliError(f"no utterances for speaker {args.target_speaker}")
    bank_content = np.concatenate([utt.content_features for utt in targets], axis=0)
    bank_mel = np.concatenate([utt.mel_frames for utt in targets], axis=0)
    source = _load_source(args.source, spec_dim)
    bank = knn.TargetBank(frames=bank_content)
    idx = knn.knn_indices(bank, source.content_features, args.k)
    matched = bank_mel.astype(np.float64)[np.sort(idx, axis=1)].mean(axis=1)
    fileio.write_matrix(args.out, matched)
    kib = knn.bank_memory_bytes(bank) / 1024
    print(f"matched {matched.shape[0]} frames with k={args.k}; bank holds "
          f"{bank.num_frames} frames ({kib:.1f} KiB) -> {args.out}")
    return 0


def cmd_bench_memory(args) -> int:
    table = memory_table()
    lines = ["method\t10s\t60s\t300s"]
    for method, row in table.items():
        lines.append(f"{method}\t{row['10']:g}\t{row['60']:g}\t{row['300']:g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_evaluate(args) -> int:
    model, codebook, meta = load_checkpoint(args.checkpoint)
    _, corpus = load_corpus(args.corpus)
    fraction = meta.get("run_config", {}).get("training", {}).get("train_fraction", 0.75)
    _, eval_part = split_corpus(corpus, fraction)
    report = evaluate(
        model,
        codebook,
        eval_part,
        num_pairs=args.pairs,
        seed=args.seed,
        loss_history=meta.get("history", []),
    )
    fileio.write_json(args.out, report.to_dict())
    print(
        f"pairs={report.num_pairs} content_accuracy={report.content_accuracy:.4f} "
        f"sim_target={report.style_similarity_to_target:.4f} "
        f"sim_source={report.style_similarity_to_source:.4f} "
        f"prefer_target={report.target_preference_rate:.4f}"
    )
    return 0


def cmd_analyze_attention(args) -> int:
    model, codebook, meta = load_checkpoint(args.checkpoint)
    _, corpus = load_corpus(args.corpus)
    fraction = meta.get("run_config", {}).get("training", {}).get("train_fraction", 0.75)
    _, eval_part = split_corpus(corpus, fraction)
    num_classes = meta.get("run_config", {}).get("corpus", {}).get("num_phone_classes")
    analysis = analyze_attention(model, codebook, eval_part, num_classes)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    profiles_path = prefix.with_name(prefix.name + "_profiles.tsv")
    similarity_path = prefix.with_name(prefix.name + "_similarity.tsv")
    profiles_path.write_text(analysis.profiles_tsv(), encoding="utf-8")
    similarity_path.write_text(analysis.similarity_tsv(), encoding="utf-8")
    print(
        f"classes={analysis.class_ids} globally_used={analysis.globally_used_entries} "
        f"empty={analysis.empty_classes}"
    )
    print(f"wrote {profiles_path} and {similarity_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylebook-vc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. training.num_steps=500")

    p = sub.add_parser("synth-corpus", help="generate the synthetic corpus")
    add_config_flags(p)
    p.add_argument("--out", help=f"output directory (or ${RUN_DIR_ENV})")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("fit-units", help="fit the k-means unit codebook")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_units)

    p = sub.add_parser("train", help="train the conversion model")
    add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help=f"run directory (or ${RUN_DIR_ENV})")
    p.add_argument("--codebook", help="pre-fit codebook container (optional)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="build and store a speaker's stylebook")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--speaker", type=int, required=True)
    p.add_argument("--max-utterances", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("convert", help="convert a source utterance with a stylebook")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stylebook", required=True)
    p.add_argument("--source", required=True, help="utterance matrix file")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="sampler steps override")
    p.add_argument("--guidance-style", type=float, default=None, help="style guidance override")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("baseline-knn", help="kNN frame-matching baseline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-speaker", type=int, required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=knn.DEFAULT_K)
    p.set_defaults(func=cmd_baseline_knn)

    p = sub.add_parser("bench-memory", help="print the style-storage memory table")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_bench_memory)

    p = sub.add_parser("evaluate", help="cross-speaker conversion metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--pairs", type=int, default=112)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-attention", help="per-class attention profile tables")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_analyze_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
