"""Command-line entry point for the full audio-to-motion pipeline.

Subcommands:

* ``prepare``  — align a raw corpus into the training cache
* ``synth``    — generate a synthetic corpus directly into cache format
* ``train``    — optimize one classifier branch or the motion generator
* ``ablate``   — train a motion-model ablation variant
* ``infer``    — audio file -> decoded labels -> motion CSV
* ``evaluate`` — compare predicted vs ground-truth motion directories

Exit codes: 0 success, 2 validation error, 3 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import dataset_io, metrics, synth_data, trainer
from .audio_features import MelConfig, normalize_mel
from .bf_model import bf_forward, decode_onehot
from .dataset_io import (NormalizationStats, SplitSpec, compute_norm_stats,
                         denormalize_motion, load_corpus_cache,
                         load_recording, split_dataset)
from .errors import ConfigError, RuntimeFailure, ValidationError
from .labels import CLASS_COUNTS, STREAMS
from .motion_model import (MotionSequence, SkeletonSchema, default_skeleton,
                           motion_forward)
from .trainer import (ablation_keep_columns, load_checkpoint,
                      load_experiment_config, run_ablation)

CLI_TARGETS = {"bow": "bf_bow", "str": "bf_str", "fing": "bf_fing",
               "pos": "bf_pos", "motion": "motion"}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap torch CPU threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="violinmotion",
        description="violin audio -> bowing/fingering -> skeletal motion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="align a raw corpus into the cache")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)

    p = sub.add_parser("synth", help="write a synthetic corpus cache")
    p.add_argument("--config", required=True, type=Path,
                   help="JSON with synthetic-corpus settings")
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)

    for name in ("train", "ablate"):
        p = sub.add_parser(name)
        if name == "train":
            p.add_argument("--target", required=True, choices=CLI_TARGETS)
        else:
            p.add_argument("--variant", required=True,
                           choices=[v for v in trainer.ABLATIONS if v != "none"])
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--data", required=True, type=Path,
                       help="cache directory from prepare/synth")
        p.add_argument("--out", required=True, type=Path)
        _add_common(p)

    p = sub.add_parser("infer", help="audio -> labels -> motion CSV")
    p.add_argument("--audio", required=True, type=Path)
    p.add_argument("--bow-ckpt", required=True, type=Path)
    p.add_argument("--str-ckpt", required=True, type=Path)
    p.add_argument("--fing-ckpt", required=True, type=Path)
    p.add_argument("--pos-ckpt", required=True, type=Path)
    p.add_argument("--motion-ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path,
                   help="output motion CSV path")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--schema", type=Path, default=None)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--stats", type=Path, default=None,
                   help="normalize both corpora with these stats first")
    p.add_argument("--plots", type=Path, default=None,
                   help="directory for per-metric line plots")
    _add_common(p)
    return parser


def _load_split(args, config, data_dir: Path) -> SplitSpec:
    if config is not None and config.split_path:
        return SplitSpec.from_json(config.split_path)
    candidate = data_dir / "split.json"
    if candidate.exists():
        return SplitSpec.from_json(candidate)
    raise ConfigError(
        f"no split file: set split_path in the config or put split.json "
        f"in {data_dir}")


def _load_stats(data_dir: Path) -> NormalizationStats | None:
    candidate = data_dir / "stats.json"
    return NormalizationStats.from_json(candidate) if candidate.exists() else None


def cmd_prepare(args) -> int:
    config = load_experiment_config(args.config)
    wavs = sorted(args.corpus.glob("*.wav"))
    if not wavs:
        raise ConfigError(f"no .wav files under {args.corpus}")
    samples, failures = [], []
    for wav in wavs:
        stem = wav.stem
        try:
            rec = load_recording(wav, wav.with_name(f"{stem}.motion.csv"),
                                 wav.with_name(f"{stem}.annotation.json"))
            samples.append(dataset_io.align(rec, config.frame_rate, config.mel))
            if args.verbose:
                print(f"  {stem}: {samples[-1].n_frames} aligned frames")
        except (ValidationError, OSError) as exc:
            failures.append((stem, f"{type(exc).__name__}: {exc}"))
    if failures:
        width = max(len(name) for name, _ in failures)
        print("failed pieces:", file=sys.stderr)
        for name, msg in failures:
            print(f"  {name.ljust(width)}  {msg}", file=sys.stderr)
        return 2

    split = _load_split(args, config, args.corpus)
    train_s, _val_s, _test_s = split_dataset(samples, split)
    stats = compute_norm_stats(train_s)
    args.out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        dataset_io.save_sample_cache(args.out, sample)
    stats.to_json(args.out / "stats.json")
    split.to_json(args.out / "split.json")
    print(f"cached {len(samples)} pieces -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    payload = json.loads(args.config.read_text())
    if args.seed is not None:
        payload["seed"] = args.seed
    config = synth_data.SynthConfig(**payload)
    samples, split = synth_data.generate_corpus(config)
    train_s, _, _ = split_dataset(samples, split)
    stats = compute_norm_stats(train_s)

    args.out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        dataset_io.save_sample_cache(args.out, sample, synthetic=True)
    split.to_json(args.out / "split.json")
    stats.to_json(args.out / "stats.json")
    gt_dir = args.out / "motion_gt"
    gt_dir.mkdir(exist_ok=True)
    for sample in samples:
        dataset_io.write_motion_csv(gt_dir / f"{sample.piece_id}.motion.csv",
                                    sample.motion)
    delta = synth_data.min_tuple_separation()
    (args.out / "corpus_meta.json").write_text(json.dumps(
        {"synthetic": True, "config": asdict(config),
         "min_tuple_separation": delta}, indent=2))
    print(f"wrote {len(samples)} synthetic pieces -> {args.out} "
          f"(min tuple separation {delta:.4f})")
    return 0


def _prepare_training(args):
    config = load_experiment_config(args.config)
    samples, meta = load_corpus_cache(args.data)
    if meta["mel_config_hash"] != config.mel.config_hash():
        raise ConfigError(
            f"cache was built with feature config {meta['mel_config_hash']}, "
            f"experiment config hashes to {config.mel.config_hash()}")
    split = _load_split(args, config, args.data)
    train_s, val_s, _test_s = split_dataset(samples, split)
    stats = _load_stats(args.data)
    return config, train_s, val_s, stats


def cmd_train(args) -> int:
    config, train_s, val_s, stats = _prepare_training(args)
    target = CLI_TARGETS[args.target]
    overrides = {} if args.seed is None else {"seed": args.seed}
    tc = config.train_config(target, **overrides)
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / f"{args.target}.log.jsonl"
    if target == "motion":
        result = trainer.train(tc, train_s, val_s,
                               motion_config=config.motion_config(),
                               schema=config.schema(), stats=stats,
                               log_path=log_path)
    else:
        n_classes = CLASS_COUNTS[tc.stream]
        result = trainer.train(tc, train_s, val_s,
                               bf_config=config.bf_config(n_classes),
                               stats=stats, log_path=log_path)
    ckpt = result.save(args.out / f"{args.target}.ckpt")
    if args.verbose:
        for row in result.history:
            print(f"  epoch {row['epoch']}: train {row['train_loss']} "
                  f"val {row['val_loss']:.6f}")
    print(f"{args.target}: best val loss {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch} -> {ckpt}")
    return 0


def cmd_ablate(args) -> int:
    config, train_s, val_s, stats = _prepare_training(args)
    overrides = {} if args.seed is None else {"seed": args.seed}
    tc = config.train_config("motion", **overrides)
    args.out.mkdir(parents=True, exist_ok=True)
    result = run_ablation(tc, args.variant, train_s, val_s,
                          motion_config=config.motion_config(),
                          schema=config.schema(), stats=stats,
                          log_path=args.out / f"{args.variant}.log.jsonl")
    ckpt = result.save(args.out / f"{args.variant}.ckpt")
    print(f"ablation {args.variant}: best val loss "
          f"{result.best_val_loss:.6f} at epoch {result.best_epoch} -> {ckpt}")
    return 0


def cmd_infer(args) -> int:
    branch_paths = {"bow": args.bow_ckpt, "str": args.str_ckpt,
                    "fing": args.fing_ckpt, "pos": args.pos_ckpt}
    branches, payloads = {}, {}
    for stream, path in branch_paths.items():
        branches[stream], payloads[stream] = load_checkpoint(path)
    motion_net, motion_payload = load_checkpoint(args.motion_ckpt)
    hashes = {p["mel_config_hash"] for p in payloads.values()}
    hashes.add(motion_payload["mel_config_hash"])
    if len(hashes) != 1:
        raise ConfigError(
            f"checkpoints disagree on the feature config: {sorted(hashes)}")
    digests = {p["stats_digest"] for p in payloads.values()}
    digests.add(motion_payload["stats_digest"])
    if len(digests) != 1:
        raise ConfigError(
            f"checkpoints disagree on normalization stats: {sorted(digests)}")
    stats = motion_payload["stats"]

    mel_config = MelConfig(**motion_payload["mel_config"])
    wave, rate = dataset_io.load_audio(args.audio)
    mel = dataset_io.features_for_waveform(wave, mel_config)
    mel = normalize_mel(mel, stats)
    frame_rate = mel_config.sample_rate / mel_config.hop

    decoded = {}
    for stream in STREAMS:
        probs = bf_forward(branches[stream], mel.data)
        decoded[stream] = decode_onehot(probs)
    bf = np.concatenate([decoded[s] for s in STREAMS], axis=1)
    keep = ablation_keep_columns(motion_payload["train_config"]["ablation"])
    motion = motion_forward(motion_net, bf[:, keep], mel.data,
                            frame_rate=frame_rate)
    motion = denormalize_motion(motion, stats)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    dataset_io.write_motion_csv(args.out, motion)
    labels_out = args.out.with_suffix(".labels.json")
    labels_out.write_text(json.dumps(
        {stream: (decoded[stream].argmax(axis=1) + 1).tolist()
         for stream in STREAMS}))
    print(f"wrote {motion.n_frames} frames -> {args.out} "
          f"(labels -> {labels_out.name})")
    return 0


def _read_motion_dir(path: Path) -> dict[str, MotionSequence]:
    files = sorted(path.glob("*.csv"))
    if not files:
        raise ConfigError(f"no motion CSV files under {path}")
    return {f.name.removesuffix(".motion.csv").removesuffix(".csv"):
            dataset_io.read_motion_csv(f) for f in files}


def cmd_evaluate(args) -> int:
    pred = _read_motion_dir(args.pred)
    gt = _read_motion_dir(args.gt)
    schema = SkeletonSchema.from_json(args.schema) if args.schema \
        else default_skeleton()
    if args.stats:
        stats = NormalizationStats.from_json(args.stats)
        pred = {k: dataset_io.normalize_motion(v, stats) for k, v in pred.items()}
        gt = {k: dataset_io.normalize_motion(v, stats) for k, v in gt.items()}
    report = metrics.evaluate(pred, gt, schema)
    report.to_json(args.out)
    print(report.format_table())
    if args.plots:
        _write_plots(report, args.plots)
    return 0


def _write_plots(report: metrics.MetricReport, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    pieces = sorted(report.per_piece)
    for name in metrics._METRIC_FIELDS:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(range(len(pieces)),
                [report.per_piece[p][name] for p in pieces], marker="o")
        ax.axhline(getattr(report, name), linestyle="--", linewidth=1,
                   label="mean")
        ax.set_xticks(range(len(pieces)))
        ax.set_xticklabels(pieces, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(name)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}.png", dpi=100)
        plt.close(fig)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    handlers = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train,
                "ablate": cmd_ablate, "infer": cmd_infer,
                "evaluate": cmd_evaluate}
    try:
        return handlers[args.command](args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
