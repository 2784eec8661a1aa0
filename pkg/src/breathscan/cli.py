"""Command-line interface: ``breathscan {features,annotate,selftrain,detect,eval}``.

Every subcommand reads an optional JSON config (``--config``); flags override
the file. Exit codes: 0 success, 1 configuration error, 2 partial failure
(some utterances failed), 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .audio_io import load_wav, parse_pause_file
from .config import PipelineConfig, load_config
from .errors import BreathScanError, ConfigError, TrainingAbort, ValidationError
from .evaluation import metrics_at, sweep_threshold, write_metrics_json, write_per_utterance_csv
from .features import extract_features, write_feature_dump
from .nn.checkpoint import load_checkpoint
from .pipeline import intervals_from_probs, training_set, validation_set, withhold_pause_labels
from .rule_annotator import annotate_corpus, gold_breath_spans, write_annotation_file
from .self_training import run_self_training

log = logging.getLogger("breathscan")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_ABORT = 0, 1, 2, 3


def _setup_logging():
    name = os.environ.get("BREATHSCAN_LOG", "WARNING").strip().upper()
    level = int(name) if name.isdigit() else getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _wav_files(path: Path):
    if path.is_dir():
        return sorted(path.glob("*.wav"))
    return [path]


def _load_clips(directory: Path, jobs=1):
    """Load every WAV of ``directory``; returns (clips, failed file names)."""
    def work(p):
        try:
            return load_wav(p)
        except (OSError, BreathScanError) as exc:
            log.error("cannot read %s: %s", p, exc)
            return None

    files = _wav_files(directory)
    clips = _map(work, files, jobs)
    failed = [f.name for f, c in zip(files, clips) if c is None]
    return [c for c in clips if c is not None], failed


# -- subcommands -------------------------------------------------------------------------------

def cmd_features(cfg: PipelineConfig, in_dir, out_dir, pipeline="model", jobs=1, dry_run=False) -> int:
    frame_cfg = cfg.model_pipeline if pipeline == "model" else cfg.rule_pipeline
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"input directory does not exist: {in_dir}")
    files = _wav_files(in_dir)
    if dry_run:
        _print_plan(cfg, "features", inputs=len(files), frame_config=frame_cfg.__dict__, out_dir=str(out_dir))
        return EXIT_OK
    if not files:
        print("0 files")
        return EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(path):
        try:
            feats = extract_features(load_wav(path), frame_cfg)
            write_feature_dump(out_dir / f"{path.stem}.bsft", feats)
            return True
        except (OSError, BreathScanError, ValueError) as exc:
            log.error("%s: %s", path.name, exc)
            return False

    ok = _map(work, files, jobs)
    print(f"{sum(ok)} of {len(files)} files written to {out_dir}")
    return EXIT_OK if all(ok) else EXIT_PARTIAL


def cmd_annotate(cfg: PipelineConfig, out=None, gold=None, jobs=1, dry_run=False) -> int:
    corpus = cfg.path("corpus_dir")
    pause_path = cfg.path("pause_tsv")
    out = Path(out) if out else cfg.path("annotation_tsv", must_exist=False)
    gold_path = Path(gold) if gold else None
    if gold_path is not None and not gold_path.exists():
        raise ConfigError(f"gold file does not exist: {gold_path}")
    if dry_run:
        _print_plan(cfg, "annotate", corpus=str(corpus), pauses=str(pause_path), out=str(out))
        return EXIT_OK
    pauses = parse_pause_file(pause_path)
    clips, failed = _load_clips(corpus, jobs)
    result = annotate_corpus(clips, pauses, cfg.rule_thresholds, cfg.rule_pipeline, cfg.model_pipeline,
                             gold=gold_breath_spans(gold_path) if gold_path else None, jobs=jobs)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_annotation_file(out, result.classes)
    report = dict(result.report, unreadable_files=failed)
    report_path = out.with_name(out.name + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    c = result.report["counts"]
    print(f"{result.report['pauses']} pauses: {c['breath']} breath, {c['non-breath']} non-breath, "
          f"{c['unclassified']} unclassified -> {out}")
    return EXIT_PARTIAL if failed or result.report["failed"] else EXIT_OK


def cmd_selftrain(cfg: PipelineConfig, jobs=1, dry_run=False) -> int:
    corpus = cfg.path("corpus_dir")
    pause_path = cfg.path("pause_tsv")
    val_dir = cfg.path("validation_dir")
    val_pause_path = cfg.path("validation_pause_tsv")
    gold_path = cfg.path("gold_tsv")
    run_dir = cfg.path("run_dir", must_exist=False)
    if dry_run:
        _print_plan(cfg, "selftrain", corpus=str(corpus), validation=str(val_dir), run_dir=str(run_dir),
                    max_iterations=cfg.self_training.max_iterations)
        return EXIT_OK

    clips, failed = _load_clips(corpus, jobs)
    pauses = parse_pause_file(pause_path)
    annotation = annotate_corpus(clips, pauses, cfg.rule_thresholds, cfg.rule_pipeline,
                                 cfg.model_pipeline, jobs=jobs)
    if cfg.self_training.withhold_fraction > 0:
        annotation = withhold_pause_labels(annotation, cfg.self_training.withhold_fraction, cfg.seed,
                                           cfg.model_pipeline)
    train = training_set(clips, annotation, cfg.model_pipeline)
    val_clips, val_failed = _load_clips(val_dir, jobs)
    val = validation_set(val_clips, parse_pause_file(val_pause_path), gold_breath_spans(gold_path),
                         cfg.model_pipeline)

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    (run_dir / "annotation_report.json").write_text(
        json.dumps(annotation.report, indent=2, sort_keys=True) + "\n")
    result = run_self_training(train, val, cfg.self_train_config(), cfg.detector, run_dir=run_dir)
    shutil.copyfile(run_dir / f"iter_{result.output_iteration}" / "checkpoint.bsck", run_dir / "best.bsck")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    best = result.history[result.output_iteration]
    print(f"output iteration {result.output_iteration}: validation IoU {best['iou']:.4f} "
          f"(iteration 0: {result.history[0]['iou']:.4f}) -> {run_dir / 'best.bsck'}")
    return EXIT_PARTIAL if failed or val_failed or annotation.report["failed"] else EXIT_OK


def cmd_detect(cfg: PipelineConfig, checkpoint, inputs, out_dir, threshold=None, min_duration=None,
               jobs=1, dry_run=False) -> int:
    threshold = cfg.detect.threshold if threshold is None else threshold
    min_duration = cfg.detect.min_duration if min_duration is None else min_duration
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint does not exist: {checkpoint}")
    files = [f for p in inputs for f in _wav_files(Path(p))]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise ConfigError(f"input does not exist: {missing[0]}")
    out_dir = Path(out_dir)
    if dry_run:
        _print_plan(cfg, "detect", checkpoint=str(checkpoint), inputs=len(files), out_dir=str(out_dir),
                    threshold=threshold, min_duration=min_duration)
        return EXIT_OK
    model = load_checkpoint(checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)
    hop = cfg.model_pipeline.hop_seconds

    def work(path):
        try:
            feats = extract_features(load_wav(path), cfg.model_pipeline)
            return path.stem, model.predict([feats])[0]
        except (OSError, BreathScanError, ValueError) as exc:
            log.error("%s: %s", path.name, exc)
            return path.stem, None

    results = _map(work, files, jobs)
    n_failed = 0
    with open(out_dir / "breath_intervals.tsv", "w", encoding="utf-8") as fh:
        for utt, probs in results:
            if probs is None:
                n_failed += 1
                continue
            with open(out_dir / f"{utt}.probs.tsv", "w", encoding="utf-8") as pf:
                for i, p in enumerate(probs):
                    pf.write(f"{i}\t{i * hop:.3f}\t{p:.6f}\n")
            for s, e in intervals_from_probs(probs, threshold, hop, min_duration):
                fh.write(f"{utt}\t{s:.3f}\t{e:.3f}\n")
    print(f"{len(results) - n_failed} of {len(results)} files processed -> {out_dir}")
    return EXIT_PARTIAL if n_failed else EXIT_OK


def cmd_eval(cfg: PipelineConfig, checkpoint, out_dir=None, threshold=None, average="micro",
             jobs=1, dry_run=False) -> int:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint does not exist: {checkpoint}")
    data_dir = cfg.path("validation_dir")
    pause_path = cfg.path("validation_pause_tsv")
    gold_path = cfg.path("gold_tsv")
    out_dir = Path(out_dir) if out_dir else Path(".")
    if dry_run:
        _print_plan(cfg, "eval", checkpoint=str(checkpoint), data=str(data_dir), gold=str(gold_path),
                    out_dir=str(out_dir), threshold=threshold if threshold is not None else "sweep")
        return EXIT_OK
    model = load_checkpoint(checkpoint)
    clips, failed = _load_clips(data_dir, jobs)
    val = validation_set(clips, parse_pause_file(pause_path), gold_breath_spans(gold_path),
                         cfg.model_pipeline)
    probs = model.predict([v.features for v in val])
    gold = [v.gold for v in val]
    if threshold is None:
        threshold, metrics = sweep_threshold(probs, gold)
        if average != "micro":
            metrics = metrics_at(probs, gold, threshold, average=average)
    else:
        metrics = metrics_at(probs, gold, threshold, average=average)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out_dir / "metrics.json", metrics, averaging=average, checkpoint=checkpoint.name,
                       utterances=len(val))
    write_per_utterance_csv(out_dir / "per_utterance.csv", probs, gold, threshold)
    print(f"IoU {metrics.iou:.4f}  precision {metrics.precision:.4f}  recall {metrics.recall:.4f}  "
          f"threshold {metrics.threshold:.4f}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _print_plan(cfg, command, **details):
    print(json.dumps({"command": command, **details, "config": cfg.to_dict()}, indent=2, sort_keys=True,
                     default=str))


# -- argument parsing --------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON literal or string); repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="per-utterance parallelism")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    common.add_argument("--no-zcr", action="store_true", help="drop the ZCR input channel")
    common.add_argument("--no-vms", action="store_true", help="drop the VMS input channel")

    parser = argparse.ArgumentParser(prog="breathscan", description="Breath detection in speech.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="extract and dump feature sequences")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--pipeline", choices=["model", "rule"], default="model")

    p = sub.add_parser("annotate", parents=[common], help="rule-based pause annotation")
    p.add_argument("--out", help="annotation TSV (default: paths.annotation_tsv)")
    p.add_argument("--gold", help="gold annotation TSV for a precision/recall report")

    p = sub.add_parser("selftrain", parents=[common], help="self-training into paths.run_dir")
    p.add_argument("--run-dir")
    p.add_argument("--no-nonbreath-set", action="store_true", help="train without rule non-breath labels")
    p.add_argument("--no-pseudo-labels", action="store_true", help="retrain without pseudo-labels")
    p.add_argument("--accumulate-pseudo", action="store_true",
                   help="keep pseudo-labels from earlier iterations")

    p = sub.add_parser("detect", parents=[common], help="frame probabilities and breath intervals")
    p.add_argument("checkpoint")
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-duration", type=float, help="seconds; shorter intervals are dropped")

    p = sub.add_parser("eval", parents=[common], help="metrics against gold annotations")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="output directory for metrics.json")
    p.add_argument("--threshold", type=float, help="fixed threshold instead of the IoU sweep")
    p.add_argument("--average", choices=["micro", "macro"], default="micro")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_zcr:
        overrides["detector.use_zcr"] = False
    if args.no_vms:
        overrides["detector.use_vms"] = False
    if getattr(args, "no_nonbreath_set", False):
        overrides["self_training.use_non_breath"] = False
    if getattr(args, "no_pseudo_labels", False):
        overrides["self_training.use_pseudo_labels"] = False
    if getattr(args, "accumulate_pseudo", False):
        overrides["self_training.accumulate_pseudo"] = True
    if getattr(args, "run_dir", None):
        overrides["paths.run_dir"] = str(Path(args.run_dir).resolve())
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        common = {"jobs": args.jobs, "dry_run": args.dry_run}
        if args.command == "features":
            return cmd_features(cfg, args.in_dir, args.out_dir, args.pipeline, **common)
        if args.command == "annotate":
            return cmd_annotate(cfg, args.out, args.gold, **common)
        if args.command == "selftrain":
            return cmd_selftrain(cfg, **common)
        if args.command == "detect":
            return cmd_detect(cfg, args.checkpoint, args.inputs, args.out, args.threshold, args.min_duration,
                              **common)
        return cmd_eval(cfg, args.checkpoint, args.out, args.threshold, args.average, **common)
    except (ConfigError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (BreathScanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
