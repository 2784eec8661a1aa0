"""
Replicating the LibriTTS-R experiments
======================================

This script runs the full pipeline on real data: rule annotation scored
against manual labels (the precision/recall table), self-training with the
iteration-by-iteration validation IoU, and a final test-set evaluation.

It needs data that cannot ship with this repository:

* LibriTTS-R audio as WAV files (24 kHz is fine; features are resampled),
  one directory each for the training, validation and test utterances;
* pause TSVs exported from Montreal Forced Aligner output, one row per pause:
  ``utterance_id<TAB>start<TAB>end`` in seconds (``utterance_id`` is the WAV
  file stem);
* gold annotation TSVs for validation and test pauses:
  ``utterance_id<TAB>start<TAB>end<TAB>breath|non-breath``, where breath rows
  give the breath extent.

Published reference figures: breath precision 0.982 and recall 0.450 for the
rule annotator; validation IoU 0.777 -> 0.809 -> 0.829 -> 0.836 -> 0.827 with
iteration 3 returned; test IoU 0.836, precision 0.924, recall 0.897. No
tolerance is promised. Corpus selection, alignment and manual labels are
external, and the ZCR thresholds of the rule table may need recalibrating
(see README).

Example::

    python demos/replicate_libritts.py \\
        --train-audio data/train --train-pauses data/train_pauses.tsv \\
        --val-audio data/dev --val-pauses data/dev_pauses.tsv --val-gold data/dev_gold.tsv \\
        --test-audio data/test --test-pauses data/test_pauses.tsv --gold-tsv data/test_gold.tsv \\
        --out replication
"""

import argparse
import json
import sys
from pathlib import Path

from breathscan.cli import cmd_annotate, cmd_eval, cmd_selftrain
from breathscan.config import PipelineConfig
from breathscan.nn.model import DetectorConfig

PUBLISHED = {
    "rule_breath_precision": 0.982,
    "rule_breath_recall": 0.450,
    "validation_iou": [0.777, 0.809, 0.829, 0.836, 0.827],
    "output_iteration": 3,
    "test": {"iou": 0.836, "precision": 0.924, "recall": 0.897},
}


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[1],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--train-audio", required=True, type=Path)
    p.add_argument("--train-pauses", required=True, type=Path)
    p.add_argument("--val-audio", required=True, type=Path)
    p.add_argument("--val-pauses", required=True, type=Path)
    p.add_argument("--val-gold", required=True, type=Path)
    p.add_argument("--test-audio", required=True, type=Path)
    p.add_argument("--test-pauses", required=True, type=Path)
    p.add_argument("--gold-tsv", required=True, type=Path, help="gold annotation of the test pauses")
    p.add_argument("--out", default=Path("replication"), type=Path)
    p.add_argument("--preset", choices=["paper", "desk"], default="paper",
                   help="paper: 8 blocks / 256 hidden (GPU-scale); desk: 2 blocks / 32 hidden")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, help="peak learning rate (default 2e-5 paper, 2e-3 desk)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)

    # One config for training, one that points the evaluation paths at the test split.
    detector = DetectorConfig.paper() if args.preset == "paper" else DetectorConfig.desk()
    lr = args.lr if args.lr is not None else (2e-5 if args.preset == "paper" else 2e-3)
    base = {
        "seed": args.seed,
        "detector": detector.__dict__,
        "training": {"epochs": args.epochs, "batch_size": args.batch_size, "peak_lr": lr},
    }
    train_paths = {
        "corpus_dir": str(args.train_audio.resolve()),
        "pause_tsv": str(args.train_pauses.resolve()),
        "validation_dir": str(args.val_audio.resolve()),
        "validation_pause_tsv": str(args.val_pauses.resolve()),
        "gold_tsv": str(args.val_gold.resolve()),
        "annotation_tsv": str(out / "train_annotation.tsv"),
        "run_dir": str(out / "run"),
    }
    test_paths = dict(train_paths, corpus_dir=str(args.test_audio.resolve()),
                      pause_tsv=str(args.test_pauses.resolve()),
                      validation_dir=str(args.test_audio.resolve()),
                      validation_pause_tsv=str(args.test_pauses.resolve()),
                      gold_tsv=str(args.gold_tsv.resolve()),
                      annotation_tsv=str(out / "test_annotation.tsv"))
    train_cfg = PipelineConfig.from_dict(dict(base, paths=train_paths), base_dir=out)
    test_cfg = PipelineConfig.from_dict(dict(base, paths=test_paths), base_dir=out)
    (out / "config.json").write_text(train_cfg.to_json())

    # Rule annotation scored against the manual test labels.
    status = cmd_annotate(test_cfg, gold=args.gold_tsv, jobs=args.jobs)
    report = json.loads((out / "test_annotation.tsv.report.json").read_text())
    rule = report["gold"]["per_pause"]["breath"]

    # Self-training on the training split, thresholds calibrated on validation.
    status = max(status, cmd_selftrain(train_cfg, jobs=args.jobs))
    history = [json.loads(line) for line in (out / "run" / "history.jsonl").read_text().splitlines()]
    k = int((out / "run" / "output_iteration.txt").read_text())

    # Test-set metrics at the fixed threshold chosen on validation.
    threshold = history[k]["threshold"]
    status = max(status, cmd_eval(test_cfg, out / "run" / "best.bsck", out / "test_eval",
                                  threshold=threshold, jobs=args.jobs))
    test = json.loads((out / "test_eval" / "metrics.json").read_text())["metrics"]

    summary = {
        "measured": {
            "rule_breath_precision": rule["precision"],
            "rule_breath_recall": rule["recall"],
            "validation_iou": [h["iou"] for h in history],
            "output_iteration": k,
            "test": {name: test[name] for name in ("iou", "precision", "recall")},
        },
        "published": PUBLISHED,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return status


if __name__ == "__main__":
    sys.exit(main())
