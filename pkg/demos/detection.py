"""
Detecting breaths with the command-line tool
============================================

The ``breathscan`` command covers the whole workflow: ``annotate``,
``selftrain``, ``detect`` and ``eval``, all driven by one JSON config. This
demo writes a synthetic experiment, trains a detector and turns frame
probabilities into breath intervals.
"""

import json
import tempfile
from pathlib import Path

from breathscan.cli import main
from breathscan.synthetic import write_selftrain_experiment

work = Path(tempfile.mkdtemp(prefix="breathscan-demo-"))
exp = write_selftrain_experiment(work, seed=0)
print((exp / "config.json").read_text())

# %%
# Self-training with the experiment config, about 40 s on one core. ``--set``
# overrides single values, e.g. ``--set training.epochs=20``.
cfg = ["--config", str(exp / "config.json")]
main(["selftrain", *cfg])
history = [json.loads(line) for line in (exp / "run" / "history.jsonl").read_text().splitlines()]
k = int((exp / "run" / "output_iteration.txt").read_text())
threshold = history[k]["threshold"]

# %%
# Frame probabilities go to ``<utterance>.probs.tsv``; runs at or above the
# validation threshold, at least 50 ms long, go to ``breath_intervals.tsv``.
main(["detect", str(exp / "run" / "best.bsck"), str(exp / "validation"), "--out", str(work / "detect"),
      "--threshold", str(threshold), "--min-duration", "0.05", *cfg])
print("\n".join((work / "detect" / "breath_intervals.tsv").read_text().splitlines()[:8]))

# %%
# Gold breath extents of the same utterances, for comparison.
gold = (exp / "validation" / "gold.tsv").read_text().splitlines()
print("\n".join([line for line in gold if line.endswith("\tbreath")][:8]))

# %%
# Frame-wise IoU, precision and recall at the IoU-maximizing threshold.
main(["eval", str(exp / "run" / "best.bsck"), "--out", str(work / "eval"), *cfg])
