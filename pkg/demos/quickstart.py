"""Smallest end-to-end run: FQ labels from a proxy OCR, masked pre-training,
then fine-tuning on two budgets. Takes about a minute on one CPU core."""

import sys
from pathlib import Path

from textssl.cli import bundled_config
from textssl.experiment import ExperimentConfig, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart")
config = ExperimentConfig.load(bundled_config("tiny"))
print("method", config.method, "backbone", config.backbone, "budgets", config.budgets)

results = run_experiment(config, out)
for budget, report in results.items():
    print(f"{budget:>5} lines  CER {100 * report.cer:6.2f}%")
print((out / "summary.txt").read_text())
print("artifacts in", out)
