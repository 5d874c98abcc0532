"""The desk-scale ablation: Baseline+BT, full agreement, and the three KL ablations.

One seed takes about 3.5 minutes; all five about 18.  Edit SEEDS to taste.
Run with ``python3 demos/03_ablation_table.py``.
"""
import json
import logging

from agreelab.experiment import BenchmarkConfig, ablation_verdict, format_table, run_seed

SEEDS = [0, 1, 2, 3, 4]

logging.basicConfig(level=logging.INFO, format="%(message)s")

## Every condition fine-tunes the same baseline for the same number of steps
per_seed = {s: run_seed(s, BenchmarkConfig()) for s in SEEDS}

## Average BLEU over xa->en and xb->en
print(format_table(per_seed))

## Per-seed win count and the mean ordering
verdict = ablation_verdict(per_seed)
print(json.dumps({k: v for k, v in verdict.items() if k != "means"}, indent=1))
