"""Regenerate tests/fixtures/bleu_reference.json with the sacrebleu package.

sacrebleu is not a dependency of the library; this script only records
reference scores once so the tests can check compatibility offline.

    pip install sacrebleu && python tools/make_bleu_fixture.py
"""
import json
from pathlib import Path

import numpy as np
from sacrebleu.metrics import BLEU

WORDS = ["the", "cat", "sat", "on", "mat", "a", "dog", ",", ".", "ran", "3.5", "don't", "(big)",
         "end-to-end", "10-20", "&amp;", "Hello,", "world!", "x<skipped>y"]


def corpus(rng, n):
    hyps, refs = [], []
    for _ in range(n):
        ref = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=int(rng.integers(3, 15)))]
        hyp = list(ref)
        for _ in range(int(rng.integers(0, 3))):
            hyp[int(rng.integers(len(hyp)))] = WORDS[int(rng.integers(len(WORDS)))]
        if rng.random() < 0.3:
            hyp = hyp[: max(1, len(hyp) - 2)]
        hyps.append(" ".join(hyp))
        refs.append(" ".join(ref))
    return hyps, refs


def main():
    metric = BLEU(tokenize="13a", smooth_method="none")
    rng = np.random.default_rng(2024)
    cases = []
    fixed = [
        ("identical", ["the cat sat on the mat ."], ["the cat sat on the mat ."]),
        ("punctuation", ["Hello, world! It's 3.5 (approx)."], ["Hello , world ! It's 3.5 (approx) ."]),
        ("short", ["the cat sat on the"], ["the cat sat on the mat today"]),
        ("no-4gram", ["the cat"], ["the cat sat on the mat"]),
    ]
    for name, h, r in fixed:
        cases.append((name, h, r))
    for k in range(12):
        h, r = corpus(rng, int(rng.integers(2, 10)))
        cases.append((f"random-{k}", h, r))
    out = []
    for name, h, r in cases:
        s = metric.corpus_score(h, [r])
        out.append({"name": name, "hyps": h, "refs": r, "score": s.score,
                    "counts": list(s.counts), "totals": list(s.totals)})
    path = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "bleu_reference.json"
    path.write_text(json.dumps(out, indent=1, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
