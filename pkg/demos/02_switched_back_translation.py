"""Build cipher languages, train a small teacher, and generate SBT tri-parallel data.

Takes about a minute and a half on one core.  Run with
``python3 demos/02_switched_back_translation.py``.
"""
from agreelab.evaluation import bleu
from agreelab.experiment import BenchmarkConfig, build_data, evaluate_model, generate, train_baseline

## Toy corpus: English-like target "en" and two cipher sources.
## xa marks verbs with a suffix, xb marks nouns; each has its own lexicon.
cfg = BenchmarkConfig(n_test=50)
data = build_data(seed=0, cfg=cfg)
for lang in ("en", "xa", "xb"):
    print(f"{lang}: {data.toy.sentences[lang][0]}")
print("vocabulary size:", len(data.vocab))

## The teacher learns en<->xa and en<->xb from disjoint authentic pairs
teacher = train_baseline(data, cfg, seed=0)
print("teacher test BLEU:", evaluate_model(teacher, data))

## Conventional BT regenerates each source; SBT produces the *other* source language.
## An xa->en pair becomes the triple (x in xa, y in en, z~ in xb).
bt, sbt = generate(teacher, data)
for rec in sbt[:3]:
    print(f"x[{rec.src_lang}] {rec.src_text}\n  y[{rec.tgt_lang}] {rec.tgt_text}\n  z[{rec.aux_lang}] {rec.aux_text}")

## The cipher is deterministic, so z~ can be scored against the true auxiliary sentence
for lang in ("xa", "xb"):
    cipher = data.toy.languages[lang]
    recs = [r for r in sbt if r.aux_lang == lang]
    truth = [cipher.transform(r.tgt_text) for r in recs]
    print(f"synthetic {lang} vs cipher truth: BLEU {bleu([r.aux_text for r in recs], truth).score:.1f}")
