"""The toy ablation benchmark: two cipher source languages translating into one target.

Layout per seed:

* target sentences from :func:`agreelab.data.toy_sentences`, split into a
  training set for each source language (disjoint, so no authentic
  tri-parallel data exists) and a shared test set;
* the baseline is trained on both source<->target directions so it can serve
  as the back-translation teacher;
* fine-tuning runs start from the baseline weights and only train the
  source->target directions; every condition gets the same number of steps.

Conditions (rows of the report):

``baseline+bt``   main loss on authentic + back-translated pairs
``bma-sbt+bt``    main + auxiliary + both KL directions (plus BT pairs)
``w/o-kl1``, ``w/o-kl2``, ``w/o-kl1&kl2``  the ablations
``ma``            code-switching agreement on authentic auxiliary text (optional)
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .agreement import AgreementConfig, code_switch
from .data import TOY_NOUNS, TOY_VERBS, CipherSpec, CorpusRecord, make_toy_multilingual, toy_sentences
from .evaluation import bleu
from .model import ModelConfig, Transformer
from .sbt import DecodeConfig, make_bt, make_sbt, translate_batch
from .tokenizer import train_subwords
from .training import TrainConfig, finetune

log = logging.getLogger(__name__)

TARGET = "en"
SOURCES = ("xa", "xb")

CONDITIONS = {
    "baseline+bt": None,
    "bma-sbt+bt": "none",
    "w/o-kl1": "kl1",
    "w/o-kl2": "kl2",
    "w/o-kl1&kl2": "both",
}


def default_specs(seed: int, window: int = 0) -> list[CipherSpec]:
    """xa marks verbs with a suffix (tense-like morphology); xb marks nouns (case-like).

    ``window > 1`` additionally reverses xb's words in windows of that size.
    """
    xb = [("substitute",), ("suffix", "ko", TOY_NOUNS)]
    if window > 1:
        xb.append(("reorder", window))
    return [
        CipherSpec("xa", TARGET, (("substitute",), ("suffix", "xe", TOY_VERBS)), seed * 10 + 1),
        CipherSpec("xb", TARGET, tuple(xb), seed * 10 + 2),
    ]


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 150            # authentic pairs per source language
    n_test: int = 100
    reorder_window: int = 0
    vocab_size: int = 480
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    layers: int = 2
    dropout: float = 0.1
    baseline_steps: int = 800
    baseline_lr: float = 2e-3
    finetune_steps: int = 200
    finetune_lr: float = 5e-4
    warmup_steps: int = 50
    tokens_per_batch: int = 1024
    alpha: float = 0.5
    label_smoothing: float = 0.1
    ma_ratio: float = 0.1
    conditions: tuple = tuple(CONDITIONS)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, encoder_layers=self.layers, decoder_layers=self.layers,
                           d_model=self.d_model, heads=self.heads, d_ff=self.d_ff, dropout=self.dropout)


@dataclass
class ToyData:
    toy: object
    train_idx: dict      # source lang -> indices into the base corpus
    test_idx: list
    vocab: object = None

    def authentic(self, src) -> list[CorpusRecord]:
        s = self.toy.sentences
        return [CorpusRecord(src, TARGET, s[src][i], s[TARGET][i], doc_id=f"{src}-{i}") for i in self.train_idx[src]]

    def reverse(self, src) -> list[CorpusRecord]:
        s = self.toy.sentences
        return [CorpusRecord(TARGET, src, s[TARGET][i], s[src][i], doc_id=f"{src}-{i}") for i in self.train_idx[src]]

    def test(self, src):
        s = self.toy.sentences
        return [s[src][i] for i in self.test_idx], [s[TARGET][i] for i in self.test_idx]


def build_toy(seed: int, n_train: int, n_test: int, window: int = 0) -> ToyData:
    """Toy corpus with disjoint per-source training splits and a shared test split (no vocabulary yet)."""
    n = 2 * n_train + n_test
    toy = make_toy_multilingual({TARGET: toy_sentences(n, seed)}, default_specs(seed, window))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = {SOURCES[0]: sorted(perm[:n_train].tolist()),
                 SOURCES[1]: sorted(perm[n_train:2 * n_train].tolist())}
    return ToyData(toy, train_idx, sorted(perm[2 * n_train:].tolist()))


def build_data(seed: int, cfg: BenchmarkConfig) -> ToyData:
    data = build_toy(seed, cfg.n_train, cfg.n_test, cfg.reorder_window)
    test = set(data.test_idx)
    corpus = []
    for lang in (TARGET,) + SOURCES:
        corpus.extend(t for i, t in enumerate(data.toy.sentences[lang]) if i not in test)
    data.vocab = train_subwords(corpus, cfg.vocab_size, (TARGET,) + SOURCES, seed)
    return data


def train_baseline(data: ToyData, cfg: BenchmarkConfig, seed: int, out_dir=None) -> Transformer:
    records = []
    for src in SOURCES:
        records += data.authentic(src) + data.reverse(src)
    model = Transformer.create(cfg.model_config(len(data.vocab)), seed)
    tc = TrainConfig(lr_peak=cfg.baseline_lr, warmup_steps=cfg.warmup_steps, max_steps=cfg.baseline_steps,
                     tokens_per_batch=cfg.tokens_per_batch, seed=seed,
                     agreement=AgreementConfig.ablated("main-only", label_smoothing=cfg.label_smoothing))
    finetune(model, data.vocab, records, tc, out_dir=out_dir)
    return model


def other(src: str) -> str:
    return SOURCES[1] if src == SOURCES[0] else SOURCES[0]


def generate(teacher: Transformer, data: ToyData, decode: DecodeConfig = DecodeConfig()):
    """BT pairs (y -> own source) and SBT tri-records (y -> the other source)."""
    bt, sbt = [], []
    for src in SOURCES:
        targets = [r.tgt_text for r in data.authentic(src)]
        bt += make_bt(targets, src, TARGET, teacher, data.vocab, decode)
        sbt += [ex.to_record(r.doc_id) for ex, r in
                zip(make_sbt(data.authentic(src), other(src), teacher, data.vocab, decode), data.authentic(src))]
    return bt, sbt


def code_switched(data: ToyData, ratio: float, seed: int) -> list[CorpusRecord]:
    """Conventional agreement data: x with ~ratio of its words swapped for authentic aux words."""
    toy = data.toy
    out = []
    for src in SOURCES:
        aux = other(src)
        for i in data.train_idx[src]:
            x = toy.sentences[src][i].split()
            z = toy.sentences[aux][i].split()
            c = code_switch(x, z, toy.alignments[(src, aux)][i], ratio, seed * 100003 + i)
            out.append(CorpusRecord(src, TARGET, " ".join(c), toy.sentences[TARGET][i], doc_id=f"cs-{src}-{i}"))
    return out


def condition_records(name: str, data: ToyData, bt, sbt, cfg: BenchmarkConfig, seed: int):
    authentic = data.authentic(SOURCES[0]) + data.authentic(SOURCES[1])
    if name == "baseline+bt":
        return authentic + bt, AgreementConfig.ablated("main-only", label_smoothing=cfg.label_smoothing)
    if name == "ma":
        return (authentic + bt + code_switched(data, cfg.ma_ratio, seed),
                AgreementConfig.ablated("main-only", label_smoothing=cfg.label_smoothing))
    ablation = CONDITIONS[name]
    return sbt + bt, AgreementConfig.ablated(ablation, alpha=cfg.alpha, label_smoothing=cfg.label_smoothing)


def evaluate_model(model: Transformer, data: ToyData, decode: DecodeConfig = DecodeConfig()) -> dict:
    scores = {}
    for src in SOURCES:
        srcs, refs = data.test(src)
        hyps = [t.text for t in translate_batch(model, data.vocab, srcs, TARGET, decode)]
        scores[f"{src}->{TARGET}"] = bleu(hyps, refs).score
    scores["avg"] = float(np.mean([scores[f"{s}->{TARGET}"] for s in SOURCES]))
    return scores


def clone(model: Transformer) -> Transformer:
    from .numerics import Tensor
    return Transformer(model.cfg, {k: Tensor(p.data.copy(), requires_grad=True) for k, p in model.params.items()})


def run_seed(seed: int, cfg: BenchmarkConfig = BenchmarkConfig()) -> dict:
    t0 = time.perf_counter()
    data = build_data(seed, cfg)
    teacher = train_baseline(data, cfg, seed)
    results = {"baseline": evaluate_model(teacher, data)}
    bt, sbt = generate(teacher, data)
    for name in cfg.conditions:
        records, agreement = condition_records(name, data, bt, sbt, cfg, seed)
        model = clone(teacher)
        tc = TrainConfig(lr_peak=cfg.finetune_lr, warmup_steps=cfg.warmup_steps, max_steps=cfg.finetune_steps,
                         tokens_per_batch=cfg.tokens_per_batch, seed=seed, agreement=agreement)
        finetune(model, data.vocab, records, tc)
        results[name] = evaluate_model(model, data)
        log.info("seed %d %s %s (%.0fs)", seed, name, results[name], time.perf_counter() - t0)
    return results


def summarize(per_seed: dict) -> dict:
    """Mean of each condition's scores across seeds."""
    names = next(iter(per_seed.values())).keys()
    return {n: {k: float(np.mean([r[n][k] for r in per_seed.values()])) for k in next(iter(per_seed.values()))[n]}
            for n in names}


def ablation_verdict(per_seed: dict, metric: str = "avg") -> dict:
    """Checks on the 5-condition table.

    ``full_beats_baseline`` counts seeds where the full method scores at least
    Baseline+BT.  ``trend`` compares condition means: full >= w/o both >= baseline.
    The experiment passes if the per-seed count is at least 4 of 5 (scaled to
    the number of seeds); a failing trend is flagged as scale-sensitive
    instead of failing the run.
    """
    full, none_, base = "bma-sbt+bt", "w/o-kl1&kl2", "baseline+bt"
    seeds = sorted(per_seed)
    wins = [s for s in seeds if per_seed[s][full][metric] >= per_seed[s][base][metric]]
    means = {n: float(np.mean([per_seed[s][n][metric] for s in seeds])) for n in per_seed[seeds[0]]}
    upper = means[full] >= means[none_]
    lower = means[none_] >= means[base]
    need = int(np.ceil(0.8 * len(seeds)))
    return {
        "seeds": seeds,
        "wins": wins,
        "needed": need,
        "passes": len(wins) >= need,
        "means": means,
        "trend_full_ge_without_kl": upper,
        "trend_without_kl_ge_baseline": lower,
        "trend_holds": upper and lower,
        "scale_sensitive": not (upper and lower),
        "kl1_vs_kl2_direction": means.get("w/o-kl1", np.nan) <= means.get("w/o-kl2", np.nan),
    }


def format_table(per_seed: dict, metric: str = "avg") -> str:
    """Markdown table of condition means with the per-seed values alongside."""
    seeds = sorted(per_seed)
    names = list(per_seed[seeds[0]])
    lines = ["| System | " + " | ".join(f"seed {s}" for s in seeds) + " | mean |",
             "|" + "---|" * (len(seeds) + 2)]
    for n in names:
        vals = [per_seed[s][n][metric] for s in seeds]
        lines.append(f"| {n} | " + " | ".join(f"{v:.2f}" for v in vals) + f" | {np.mean(vals):.2f} |")
    return "\n".join(lines)
