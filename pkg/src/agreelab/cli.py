"""Command-line pipeline: ``agreelab <command> [flags]``.

Every command writes into an output directory (``--out``) and leaves a
``manifest.json`` there recording the resolved config, input digests, code
version, seed, timestamps and outputs.  Configuration is resolved as

    built-in defaults < ``--config`` JSON file < ``AGREELAB_*`` env vars < flags

A config file may be flat, may hold a section per command
(``{"finetune": {...}}``), or may be a previous ``manifest.json`` (its
resolved config is replayed).  Failures print one JSON line on stderr,
``{"error": ..., "command": ..., "message": ...}``, and exit with status 1.

Toy pipeline::

    agreelab make-toy --out toy
    agreelab tokenizer-train --corpus toy/authentic.jsonl --vocab-size 480 --out vocab
    agreelab train-baseline --train toy/authentic.jsonl --vocab vocab/vocab.txt --out base
    agreelab gen-bt  --checkpoint base/final.ckpt --vocab vocab/vocab.txt --input toy/authentic.jsonl --out bt
    agreelab gen-sbt --checkpoint base/final.ckpt --vocab vocab/vocab.txt --input toy/authentic.jsonl \\
                     --aux-map xa=xb,xb=xa --out sbt
    agreelab finetune --init base/final.ckpt --vocab vocab/vocab.txt --train sbt/sbt.jsonl bt/bt.jsonl --out full
    agreelab evaluate --checkpoint full/final.ckpt --vocab vocab/vocab.txt --test toy/test.jsonl --out eval-full
    agreelab report --runs full=eval-full ... --out report
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from collections import OrderedDict, defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .agreement import AgreementConfig
from .data import CorpusRecord, Document, load_corpus, pack_documents, write_records
from .evaluation import bleu, d_bleu
from .experiment import SOURCES, TARGET, build_toy, code_switched, default_specs
from .model import ModelConfig, Transformer
from .sbt import DecodeConfig, make_bt, make_sbt, translate_batch
from .tokenizer import Vocabulary, train_subwords
from .training import TrainConfig, finetune

ENV_PREFIX = "AGREELAB_"
MANIFEST = "manifest.json"

log = logging.getLogger("agreelab")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class P:
    """One configurable parameter: type, default, help.  ``kind`` is scalar, list or flag."""

    def __init__(self, type_, default, help_, kind="scalar", choices=None, required=False):
        self.type, self.default, self.help = type_, default, help_
        self.kind, self.choices, self.required = kind, choices, required


_DECODE = {
    "strategy": P(str, "greedy", "decoding strategy", choices=("greedy", "beam")),
    "beam_size": P(int, 4, "beam width"),
    "max_length": P(int, 64, "maximum generated tokens"),
    "length_penalty": P(float, 1.0, "beam length-normalisation exponent"),
}
_MODEL = {
    "layers": P(int, 2, "encoder and decoder layers"),
    "d_model": P(int, 64, "model width"),
    "heads": P(int, 4, "attention heads"),
    "d_ff": P(int, 256, "feed-forward width"),
    "dropout": P(float, 0.1, "dropout rate"),
}
_TRAIN = {
    "steps": P(int, 800, "optimizer steps"),
    "lr": P(float, 2e-3, "peak learning rate"),
    "warmup": P(int, 50, "linear warmup steps"),
    "schedule": P(str, "constant", "after warmup", choices=("constant", "inverse_sqrt")),
    "tokens_per_batch": P(int, 1024, "token budget per micro-batch"),
    "accumulation": P(int, 1, "micro-batches per optimizer step"),
    "label_smoothing": P(float, 0.1, "label smoothing ratio"),
    "checkpoint_every": P(int, 0, "write step_<n>.ckpt every n steps (0 = off)"),
    "seed": P(int, 0, "random seed"),
}

COMMANDS = {
    "make-toy": {
        "n_train": P(int, 150, "authentic pairs per source language"),
        "n_test": P(int, 100, "shared test sentences"),
        "reorder_window": P(int, 0, "also reverse xb words in windows of this size (0/1 = off)"),
        "ma_ratio": P(float, 0.1, "code-switch ratio for codeswitch.jsonl"),
        "seed": P(int, 0, "random seed"),
    },
    "tokenizer-train": {
        "corpus": P(str, None, "JSONL record files or plain text files", kind="list", required=True),
        "languages": P(str, None, "language tags (default: those found in JSONL records)", kind="list"),
        "vocab_size": P(int, 480, "total vocabulary size"),
        "seed": P(int, 0, "random seed"),
    },
    "prepare": {
        "input": P(str, None, "JSONL file, or the stem of a paired corpus", required=True),
        "format": P(str, "jsonl", "input format", choices=("jsonl", "paired")),
        "src_lang": P(str, None, "source language (paired format, or filter for JSONL)"),
        "tgt_lang": P(str, None, "target language (paired format, or filter for JSONL)"),
        "vocab": P(str, None, "vocabulary file", required=True),
        "budget": P(int, 512, "token budget per packed sub-document"),
    },
    "train-baseline": {
        "train": P(str, None, "training record files", kind="list", required=True),
        "vocab": P(str, None, "vocabulary file", required=True),
        "bidirectional": P(bool, True, "also train every pair in the reverse direction", kind="flag"),
        **_MODEL, **_TRAIN,
    },
    "gen-bt": {
        "checkpoint": P(str, None, "teacher checkpoint", required=True),
        "vocab": P(str, None, "vocabulary file", required=True),
        "input": P(str, None, "records whose targets are back-translated", required=True),
        **_DECODE,
    },
    "gen-sbt": {
        "checkpoint": P(str, None, "teacher checkpoint", required=True),
        "vocab": P(str, None, "vocabulary file", required=True),
        "input": P(str, None, "records to extend with an auxiliary side", required=True),
        "aux_lang": P(str, None, "auxiliary language for every record"),
        "aux_map": P(str, None, "per-source auxiliary language, e.g. xa=xb,xb=xa"),
        "from_side": P(str, "target", "translate y (default) or x", choices=("target", "source")),
        **_DECODE,
    },
    "finetune": {
        "init": P(str, None, "checkpoint to start from", required=True),
        "vocab": P(str, None, "vocabulary file", required=True),
        "train": P(str, None, "training record files (tri-parallel and/or pairs)", kind="list", required=True),
        "ablate": P(str, "none", "drop agreement terms", choices=("none", "kl1", "kl2", "both", "main-only")),
        "alpha": P(float, 0.5, "weight of KL1 in the agreement loss"),
        "stop_gradient": P(str, "none", "detach one side of the KL terms", choices=("none", "x", "z")),
        **_TRAIN,
        "steps": P(int, 200, "optimizer steps"),
        "lr": P(float, 5e-4, "peak learning rate"),
    },
    "evaluate": {
        "checkpoint": P(str, None, "model checkpoint", required=True),
        "vocab": P(str, None, "vocabulary file", required=True),
        "test": P(str, None, "test record files", kind="list", required=True),
        "level": P(str, "sentence", "corpus BLEU over segments or d-BLEU over documents",
                   choices=("sentence", "document")),
        "tokenize": P(str, "13a", "BLEU tokenizer", choices=("13a", "none")),
        **_DECODE,
    },
    "report": {
        "runs": P(str, None, "NAME=EVAL_DIR entries; repeated names are averaged (e.g. over seeds)",
                  kind="list", required=True),
        "expect_order": P(str, None, "NAME>NAME>... ordering to check on the Avg. column"),
    },
}

_FILE_INPUTS = {"corpus", "input", "vocab", "train", "checkpoint", "init", "test"}


def _coerce(p: P, raw, source: str):
    try:
        if p.kind == "list":
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            return [p.type(x) for x in items if x != ""]
        if p.kind == "flag":
            if isinstance(raw, str):
                low = raw.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                return low in ("1", "true", "yes")
            return bool(raw)
        value = raw if raw is None else p.type(raw)
    except (TypeError, ValueError):
        raise CliError(f"{source}: cannot parse {raw!r}") from None
    if p.choices and value is not None and value not in p.choices:
        raise CliError(f"{source}: {value!r} not in {list(p.choices)}")
    return value


def _read_config_file(path, command):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config file {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise CliError(f"config file {path}: top level must be an object")
    if "command" in obj and "config" in obj:  # a manifest
        if obj["command"] != command:
            raise CliError(f"manifest {path} is for {obj['command']!r}, not {command!r}")
        return dict(obj["config"])
    flat = {k: v for k, v in obj.items() if not isinstance(v, dict)}
    flat.update(obj.get(command, {}))
    return flat


def resolve_config(command: str, args: argparse.Namespace, environ=None) -> dict:
    """Defaults < config file < environment < flags."""
    params = COMMANDS[command]
    environ = os.environ if environ is None else environ
    cfg = {k: p.default for k, p in params.items()}
    if getattr(args, "config", None):
        for k, v in _read_config_file(args.config, command).items():
            if k not in params:
                raise CliError(f"config file: unknown key {k!r} for {command}")
            cfg[k] = _coerce(params[k], v, f"config key {k}")
    for k, p in params.items():
        env = environ.get(ENV_PREFIX + k.upper())
        if env is not None:
            cfg[k] = _coerce(p, env, f"{ENV_PREFIX}{k.upper()}")
    for k, p in params.items():
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(p, v, f"--{k.replace('_', '-')}")
    missing = [k for k, p in params.items() if p.required and cfg[k] in (None, [])]
    if missing:
        raise CliError(f"missing required setting(s): {', '.join(missing)}")
    return cfg


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def input_digests(cfg: dict) -> dict:
    out = {}
    for k in sorted(_FILE_INPUTS & set(cfg)):
        v = cfg[k]
        for path in (v if isinstance(v, list) else [v]):
            if path is None:
                continue
            if not Path(path).is_file():
                raise CliError(f"input {k}: no such file {path}")
            out[str(path)] = file_digest(path)
    return out


def check_resume(out: Path, command: str, cfg: dict, inputs: dict, force: bool) -> None:
    m = out / MANIFEST
    if not m.exists() or force:
        return
    try:
        old = json.loads(m.read_text())
    except json.JSONDecodeError:
        raise CliError(f"{m}: unreadable manifest; use --force to overwrite") from None
    if old.get("command") != command:
        raise CliError(f"{out} holds output of {old.get('command')!r}; refusing to overwrite (use --force)")
    if old.get("inputs") != inputs:
        changed = sorted(set(old.get("inputs", {}).items()) ^ set(inputs.items()))
        raise CliError(f"input digest mismatch vs {m}: {changed[0][0]} changed; refusing to run (use --force)")
    if old.get("config") != cfg:
        raise CliError(f"config differs from {m}; refusing to run (use --force)")


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, started: float, outputs) -> None:
    manifest = OrderedDict(
        command=command,
        config=cfg,
        inputs=inputs,
        code_version=code_version(),
        seed=cfg.get("seed"),
        started=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        finished=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        outputs={name: file_digest(out / name) for name in sorted(outputs)},
    )
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_records(paths, vocab=None):
    languages = vocab.languages if vocab is not None else None
    records = []
    for p in paths:
        try:
            records += load_corpus(p, "jsonl", languages)
        except ValueError as exc:
            raise CliError(f"{p}: {exc}") from None
    return records


def _load_model(path, vocab):
    model, header = Transformer.load(path)
    if header.get("vocab_digest") and header["vocab_digest"] != vocab.digest():
        raise CliError(f"{path}: checkpoint was trained with a different vocabulary")
    if model.cfg.vocab_size != len(vocab):
        raise CliError(f"{path}: model vocab_size {model.cfg.vocab_size} != vocabulary size {len(vocab)}")
    return model


def _decode_cfg(cfg):
    return DecodeConfig(strategy=cfg["strategy"], beam_size=cfg["beam_size"], max_length=cfg["max_length"],
                        length_penalty=cfg["length_penalty"])


def _train_cfg(cfg, agreement):
    return TrainConfig(lr_peak=cfg["lr"], warmup_steps=cfg["warmup"], schedule=cfg["schedule"],
                       tokens_per_batch=cfg["tokens_per_batch"], accumulation_steps=cfg["accumulation"],
                       max_steps=cfg["steps"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
                       agreement=agreement)


def cmd_make_toy(cfg, out):
    seed = cfg["seed"]
    data = build_toy(seed, cfg["n_train"], cfg["n_test"], cfg["reorder_window"])
    s = data.toy.sentences
    authentic = data.authentic(SOURCES[0]) + data.authentic(SOURCES[1])
    tests = [CorpusRecord(src, TARGET, s[src][i], s[TARGET][i], doc_id=f"test-{i}")
             for src in SOURCES for i in data.test_idx]
    write_records(authentic, out / "authentic.jsonl")
    write_records(tests, out / "test.jsonl")
    write_records(code_switched(data, cfg["ma_ratio"], seed), out / "codeswitch.jsonl")
    meta = {"target": TARGET, "sources": list(SOURCES), "languages": [TARGET, *SOURCES],
            "specs": [asdict(sp) for sp in default_specs(seed, cfg["reorder_window"])]}
    (out / "toy.json").write_text(json.dumps(meta, indent=2) + "\n")
    return ["authentic.jsonl", "test.jsonl", "codeswitch.jsonl", "toy.json"]


def _corpus_texts(path):
    """All texts of a JSONL record file (and its languages), or the lines of a text file."""
    text = Path(path).read_text(encoding="utf-8")
    first = text.lstrip()[:1]
    if first == "{":
        recs = load_corpus(path, "jsonl")
        texts, langs = [], []
        for r in recs:
            texts += [r.src_text, r.tgt_text] + ([r.aux_text] if r.has_aux else [])
            langs += [r.src_lang, r.tgt_lang] + ([r.aux_lang] if r.has_aux else [])
        return texts, langs
    return text.splitlines(), []


def cmd_tokenizer_train(cfg, out):
    texts, langs = [], []
    for p in cfg["corpus"]:
        t, l = _corpus_texts(p)
        texts += t
        langs += l
    languages = cfg["languages"] or sorted(set(langs))
    if not languages:
        raise CliError("plain-text corpora need --languages")
    vocab = train_subwords(texts, cfg["vocab_size"], tuple(languages), cfg["seed"])
    vocab.save(out / "vocab.txt")
    return ["vocab.txt"]


def cmd_prepare(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    if cfg["format"] == "paired":
        records = load_corpus(cfg["input"], "paired", vocab.languages, cfg["src_lang"], cfg["tgt_lang"])
    else:
        records = load_corpus(cfg["input"], "jsonl", vocab.languages)
        if cfg["src_lang"]:
            records = [r for r in records if r.src_lang == cfg["src_lang"]]
        if cfg["tgt_lang"]:
            records = [r for r in records if r.tgt_lang == cfg["tgt_lang"]]
    # consecutive records sharing (doc_id, direction, provenance) form one document
    groups = []
    for r in records:
        key = (r.doc_id, r.src_lang, r.tgt_lang, r.provenance)
        if r.has_aux:
            raise CliError("prepare packs pair records; generate auxiliary sides after packing")
        if not groups or groups[-1][0] != key or not r.doc_id:
            groups.append((key, []))
        groups[-1][1].append(r)
    packed = []
    for n, ((doc_id, s, t, prov), recs) in enumerate(groups):
        doc = Document(doc_id or f"d{n}", {s: [r.src_text for r in recs], t: [r.tgt_text for r in recs]})
        packed += pack_documents([doc], vocab, s, t, cfg["budget"], provenance=prov)
    write_records(packed, out / "records.jsonl")
    return ["records.jsonl"]


def cmd_train_baseline(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    records = _load_records(cfg["train"], vocab)
    if cfg["bidirectional"]:
        records = records + [CorpusRecord(r.tgt_lang, r.src_lang, r.tgt_text, r.src_text, doc_id=r.doc_id,
                                          provenance=r.provenance) for r in records]
    mcfg = ModelConfig(vocab_size=len(vocab), encoder_layers=cfg["layers"], decoder_layers=cfg["layers"],
                       d_model=cfg["d_model"], heads=cfg["heads"], d_ff=cfg["d_ff"], dropout=cfg["dropout"])
    model = Transformer.create(mcfg, cfg["seed"])
    agreement = AgreementConfig.ablated("main-only", label_smoothing=cfg["label_smoothing"])
    finetune(model, vocab, records, _train_cfg(cfg, agreement), out_dir=out)
    return _train_outputs(out)


def _train_outputs(out):
    # timing.jsonl holds wall-clock times, so it is left out of the reproducible digests
    return sorted(p.name for p in out.iterdir() if p.suffix in (".ckpt", ".jsonl") and p.name != "timing.jsonl")


def cmd_gen_bt(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    model = _load_model(cfg["checkpoint"], vocab)
    records = _load_records([cfg["input"]], vocab)
    result = [None] * len(records)
    by_dir = defaultdict(list)
    for i, r in enumerate(records):
        by_dir[(r.src_lang, r.tgt_lang)].append(i)
    for (s, t), idx in sorted(by_dir.items()):
        bt = make_bt([records[i].tgt_text for i in idx], s, t, model, vocab, _decode_cfg(cfg))
        for i, rec in zip(idx, bt):
            result[i] = CorpusRecord(rec.src_lang, rec.tgt_lang, rec.src_text, rec.tgt_text,
                                     doc_id=records[i].doc_id, provenance=rec.provenance, truncated=rec.truncated)
    write_records(result, out / "bt.jsonl")
    return ["bt.jsonl"]


def _aux_for(cfg):
    if bool(cfg["aux_lang"]) == bool(cfg["aux_map"]):
        raise CliError("give exactly one of --aux-lang and --aux-map")
    if cfg["aux_lang"]:
        return lambda src: cfg["aux_lang"]
    mapping = {}
    for item in cfg["aux_map"].split(","):
        if "=" not in item:
            raise CliError(f"--aux-map entry {item!r} is not SRC=AUX")
        a, b = item.split("=", 1)
        mapping[a.strip()] = b.strip()

    def aux(src):
        if src not in mapping:
            raise CliError(f"--aux-map has no entry for source language {src!r}")
        return mapping[src]
    return aux


def cmd_gen_sbt(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    records = _load_records([cfg["input"]], vocab)
    aux = _aux_for(cfg)
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[aux(r.src_lang)].append(i)
    # surface language collisions before loading the model
    for lang, idx in sorted(groups.items()):
        vocab.tag_id(lang)
        for n in idx:
            r = records[n]
            if lang in (r.src_lang, r.tgt_lang):
                side = "source" if lang == r.src_lang else "target"
                raise CliError(f"record {n}: auxiliary language {lang!r} collides with {side} language")
    model = _load_model(cfg["checkpoint"], vocab)
    result = [None] * len(records)
    for lang, idx in sorted(groups.items()):
        exs = make_sbt([records[i] for i in idx], lang, model, vocab, _decode_cfg(cfg), cfg["from_side"])
        for i, ex in zip(idx, exs):
            result[i] = ex.to_record(records[i].doc_id)
    write_records(result, out / "sbt.jsonl")
    return ["sbt.jsonl"]


def cmd_finetune(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    model = _load_model(cfg["init"], vocab)
    records = _load_records(cfg["train"], vocab)
    agreement = AgreementConfig.ablated(cfg["ablate"], alpha=cfg["alpha"], label_smoothing=cfg["label_smoothing"],
                                        stop_gradient=cfg["stop_gradient"])
    finetune(model, vocab, records, _train_cfg(cfg, agreement), out_dir=out)
    return _train_outputs(out)


def cmd_evaluate(cfg, out):
    vocab = Vocabulary.load(cfg["vocab"])
    model = _load_model(cfg["checkpoint"], vocab)
    records = _load_records(cfg["test"], vocab)
    by_dir = defaultdict(list)
    for i, r in enumerate(records):
        by_dir[f"{r.src_lang}->{r.tgt_lang}"].append(i)
    hyps = [None] * len(records)
    scores = OrderedDict()
    for direction, idx in sorted(by_dir.items()):
        tgt = records[idx[0]].tgt_lang
        outs = translate_batch(model, vocab, [records[i].src_text for i in idx], tgt, _decode_cfg(cfg))
        for i, o in zip(idx, outs):
            hyps[i] = o.text
        if cfg["level"] == "document":
            docs = OrderedDict()
            for i in idx:
                docs.setdefault(records[i].doc_id.split("#")[0], ([], []))
                docs[records[i].doc_id.split("#")[0]][0].append(hyps[i])
                docs[records[i].doc_id.split("#")[0]][1].append(records[i].tgt_text)
            rep = d_bleu([h for h, _ in docs.values()], [r for _, r in docs.values()], cfg["tokenize"])
        else:
            rep = bleu([hyps[i] for i in idx], [records[i].tgt_text for i in idx], cfg["tokenize"])
        scores[direction] = rep.to_dict()
    (out / "scores.json").write_text(json.dumps(scores, indent=2) + "\n")
    with open(out / "hypotheses.jsonl", "w", encoding="utf-8") as fh:
        for r, h in zip(records, hyps):
            fh.write(json.dumps({"src_lang": r.src_lang, "tgt_lang": r.tgt_lang, "doc_id": r.doc_id,
                                 "hypothesis": h, "reference": r.tgt_text}, ensure_ascii=False) + "\n")
    return ["scores.json", "hypotheses.jsonl"]


CURVE_METRICS = ("lr", "main", "auxiliary", "kl1", "kl2", "bma", "total")


def _run_training_dir(eval_dir: Path):
    """The training directory of the checkpoint an evaluate run scored (via its manifest)."""
    m = eval_dir / MANIFEST
    if not m.exists():
        return None
    ckpt = json.loads(m.read_text())["config"].get("checkpoint")
    d = Path(ckpt).parent if ckpt else None
    return d if d is not None and (d / "metrics.jsonl").exists() else None


def cmd_report(cfg, out):
    runs = OrderedDict()
    for item in cfg["runs"]:
        if "=" not in item:
            raise CliError(f"--runs entry {item!r} is not NAME=EVAL_DIR")
        name, d = item.split("=", 1)
        runs.setdefault(name, []).append(Path(d))
    directions = set()
    table = OrderedDict()
    for name, dirs in runs.items():
        per = defaultdict(list)
        for d in dirs:
            f = d / "scores.json"
            if not f.exists():
                raise CliError(f"run {name}: {f} not found")
            for direction, rep in json.loads(f.read_text()).items():
                per[direction].append(rep["score"])
        directions |= set(per)
        table[name] = {k: float(np.mean(v)) for k, v in per.items()}
    directions = sorted(directions)
    for name, row in table.items():
        missing = [d for d in directions if d not in row]
        if missing:
            raise CliError(f"run {name}: no score for {missing[0]}")
        row["Avg."] = float(np.mean([row[d] for d in directions]))
    cols = directions + ["Avg."]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "seeds"] + cols)
        for name, row in table.items():
            w.writerow([name, len(runs[name])] + [f"{row[c]:.4f}" for c in cols])
    lines = ["| System | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for name, row in table.items():
        lines.append(f"| {name} | " + " | ".join(f"{row[c]:.2f}" for c in cols) + " |")
    notes = {}
    if cfg["expect_order"]:
        order = [x.strip() for x in cfg["expect_order"].split(">")]
        unknown = [x for x in order if x not in table]
        if unknown:
            raise CliError(f"--expect-order names unknown run {unknown[0]!r}")
        pairs = [(a, b, table[a]["Avg."] >= table[b]["Avg."]) for a, b in zip(order, order[1:])]
        notes["expected_order"] = [{"higher": a, "lower": b, "holds": ok} for a, b, ok in pairs]
        for a, b, ok in pairs:
            lines.append(f"\n{'holds' if ok else 'VIOLATED (scale-sensitive)'}: {a} >= {b}")
    (out / "table.md").write_text("\n".join(lines) + "\n")
    (out / "table.json").write_text(json.dumps({"columns": cols, "rows": table, **notes}, indent=2) + "\n")
    outputs = ["table.csv", "table.md", "table.json"]
    curves = out / "curves"
    for name, dirs in runs.items():
        for k, d in enumerate(dirs):
            tdir = _run_training_dir(d)
            if tdir is None:
                continue
            rows = [json.loads(l) for l in (tdir / "metrics.jsonl").read_text().splitlines() if l.strip()]
            curves.mkdir(exist_ok=True)
            fname = f"{name.replace('/', '_').replace('&', 'and')}.{k}.csv"
            with open(curves / fname, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("step",) + CURVE_METRICS)
                for r in rows:
                    w.writerow([r["step"]] + [repr(r[m]) for m in CURVE_METRICS])
            outputs.append(f"curves/{fname}")
    return outputs


HANDLERS = {
    "make-toy": cmd_make_toy,
    "tokenizer-train": cmd_tokenizer_train,
    "prepare": cmd_prepare,
    "train-baseline": cmd_train_baseline,
    "gen-bt": cmd_gen_bt,
    "gen-sbt": cmd_gen_sbt,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agreelab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"agreelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, params in COMMANDS.items():
        sp = sub.add_parser(name, help=f"{name} step")
        sp.add_argument("--out", required=True, help="output directory (gets manifest.json)")
        sp.add_argument("--config", help="JSON config file or a previous manifest.json")
        sp.add_argument("--force", action="store_true", help="overwrite despite a mismatching manifest")
        sp.add_argument("--log-level", default="WARNING")
        for key, p in params.items():
            flag = "--" + key.replace("_", "-")
            if p.kind == "list":
                sp.add_argument(flag, dest=key, nargs="+", default=None, help=p.help)
            elif p.kind == "flag":
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=p.help)
            else:
                sp.add_argument(flag, dest=key, default=None, choices=p.choices, help=f"{p.help} (default {p.default})",
                                type=p.type)
    return parser


def _error_line(command, exc) -> str:
    return json.dumps({"error": type(exc).__name__, "command": command, "message": str(exc)})


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit 2 via argparse
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        cfg = resolve_config(command, args, environ)
        inputs = input_digests(cfg)
        out = Path(args.out)
        check_resume(out, command, cfg, inputs, args.force)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        outputs = HANDLERS[command](cfg, out)
        write_manifest(out, command, cfg, inputs, started, outputs)
    except (CliError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(_error_line(command, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
