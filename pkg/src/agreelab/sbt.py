"""Greedy/beam decoding and the two synthetic-data generators.

``make_bt`` is conventional back-translation: the target y is translated back
into the *original* source language.  ``make_sbt`` is switched back-translation:
y is translated into a third, auxiliary language, giving tri-parallel
(x, y, z~) examples.  Both use one teacher model (the trained baseline).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import CorpusRecord
from .model import Transformer, pad_batch
from .tokenizer import BOS, EOS, PAD, Vocabulary


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 4
    max_length: int = 64
    length_penalty: float = 1.0
    batch_size: int = 64

    def validate(self, max_positions: int | None = None) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise GenerationError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise GenerationError("beam_size must be >= 1")
        if self.max_length < 1:
            raise GenerationError("max_length must be >= 1")
        if max_positions is not None and self.max_length + 1 > max_positions:
            raise GenerationError(f"max_length {self.max_length} exceeds model max_positions {max_positions}")


@dataclass(frozen=True)
class Translation:
    text: str
    ids: tuple
    truncated: bool


@dataclass(frozen=True)
class TriParallelExample:
    x: str
    x_lang: str
    y: str
    y_lang: str
    z_tilde: str | None = None
    z_lang: str | None = None
    provenance: str = "authentic"
    truncated: bool = False

    def __post_init__(self):
        if self.z_tilde is not None:
            if self.z_lang in (self.x_lang, self.y_lang):
                raise GenerationError(f"auxiliary language {self.z_lang!r} repeats source or target")
            if self.provenance != "sbt_synthetic":
                raise GenerationError("an example carrying z~ must have sbt_synthetic provenance")

    def to_record(self, doc_id: str = "") -> CorpusRecord:
        return CorpusRecord(self.x_lang, self.y_lang, self.x, self.y, self.z_lang, self.z_tilde,
                            doc_id=doc_id, provenance=self.provenance, truncated=self.truncated)

    @classmethod
    def from_record(cls, rec: CorpusRecord) -> "TriParallelExample":
        return cls(rec.src_text, rec.src_lang, rec.tgt_text, rec.tgt_lang, rec.aux_text, rec.aux_lang,
                   rec.provenance, rec.truncated)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _greedy(model: Transformer, src: np.ndarray, max_length: int):
    memory, keep = model.encode(src)
    B = src.shape[0]
    out = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_length):
        logits = model.decode(memory, keep, out).data[:, -1, :]
        nxt = np.argmax(logits, axis=-1)
        nxt = np.where(done, PAD, nxt)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    results = []
    for b in range(B):
        ids = []
        for t in out[b, 1:]:
            if t == EOS or t == PAD:
                break
            ids.append(int(t))
        results.append((ids, not done[b]))
    return results


def _log_softmax_np(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _beam_one(model: Transformer, src_row: np.ndarray, cfg: DecodeConfig):
    """Length-penalised beam search for one source; score = logprob / len**lp."""
    k = cfg.beam_size
    memory, keep = model.encode(src_row[None, :])
    beams = [((BOS,), 0.0)]
    finished = []
    for _ in range(cfg.max_length):
        prefixes = pad_batch([list(b[0]) for b in beams])
        n = len(beams)
        mem = nx.Tensor(np.repeat(memory.data, n, axis=0))
        logp = _log_softmax_np(model.decode(mem, np.repeat(keep, n, axis=0), prefixes).data[:, -1, :])
        scores = np.array([b[1] for b in beams])[:, None] + logp
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: 2 * k]
        V = logp.shape[1]
        nxt = []
        for idx in order:
            bi, tok = divmod(int(idx), V)
            seq = beams[bi][0] + (tok,)
            if tok == EOS:
                finished.append((seq, float(flat[idx])))
            else:
                nxt.append((seq, float(flat[idx])))
            if len(nxt) == k:
                break
        if len(finished) >= k or not nxt:
            break
        beams = nxt
    truncated = not finished
    pool = finished if finished else beams

    def norm(item):
        length = len(item[0]) - 1  # generated tokens incl. EOS
        return item[1] / (max(length, 1) ** cfg.length_penalty)

    best = max(pool, key=norm)  # first maximal entry wins ties
    ids = [t for t in best[0][1:] if t != EOS]
    return ids, truncated


def translate_batch(model: Transformer, vocab: Vocabulary, texts, target_lang: str,
                    cfg: DecodeConfig = DecodeConfig()) -> list[Translation]:
    cfg.validate(model.cfg.max_positions)
    vocab.tag_id(target_lang)
    results = []
    with nx.no_grad():
        if cfg.strategy == "greedy":
            enc = [list(vocab.encode(t, target_lang).ids) for t in texts]
            # sort by length so padding stays small; restore order afterwards
            order = sorted(range(len(enc)), key=lambda i: len(enc[i]))
            out = [None] * len(enc)
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                dec = _greedy(model, pad_batch([enc[i] for i in chunk]), cfg.max_length)
                for i, (ids, trunc) in zip(chunk, dec):
                    out[i] = (ids, trunc)
        else:
            out = [_beam_one(model, np.asarray(vocab.encode(t, target_lang).ids), cfg) for t in texts]
    for ids, trunc in out:
        results.append(Translation(vocab.decode(ids), tuple(ids), trunc))
    return results


def translate(model: Transformer, vocab: Vocabulary, text: str, target_lang: str,
              cfg: DecodeConfig = DecodeConfig()) -> str:
    return translate_batch(model, vocab, [text], target_lang, cfg)[0].text


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def make_sbt(pairs, aux_lang: str, model: Transformer, vocab: Vocabulary,
             cfg: DecodeConfig = DecodeConfig(), from_side: str = "target") -> list[TriParallelExample]:
    """Attach z~ = translate(y -> aux_lang) to every (x, y) record.

    ``from_side="source"`` translates x instead; it exists only to reproduce the
    comparison showing that generating from the source is worse.
    """
    pairs = list(pairs)
    for n, rec in enumerate(pairs):
        if aux_lang in (rec.src_lang, rec.tgt_lang):
            raise GenerationError(
                f"example {n}: auxiliary language {aux_lang!r} collides with "
                f"{'source' if aux_lang == rec.src_lang else 'target'} language")
    if from_side not in ("target", "source"):
        raise GenerationError(f"unknown from_side {from_side!r}")
    texts = [r.tgt_text if from_side == "target" else r.src_text for r in pairs]
    outs = translate_batch(model, vocab, texts, aux_lang, cfg)
    return [TriParallelExample(r.src_text, r.src_lang, r.tgt_text, r.tgt_lang, o.text, aux_lang,
                               "sbt_synthetic", o.truncated)
            for r, o in zip(pairs, outs)]


def make_bt(targets, source_lang: str, target_lang: str, model: Transformer, vocab: Vocabulary,
            cfg: DecodeConfig = DecodeConfig()) -> list[CorpusRecord]:
    """Back-translate monolingual target sentences into ``source_lang``."""
    if source_lang == target_lang:
        raise GenerationError("back-translation needs distinct source and target languages")
    targets = list(targets)
    outs = translate_batch(model, vocab, targets, source_lang, cfg)
    return [CorpusRecord(source_lang, target_lang, o.text, y, provenance="bt_synthetic", truncated=o.truncated)
            for y, o in zip(targets, outs)]
