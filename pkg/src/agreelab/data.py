"""Corpus records, document packing, token-budget batching and cipher toy languages.

Record-per-line format (``format="jsonl"``): one JSON object per line with
exactly these fields::

    src_lang, tgt_lang, src_text, tgt_text, aux_lang, aux_text, doc_id,
    provenance, truncated

``aux_lang``/``aux_text`` are null unless the record carries a switched
back-translation source; ``provenance`` is ``authentic``, ``bt_synthetic`` (the
source side was back-translated) or ``sbt_synthetic`` (the aux side was
generated from the target).  ``truncated`` marks generated text that hit the
decoding length cap.

Paired plain-text format (``format="paired"``): ``<stem>.<src_lang>`` and
``<stem>.<tgt_lang>`` line-aligned UTF-8 files, plus an optional
``<stem>.docs`` file listing the 0-based line offset at which each document
starts (one integer per line).  Without it every line is its own document.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import EOS, Vocabulary

PROVENANCES = ("authentic", "bt_synthetic", "sbt_synthetic")
RECORD_FIELDS = ("src_lang", "tgt_lang", "src_text", "tgt_text", "aux_lang", "aux_text",
                 "doc_id", "provenance", "truncated")
SEGMENT_JOINER = " "


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    src_lang: str
    tgt_lang: str
    src_text: str
    tgt_text: str
    aux_lang: str | None = None
    aux_text: str | None = None
    doc_id: str = ""
    provenance: str = "authentic"
    truncated: bool = False

    def validate(self, languages=None) -> None:
        if self.provenance not in PROVENANCES:
            raise CorpusError(f"unknown provenance {self.provenance!r}")
        if (self.aux_lang is None) != (self.aux_text is None):
            raise CorpusError("aux_lang and aux_text must be given together")
        if self.aux_lang is not None and self.aux_lang in (self.src_lang, self.tgt_lang):
            raise CorpusError(f"aux language {self.aux_lang!r} repeats the source or target language")
        if languages is not None:
            for lang in (self.src_lang, self.tgt_lang, self.aux_lang):
                if lang is not None and lang not in languages:
                    raise CorpusError(f"unknown language tag {lang!r}")

    @property
    def has_aux(self) -> bool:
        return self.aux_text is not None

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=False)


@dataclass
class Document:
    doc_id: str
    segments: dict  # lang -> list of segment strings

    def __post_init__(self):
        counts = {len(v) for v in self.segments.values()}
        if len(counts) > 1:
            raise CorpusError(f"document {self.doc_id}: segment counts differ across sides")

    def __len__(self):
        return len(next(iter(self.segments.values()), []))


# ---------------------------------------------------------------------------
# reading and writing
# ---------------------------------------------------------------------------

def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _record_from_obj(obj, lineno, languages):
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: record is not an object")
    unknown = set(obj) - set(RECORD_FIELDS)
    if unknown:
        raise CorpusError(f"line {lineno}: unknown fields {sorted(unknown)}")
    for name in ("src_lang", "tgt_lang", "src_text", "tgt_text"):
        if not isinstance(obj.get(name), str):
            raise CorpusError(f"line {lineno}: field {name!r} missing or not a string")
    try:
        rec = CorpusRecord(**obj)
        rec.validate(languages)
    except (TypeError, CorpusError) as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None
    return rec


def load_corpus(path, format: str = "jsonl", languages=None, src_lang=None, tgt_lang=None) -> list[CorpusRecord]:
    """Read and validate records.  ``languages`` (if given) is the set of allowed tags.

    For ``format="paired"`` ``path`` is the stem and both languages are required.
    """
    if format == "jsonl":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
                records.append(_record_from_obj(obj, lineno, languages))
        return records
    if format == "paired":
        if not src_lang or not tgt_lang:
            raise CorpusError("paired format needs src_lang and tgt_lang")
        stem = str(path)
        src = Path(f"{stem}.{src_lang}").read_text(encoding="utf-8").splitlines()
        tgt = Path(f"{stem}.{tgt_lang}").read_text(encoding="utf-8").splitlines()
        if len(src) != len(tgt):
            raise CorpusError(f"{stem}: {len(src)} source lines vs {len(tgt)} target lines")
        starts = [0]
        docs_path = Path(f"{stem}.docs")
        if docs_path.exists():
            starts = [int(x) for x in docs_path.read_text().split()]
        else:
            starts = list(range(len(src)))
        doc_of = np.searchsorted(np.asarray(starts), np.arange(len(src)), side="right") - 1
        records = []
        for i, (s, t) in enumerate(zip(src, tgt)):
            rec = CorpusRecord(src_lang, tgt_lang, s, t, doc_id=f"d{int(doc_of[i])}")
            try:
                rec.validate(languages)
            except CorpusError as exc:
                raise CorpusError(f"line {i + 1}: {exc}") from None
            records.append(rec)
        return records
    raise CorpusError(f"unknown corpus format {format!r}")


def write_paired(records, stem, src_lang, tgt_lang) -> None:
    """Inverse of ``load_corpus(format='paired')`` for a single language pair."""
    src, tgt, starts, last = [], [], [], None
    for i, r in enumerate(records):
        if r.doc_id != last:
            starts.append(i)
            last = r.doc_id
        src.append(r.src_text)
        tgt.append(r.tgt_text)
    Path(f"{stem}.{src_lang}").write_text("".join(s + "\n" for s in src), encoding="utf-8")
    Path(f"{stem}.{tgt_lang}").write_text("".join(t + "\n" for t in tgt), encoding="utf-8")
    Path(f"{stem}.docs").write_text("".join(f"{s}\n" for s in starts))


# ---------------------------------------------------------------------------
# document packing
# ---------------------------------------------------------------------------

def token_length(text: str, lang: str, vocab: Vocabulary) -> int:
    """Encoded length including the language tag and EOS."""
    return len(vocab.encode(text, lang).ids)


def pack_documents(docs, vocab: Vocabulary, src_lang: str, tgt_lang: str, budget: int = 512,
                   provenance: str = "authentic") -> list[CorpusRecord]:
    """Greedy consecutive packing of aligned segments into sub-documents.

    Segments are appended while both joined sides still encode to at most
    ``budget`` tokens (tag and EOS included; both sides are tagged with the
    target language as at training time).  Segments are never split.
    """
    out = []
    for doc in docs:
        src_segs = doc.segments[src_lang]
        tgt_segs = doc.segments[tgt_lang]
        if len(src_segs) != len(tgt_segs):
            raise CorpusError(f"document {doc.doc_id}: unaligned sides")
        cur_s, cur_t = [], []
        part = 0

        def flush():
            nonlocal part, cur_s, cur_t
            if cur_s:
                out.append(CorpusRecord(src_lang, tgt_lang, SEGMENT_JOINER.join(cur_s),
                                        SEGMENT_JOINER.join(cur_t), doc_id=f"{doc.doc_id}#{part}",
                                        provenance=provenance))
                part += 1
            cur_s, cur_t = [], []

        for k, (s, t) in enumerate(zip(src_segs, tgt_segs)):
            ls, lt = token_length(s, tgt_lang, vocab), token_length(t, tgt_lang, vocab)
            if ls > budget or lt > budget:
                raise CorpusError(f"document {doc.doc_id} segment {k}: {max(ls, lt)} tokens exceed budget {budget}")
            if cur_s:
                js = SEGMENT_JOINER.join(cur_s + [s])
                jt = SEGMENT_JOINER.join(cur_t + [t])
                if token_length(js, tgt_lang, vocab) > budget or token_length(jt, tgt_lang, vocab) > budget:
                    flush()
            cur_s.append(s)
            cur_t.append(t)
        flush()
    return out


# ---------------------------------------------------------------------------
# token-budget batching
# ---------------------------------------------------------------------------

@dataclass
class EncodedRecord:
    index: int
    src: list
    tgt: list  # target pieces + EOS (no tag)
    aux: list | None = None

    @property
    def tokens(self) -> int:
        return len(self.src) + len(self.tgt)


def encode_record(rec: CorpusRecord, vocab: Vocabulary, index: int = 0) -> EncodedRecord:
    src = list(vocab.encode(rec.src_text, rec.tgt_lang).ids)
    tgt = vocab.encode_pieces(rec.tgt_text) + [EOS]
    aux = list(vocab.encode(rec.aux_text, rec.tgt_lang).ids) if rec.has_aux else None
    return EncodedRecord(index, src, tgt, aux)


def batch_iter(records, vocab: Vocabulary, tokens_per_batch: int, seed: int, epoch: int = 0,
               encoded=None) -> list[list[EncodedRecord]]:
    """One epoch of length-bucketed, shuffled, token-budgeted batches.

    Records are shuffled by ``(seed, epoch)``, sorted (stably) by x-side length
    and whether they carry an aux side, cut greedily into batches whose summed
    x-side source+target tokens stay within budget, and the batch order is
    shuffled again.  A record larger than the budget forms its own batch.
    Records with and without an aux side never share a batch.
    """
    if encoded is None:
        encoded = [encode_record(r, vocab, i) for i, r in enumerate(records)]
    rng = np.random.default_rng((int(seed), int(epoch)))
    order = rng.permutation(len(encoded))
    order = sorted(order, key=lambda i: (encoded[i].aux is None, encoded[i].tokens))
    batches, cur, used, cur_kind = [], [], 0, None
    for i in order:
        e = encoded[i]
        kind = e.aux is None
        if cur and (used + e.tokens > tokens_per_batch or kind != cur_kind):
            batches.append(cur)
            cur, used = [], 0
        cur.append(e)
        used += e.tokens
        cur_kind = kind
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def batch_tokens(batch) -> int:
    return sum(e.tokens for e in batch)


# ---------------------------------------------------------------------------
# synthetic toy languages
# ---------------------------------------------------------------------------

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


@dataclass(frozen=True)
class CipherSpec:
    """An invertible word-level transform chain applied to ``base_lang`` text.

    ``chain`` items (applied in order):
      ``("substitute",)``           seeded bijective lexicon over the base words
      ``("reorder", w)``            reverse every consecutive window of w words
      ``("suffix", marker, words)`` append ``marker`` to words in the class list
    """
    lang: str
    base_lang: str
    chain: tuple = ()
    seed: int = 0


@dataclass
class CipherLanguage:
    spec: CipherSpec
    lexicon: dict = field(default_factory=dict)
    inverse_lexicon: dict = field(default_factory=dict)

    @classmethod
    def build(cls, spec: CipherSpec, base_words) -> "CipherLanguage":
        lang = cls(spec)
        if any(step[0] == "substitute" for step in spec.chain):
            words = sorted(set(base_words))
            rng = np.random.default_rng(spec.seed)
            made = set()
            for w in words:
                while True:
                    n = int(rng.integers(2, 4))
                    cand = "".join(_SYLLABLES[int(k)] for k in rng.integers(0, len(_SYLLABLES), size=n))
                    if cand not in made:
                        break
                made.add(cand)
                lang.lexicon[w] = cand
            lang.inverse_lexicon = {v: k for k, v in lang.lexicon.items()}
        for step in spec.chain:
            if step[0] not in ("substitute", "reorder", "suffix"):
                raise CorpusError(f"unknown transform {step[0]!r}")
            if step[0] == "reorder" and int(step[1]) < 1:
                raise CorpusError("reorder window must be >= 1")
        return lang

    # each step maps (words, positions) -> (words, positions); positions[i] is the
    # base index of the word now at slot i, which yields gold alignments
    def transform_with_positions(self, sentence: str):
        words = sentence.split()
        pos = list(range(len(words)))
        for step in self.spec.chain:
            kind = step[0]
            if kind == "substitute":
                words = [self.lexicon[w] for w in words]
            elif kind == "reorder":
                w = int(step[1])
                perm = []
                for start in range(0, len(words), w):
                    perm.extend(reversed(range(start, min(start + w, len(words)))))
                words = [words[i] for i in perm]
                pos = [pos[i] for i in perm]
            elif kind == "suffix":
                marker, klass = step[1], self._suffix_class(step)
                words = [w + marker if w in klass else w for w in words]
        return words, pos

    def _suffix_class(self, step) -> set:
        # the class list names base words; map it through any earlier substitution
        idx = self.spec.chain.index(step)
        klass = set(step[2])
        if any(s[0] == "substitute" for s in self.spec.chain[:idx]):
            klass = {self.lexicon[w] for w in klass if w in self.lexicon}
        return klass

    def transform(self, sentence: str) -> str:
        return " ".join(self.transform_with_positions(sentence)[0])

    def inverse(self, sentence: str) -> str:
        words = sentence.split()
        for step in reversed(self.spec.chain):
            kind = step[0]
            if kind == "substitute":
                words = [self.inverse_lexicon.get(w, w) for w in words]
            elif kind == "reorder":
                w = int(step[1])
                perm = []
                for start in range(0, len(words), w):
                    perm.extend(reversed(range(start, min(start + w, len(words)))))
                # window reversal is its own inverse
                words = [words[i] for i in perm]
            elif kind == "suffix":
                marker, klass = step[1], self._suffix_class(step)
                words = [w[: -len(marker)] if w.endswith(marker) and w[: -len(marker)] in klass else w
                         for w in words]
        return " ".join(words)


@dataclass
class ToyCorpus:
    sentences: dict          # lang -> list of sentences (index-aligned)
    alignments: dict         # (lang_a, lang_b) -> list of per-sentence [(i, j), ...]
    languages: dict          # lang -> CipherLanguage (cipher languages only)

    def pairs(self, src_lang, tgt_lang, indices=None) -> list[tuple[str, str]]:
        idx = range(len(self.sentences[src_lang])) if indices is None else indices
        return [(self.sentences[src_lang][i], self.sentences[tgt_lang][i]) for i in idx]


def make_toy_multilingual(base_corpus: dict, specs) -> ToyCorpus:
    """Derive cipher languages from sides of an index-aligned base corpus.

    ``base_corpus`` maps language -> sentences.  Each spec adds a language whose
    sentences are the cipher chain applied to its ``base_lang`` side; gold word
    alignments to the base and between cipher languages sharing a base follow
    from the tracked word positions.
    """
    base_langs = set(base_corpus)
    seen = set()
    for spec in specs:
        if spec.lang in base_langs or spec.lang in seen:
            raise CorpusError(f"duplicate language id {spec.lang!r}")
        if spec.base_lang not in base_langs:
            raise CorpusError(f"base language {spec.base_lang!r} not in base corpus")
        seen.add(spec.lang)
    sentences = {k: list(v) for k, v in base_corpus.items()}
    positions, languages, alignments = {}, {}, {}
    for spec in specs:
        base = sentences[spec.base_lang]
        vocab = [w for s in base for w in s.split()]
        lang = CipherLanguage.build(spec, vocab)
        out, pos = [], []
        for s in base:
            words, p = lang.transform_with_positions(s)
            out.append(" ".join(words))
            pos.append(p)
            if lang.inverse(out[-1]) != " ".join(s.split()):
                raise CorpusError(f"{spec.lang}: transform chain is not invertible on {s!r}")
        sentences[spec.lang] = out
        positions[spec.lang] = (spec.base_lang, pos)
        languages[spec.lang] = lang
        alignments[(spec.lang, spec.base_lang)] = [[(i, b) for i, b in enumerate(p)] for p in pos]
        alignments[(spec.base_lang, spec.lang)] = [sorted((b, i) for i, b in enumerate(p)) for p in pos]
    for a in positions:
        for b in positions:
            if a == b or positions[a][0] != positions[b][0]:
                continue
            pa, pb = positions[a][1], positions[b][1]
            al = []
            for qa, qb in zip(pa, pb):
                where_b = {base_i: j for j, base_i in enumerate(qb)}
                al.append([(i, where_b[base_i]) for i, base_i in enumerate(qa)])
            alignments[(a, b)] = al
    return ToyCorpus(sentences, alignments, languages)


# a tiny English-like grammar for the target side of the toy benchmark
_DET = ["the", "a", "this", "every"]
_ADJ = ["big", "small", "red", "old", "quiet", "happy", "green", "tall"]
_NOUN = ["dog", "cat", "bird", "child", "farmer", "teacher", "horse", "river", "tree", "house", "boat", "garden"]
_VERB_PRESENT = ["sees", "likes", "finds", "follows", "paints", "visits", "hears", "watches"]
_VERB_PAST = ["saw", "liked", "found", "followed", "painted", "visited", "heard", "watched"]
_PREP = ["near", "behind", "under", "beside"]
_ADV = ["today", "yesterday", "again", "slowly"]

TOY_VERBS = tuple(_VERB_PRESENT + _VERB_PAST)
TOY_NOUNS = tuple(_NOUN)


def _noun_phrase(rng) -> list[str]:
    words = [_DET[int(rng.integers(len(_DET)))]]
    if rng.random() < 0.5:
        words.append(_ADJ[int(rng.integers(len(_ADJ)))])
    words.append(_NOUN[int(rng.integers(len(_NOUN)))])
    return words


def toy_sentences(n: int, seed: int) -> list[str]:
    """Distinct sentences from a small subject-verb-object grammar."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        verbs = _VERB_PAST if rng.random() < 0.5 else _VERB_PRESENT
        words = _noun_phrase(rng) + [verbs[int(rng.integers(len(verbs)))]] + _noun_phrase(rng)
        if rng.random() < 0.3:
            words += [_PREP[int(rng.integers(len(_PREP)))]] + _noun_phrase(rng)
        if rng.random() < 0.3:
            words.append(_ADV[int(rng.integers(len(_ADV)))])
        s = " ".join(words)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out
