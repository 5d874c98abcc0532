"""Shared byte-level BPE vocabulary with per-language target tags.

Layout of ids (dense, fixed low ids first)::

    0 <pad>  1 <s>  2 </s>  3 <unk>
    4 .. 4+L-1          one tag per registered language, e.g. ``<2en>``
    next 256            single-byte pieces (byte fallback, so every string encodes)
    rest                merged pieces in merge order

Text is pre-split into chunks of ``optional whitespace + non-space run`` (or a
trailing whitespace run); merges and encoding never cross chunk boundaries, and
chunks concatenate back to the input, so ``decode(encode(s)) == s`` for any
string.  Encoding inside a chunk is greedy longest-match over the piece set.

Vocabulary file: one ``<id>\\t<piece>\\t<kind>`` line per entry, kind in
{special, tag, piece}; piece bytes are written with Python ``bytes`` escapes
(``codecs.escape_encode``) so tabs, newlines and non-UTF-8 bytes reload exactly.
"""
from __future__ import annotations

import codecs
import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

_CHUNK = re.compile(r"\s*\S+|\s+")


class TokenizerError(ValueError):
    pass


def tag_surface(lang: str) -> str:
    return f"<2{lang}>"


def chunks(text: str) -> list[bytes]:
    return [m.group(0).encode("utf-8") for m in _CHUNK.finditer(text)]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    language_tag: int | None = None

    def __post_init__(self):
        if self.language_tag is not None and (not self.ids or self.ids[0] != self.language_tag):
            raise TokenizerError("language tag must be the first id")

    def __len__(self):
        return len(self.ids)


@dataclass
class Vocabulary:
    languages: tuple
    merged: tuple  # merged pieces (bytes) in merge order
    _piece_to_id: dict = field(init=False, repr=False)
    _max_len: int = field(init=False, repr=False)

    def __post_init__(self):
        self.languages = tuple(self.languages)
        if len(set(self.languages)) != len(self.languages):
            raise TokenizerError("duplicate language id")
        self.merged = tuple(self.merged)
        self._pieces = [None] * self.n_reserved + [bytes([b]) for b in range(256)] + list(self.merged)
        self._piece_to_id = {}
        for i, piece in enumerate(self._pieces):
            if piece is not None:
                self._piece_to_id[piece] = i
        self._max_len = max((len(p) for p in self.merged), default=1)
        reserved = {s.encode() for s in SPECIALS} | {tag_surface(l).encode() for l in self.languages}
        clash = reserved.intersection(self.merged)
        if clash:
            raise TokenizerError(f"piece collides with a reserved surface form: {sorted(clash)}")

    # -- id layout -------------------------------------------------------
    @property
    def n_reserved(self) -> int:
        return len(SPECIALS) + len(self.languages)

    @property
    def byte_offset(self) -> int:
        return self.n_reserved

    @property
    def pieces(self) -> list:
        """Surface of every id; specials/tags as ``None``."""
        return list(self._pieces)

    def __len__(self) -> int:
        return self.n_reserved + 256 + len(self.merged)

    @property
    def size(self) -> int:
        return len(self)

    def tag_id(self, lang: str) -> int:
        try:
            return len(SPECIALS) + self.languages.index(lang)
        except ValueError:
            raise TokenizerError(f"language {lang!r} is not registered") from None

    def is_tag(self, idx: int) -> bool:
        return len(SPECIALS) <= idx < self.n_reserved

    def lang_of_tag(self, idx: int) -> str:
        if not self.is_tag(idx):
            raise TokenizerError(f"id {idx} is not a language tag")
        return self.languages[idx - len(SPECIALS)]

    def entries(self):
        """(id, surface-bytes, kind) for every id."""
        for i, s in enumerate(SPECIALS):
            yield i, s.encode(), "special"
        for j, lang in enumerate(self.languages):
            yield len(SPECIALS) + j, tag_surface(lang).encode(), "tag"
        for i, piece in enumerate(self._pieces[self.n_reserved:], start=self.n_reserved):
            yield i, piece, "piece"

    def digest(self) -> str:
        h = hashlib.sha256()
        for i, surface, kind in self.entries():
            h.update(f"{i}\t{kind}\t".encode() + surface + b"\n")
        return h.hexdigest()

    # -- encode / decode -------------------------------------------------
    def _encode_chunk(self, chunk: bytes) -> list[int]:
        out = []
        i, n = 0, len(chunk)
        lookup = self._piece_to_id
        while i < n:
            for L in range(min(self._max_len, n - i), 0, -1):
                idx = lookup.get(chunk[i:i + L])
                if idx is not None:
                    out.append(idx)
                    i += L
                    break
        return out

    def encode_pieces(self, text: str) -> list[int]:
        ids = []
        for c in chunks(text):
            ids.extend(self._encode_chunk(c))
        return ids

    def encode(self, text: str, target_lang: str) -> TokenSequence:
        tag = self.tag_id(target_lang)
        return TokenSequence((tag, *self.encode_pieces(text), EOS), language_tag=tag)

    def decode(self, seq) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        n = len(self)
        buf = bytearray()
        for idx in ids:
            idx = int(idx)
            if not 0 <= idx < n:
                raise TokenizerError(f"invalid token id {idx}")
            if idx < self.n_reserved:
                if idx == UNK:
                    buf.extend("�".encode())
                continue
            buf.extend(self._pieces[idx])
        return buf.decode("utf-8", errors="replace")

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        lines = []
        for i, surface, kind in self.entries():
            esc = codecs.escape_encode(surface)[0].decode("ascii")
            lines.append(f"{i}\t{esc}\t{kind}\n")
        Path(path).write_text("".join(lines), encoding="ascii")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        languages, merged = [], []
        expect_bytes = 0
        for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
            try:
                idx, esc, kind = line.split("\t")
                surface = codecs.escape_decode(esc.encode("ascii"))[0]
                idx = int(idx)
            except ValueError as exc:
                raise TokenizerError(f"{path}:{lineno}: malformed vocabulary line") from exc
            if kind == "special":
                if idx >= len(SPECIALS) or surface != SPECIALS[idx].encode():
                    raise TokenizerError(f"{path}:{lineno}: unexpected special {surface!r}")
            elif kind == "tag":
                s = surface.decode()
                if not (s.startswith("<2") and s.endswith(">")):
                    raise TokenizerError(f"{path}:{lineno}: malformed tag {s!r}")
                languages.append(s[2:-1])
            elif kind == "piece":
                if expect_bytes < 256:
                    if surface != bytes([expect_bytes]):
                        raise TokenizerError(f"{path}:{lineno}: byte piece out of order")
                    expect_bytes += 1
                else:
                    merged.append(surface)
            else:
                raise TokenizerError(f"{path}:{lineno}: unknown kind {kind!r}")
        vocab = cls(tuple(languages), tuple(merged))
        return vocab


def train_subwords(corpus, vocab_size: int, languages, seed: int = 0) -> Vocabulary:
    """Greedy byte-pair merges over chunk frequencies.

    The most frequent adjacent pair is merged each round; ties go to the
    lexicographically smallest ``(left, right)`` byte pair, so the result is a
    pure function of the corpus and ``vocab_size``.  ``seed`` is accepted for
    interface symmetry and does not influence the outcome.
    """
    corpus = list(corpus)
    if not corpus:
        raise TokenizerError("empty corpus")
    languages = tuple(languages)
    base = len(SPECIALS) + len(languages) + 256
    if vocab_size <= base:
        raise TokenizerError(f"vocab_size {vocab_size} must exceed {base} (specials + tags + bytes)")
    reserved = {s.encode() for s in SPECIALS} | {tag_surface(l).encode() for l in languages}

    counts = Counter()
    for text in corpus:
        counts.update(chunks(text))
    words = {tuple(bytes([b]) for b in w): c for w, c in counts.items()}
    merged: list[bytes] = []
    known = {bytes([b]) for b in range(256)}
    banned: set = set()
    while base + len(merged) < vocab_size:
        pairs = Counter()
        for w, c in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += c
        for pair in banned:
            pairs.pop(pair, None)
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        new = best[0] + best[1]
        if new in reserved:
            banned.add(best)
            continue
        if new not in known:
            # a different pair may already have produced this surface
            merged.append(new)
            known.add(new)
        words = {_merge_word(w, best, new): c for w, c in words.items()}
    return Vocabulary(languages, tuple(merged))


def _merge_word(word: tuple, pair: tuple, new: bytes) -> tuple:
    if len(word) < 2:
        return word
    out = []
    i = 0
    a, b = pair
    while i < len(word):
        if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def encode(text: str, target_lang: str, vocab: Vocabulary) -> TokenSequence:
    return vocab.encode(text, target_lang)


def decode(seq, vocab: Vocabulary) -> str:
    return vocab.decode(seq)
