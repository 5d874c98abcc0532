"""Byte-level BPE vocabulary, tag prefixing and lossless round-trips."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agreelab.tokenizer import (BOS, EOS, PAD, SPECIALS, UNK, TokenizerError, TokenSequence, Vocabulary,
                                decode, encode, tag_surface, train_subwords)

LANGS = ("en", "xa")


def merges(vocab):
    return [p for i, p, kind in vocab.entries() if kind == "piece" and i >= vocab.byte_offset + 256]


class TestTraining:
    def test_aaaa_hand_run(self):
        # one chunk "aaaa": (a,a) is the only pair -> "aa"; then (aa,aa) -> "aaaa"
        base = len(SPECIALS) + len(LANGS) + 256
        vocab = train_subwords(["aaaa"], base + 2, LANGS)
        assert merges(vocab) == [b"aa", b"aaaa"]
        assert vocab.encode_pieces("aaaa") == [vocab.size - 1]

    def test_stops_when_no_pairs_remain(self):
        base = len(SPECIALS) + len(LANGS) + 256
        vocab = train_subwords(["aaaa"], base + 50, LANGS)
        assert merges(vocab) == [b"aa", b"aaaa"]

    def test_ties_break_lexicographically(self):
        # after "ab": pairs (" ", ab) and (ab, c) both occur once; b" " < b"ab"
        base = len(SPECIALS) + len(LANGS) + 256
        vocab = train_subwords(["ab ab", "abc"], base + 3, LANGS)
        assert merges(vocab) == [b"ab", b" ab", b"abc"]

    def test_deterministic(self):
        corpus = ["the cat sat", "the dog ran", "a cat ran"] * 4
        a = train_subwords(corpus, 300, LANGS, seed=3)
        b = train_subwords(list(corpus), 300, LANGS, seed=3)
        assert a.digest() == b.digest()
        assert a.encode("the cat", "en") == b.encode("the cat", "en")

    def test_empty_corpus(self):
        with pytest.raises(TokenizerError):
            train_subwords([], 400, LANGS)

    def test_vocab_too_small(self):
        with pytest.raises(TokenizerError):
            train_subwords(["abc"], len(SPECIALS) + len(LANGS) + 256, LANGS)

    def test_reserved_surfaces_never_become_pieces(self):
        corpus = ["<2en> <2en> <pad> </s>"] * 20
        vocab = train_subwords(corpus, 330, LANGS)
        reserved = {s.encode() for s in SPECIALS} | {tag_surface(l).encode() for l in LANGS}
        pieces = [p for i, p, kind in vocab.entries() if kind == "piece"]
        assert not reserved & set(pieces)
        # the text still round-trips through bytes
        assert vocab.decode(vocab.encode(corpus[0], "en")) == corpus[0]


class TestLayout:
    def test_dense_ids_and_fixed_low_ids(self, small_vocab):
        ids = [i for i, _, _ in small_vocab.entries()]
        assert ids == list(range(len(small_vocab)))
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
        assert small_vocab.tag_id("en") == len(SPECIALS)
        assert small_vocab.lang_of_tag(small_vocab.tag_id("xb")) == "xb"

    def test_unregistered_language(self, small_vocab):
        with pytest.raises(TokenizerError):
            small_vocab.encode("hello", "zz")


class TestEncodeDecode:
    def test_empty_text(self, small_vocab):
        seq = encode("", "en", small_vocab)
        assert seq.ids == (small_vocab.tag_id("en"), EOS)
        assert decode(seq, small_vocab) == ""

    def test_tag_first(self, small_vocab):
        seq = small_vocab.encode("the cat", "xa")
        assert seq.ids[0] == small_vocab.tag_id("xa") == seq.language_tag
        assert seq.ids[-1] == EOS

    def test_tag_must_lead(self):
        with pytest.raises(TokenizerError):
            TokenSequence((5, 4), language_tag=4)

    def test_corpus_round_trip(self, small_vocab):
        from conftest import TOY_TEXTS
        for s in TOY_TEXTS:
            assert small_vocab.decode(small_vocab.encode(s, "en")) == s

    def test_merges_shorten_covered_text(self, small_vocab):
        s = "the cat sat on the mat"
        assert len(small_vocab.encode_pieces(s)) < len(s.encode())

    def test_unseen_bytes_use_fallback(self, small_vocab):
        s = "naïve 東京 \x00\x7f"
        seq = small_vocab.encode(s, "en")
        assert small_vocab.decode(seq) == s
        assert all(i >= small_vocab.byte_offset for i in seq.ids[1:-1])

    def test_invalid_id(self, small_vocab):
        with pytest.raises(TokenizerError):
            small_vocab.decode([len(small_vocab)])
        with pytest.raises(TokenizerError):
            small_vocab.decode([-1])

    def test_random_strings_round_trip(self, small_vocab):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(0, 30))
            cps = rng.integers(1, 0x2FFFF, size=n)
            s = "".join(chr(c) for c in cps if not 0xD800 <= c <= 0xDFFF)
            assert small_vocab.decode(small_vocab.encode(s, "xa")) == s

    @settings(max_examples=300, deadline=None)
    @given(st.text())
    def test_round_trip_property(self, small_vocab, s):
        assert small_vocab.decode(small_vocab.encode(s, "en")) == s


class TestFile:
    def test_byte_exact_reload(self, small_vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        small_vocab.save(path)
        again = Vocabulary.load(path)
        assert again.digest() == small_vocab.digest()
        again.save(tmp_path / "vocab2.txt")
        assert (tmp_path / "vocab2.txt").read_bytes() == path.read_bytes()

    def test_format(self, small_vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        small_vocab.save(path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(small_vocab)
        kinds = [l.split("\t")[2] for l in lines]
        assert kinds[:4] == ["special"] * 4
        assert kinds[4:7] == ["tag"] * 3
        assert set(kinds[7:]) == {"piece"}

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0\t<pad>\tspecial\nnot a line\n")
        with pytest.raises(TokenizerError):
            Vocabulary.load(path)
