"""Corpus BLEU-4 and document-level BLEU.

Tokenisation reproduces the ``13a`` rules (the default of the SacreBLEU
script, a port of mteval-v13a):

1. drop ``<skipped>``, join ``-\\n`` line breaks, map newlines to spaces;
2. unescape ``&quot; &amp; &lt; &gt;``;
3. pad with spaces, then apply in order
   - split off any of ``{|}~ [\\]^_` space !"#$%& ()*+ :;<=>? @ /``
     (regex class ``[\\{-\\~\\[-\\` -\\&\\(-\\+\\:-\\@\\/]``),
   - split ``.`` and ``,`` unless preceded by a digit,
   - split ``.`` and ``,`` unless followed by a digit,
   - split ``-`` when preceded by a digit;
4. collapse whitespace.

Scoring: clipped n-gram matches and hypothesis n-gram totals summed over the
corpus for n = 1..4; score = 100 * BP * exp(mean_n ln(matches_n / totals_n))
with BP = exp(1 - ref_len / hyp_len) when hyp_len < ref_len.  No smoothing:
if any n-gram order has zero matches (or zero hypothesis n-grams) the score
is 0.  Precisions are reported in percent.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

MAX_ORDER = 4

_13A_RULES = (
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
)


class BleuError(ValueError):
    pass


def tokenize_13a(line: str) -> str:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


TOKENIZERS = {"13a": tokenize_13a, "none": lambda s: " ".join(s.split())}


@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    matches: tuple
    totals: tuple

    def to_dict(self) -> dict:
        return {"score": self.score, "precisions": list(self.precisions),
                "brevity_penalty": self.brevity_penalty, "hyp_length": self.hyp_length,
                "ref_length": self.ref_length, "matches": list(self.matches), "totals": list(self.totals)}


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def segment_stats(hyp: str, ref: str, tokenize: str = "13a"):
    """(hyp_len, ref_len, matches[4], totals[4]) for one segment."""
    tok = TOKENIZERS[tokenize]
    h, r = tok(hyp).split(), tok(ref).split()
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
        totals.append(max(len(h) - n + 1, 0))
    return len(h), len(r), matches, totals


def score_from_stats(hyp_len, ref_len, matches, totals) -> BleuReport:
    precisions = tuple(100.0 * m / t if t > 0 else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if any(m == 0 for m in matches) or any(t == 0 for t in totals):
        score = 0.0
    else:
        # ratios (not percentages) inside the log so a perfect corpus gives exactly 100.0
        log_mean = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
        score = 100.0 * bp * math.exp(log_mean)
    return BleuReport(score, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))


def bleu(hypotheses, references, tokenize: str = "13a") -> BleuReport:
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise BleuError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise BleuError("empty reference corpus")
    hl = rl = 0
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for h, r in zip(hypotheses, references):
        a, b, m, t = segment_stats(h, r, tokenize)
        hl += a
        rl += b
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
    return score_from_stats(hl, rl, matches, totals)


def _as_document(doc, joiner=" "):
    return doc if isinstance(doc, str) else joiner.join(doc)


def d_bleu(doc_hypotheses, doc_references, tokenize: str = "13a") -> BleuReport:
    """BLEU with each whole document (segments joined by a space) as one segment."""
    return bleu([_as_document(d) for d in doc_hypotheses], [_as_document(d) for d in doc_references], tokenize)


def sentence_breakdown(hypotheses, references, tokenize: str = "13a") -> list[dict]:
    rows = []
    for i, (h, r) in enumerate(zip(hypotheses, references)):
        a, b, m, t = segment_stats(h, r, tokenize)
        rep = score_from_stats(a, b, m, t)
        rows.append({"segment": i, "score": rep.score, "hyp_length": a, "ref_length": b,
                     "matches": m, "totals": t})
    return rows
