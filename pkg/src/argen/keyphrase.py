"""Gold keyphrase sequences built from evidence sentences and a reference argument."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError
from .text import PHRASE, TokenSeq, chunk_phrases, content_words, default_stopwords, tag

MIN_LEN, MAX_LEN = 2, 10


@dataclass(frozen=True, order=True)
class Candidate:
    """A chunk located in the evidence; ordering is source order."""

    sent: int
    start: int
    end: int
    kind: str
    tokens: tuple

    def __len__(self):
        return self.end - self.start

    def overlaps(self, other: "Candidate") -> bool:
        return self.sent == other.sent and self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class GoldKeyphraseSeq:
    phrases: tuple
    serialized: tuple

    @classmethod
    def from_phrases(cls, phrases) -> "GoldKeyphraseSeq":
        phrases = tuple(tuple(p) for p in phrases)
        for p in phrases:
            if not MIN_LEN <= len(p) <= MAX_LEN:
                raise DataError(f"keyphrase length {len(p)} outside [{MIN_LEN}, {MAX_LEN}]")
        out = []
        for i, p in enumerate(phrases):
            if i:
                out.append(PHRASE)
            out.extend(p)
        return cls(phrases, tuple(out))

    @classmethod
    def parse(cls, serialized) -> "GoldKeyphraseSeq":
        phrases = []
        cur = []
        for tok in serialized:
            if tok == PHRASE:
                phrases.append(tuple(cur))
                cur = []
            else:
                cur.append(tok)
        if cur or phrases:
            phrases.append(tuple(cur))
        return cls.from_phrases(phrases)


def extract_candidates(evidence) -> list:
    out = []
    for i, sent in enumerate(evidence):
        sent = tag(sent if isinstance(sent, TokenSeq) else TokenSeq(sent))
        for ph in chunk_phrases(sent):
            out.append(Candidate(i, ph.start, ph.end, ph.kind, ph.tokens(sent)))
    return sorted(out)


def filter_candidates(candidates, argument, stopwords=None) -> list:
    """Length in [2, 10] and at least one content word shared with the argument."""
    if not len(argument):
        raise DataError("argument must be non-empty")
    stopwords = default_stopwords() if stopwords is None else stopwords
    arg_cw = content_words(argument, stopwords)
    return [c for c in candidates if MIN_LEN <= len(c) <= MAX_LEN and content_words(c.tokens, stopwords) & arg_cw]


def coverage(cand: Candidate, arg_cw, stopwords) -> int:
    return len(content_words(cand.tokens, stopwords) & arg_cw)


def prefer(a: Candidate, b: Candidate, arg_cw, stopwords) -> Candidate:
    """Winner of an overlapping pair.

    The longer phrase wins only with strictly more argument coverage;
    otherwise the shorter one does. Equal lengths keep ``a``.
    """
    if len(a) == len(b):
        return a
    longer, shorter = (a, b) if len(a) > len(b) else (b, a)
    if coverage(longer, arg_cw, stopwords) > coverage(shorter, arg_cw, stopwords):
        return longer
    return shorter


def resolve_overlaps(kept, argument, stopwords=None) -> list:
    """Greedy pass in source order until no two spans overlap.

    Each candidate is compared with every already-accepted phrase it
    overlaps. It replaces them only if it wins every one of those
    comparisons; otherwise it is dropped and they stay.
    """
    stopwords = default_stopwords() if stopwords is None else stopwords
    arg_cw = content_words(argument, stopwords)
    accepted = []
    for cand in sorted(kept):
        rivals = [a for a in accepted if a.overlaps(cand)]
        if all(prefer(a, cand, arg_cw, stopwords) is cand for a in rivals):
            accepted = [a for a in accepted if a not in rivals]
            accepted.append(cand)
    return sorted(accepted)


def assemble_gold_sequence(final) -> GoldKeyphraseSeq:
    return GoldKeyphraseSeq.from_phrases(c.tokens for c in sorted(final))


def gold_keyphrases(evidence, argument, stopwords=None) -> GoldKeyphraseSeq:
    """Full pipeline: chunk, filter, resolve overlaps, join with ``<phrase>``."""
    argument = tuple(argument)
    cands = filter_candidates(extract_candidates(evidence), argument, stopwords)
    return assemble_gold_sequence(resolve_overlaps(cands, argument, stopwords))
