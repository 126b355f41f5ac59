"""Tokenization, vocabularies, content words and rule-based phrase chunking.

Tokenizer rules, applied left to right on lowercased text (curly
apostrophes normalised to ``'``):

1. letter-dot abbreviations of two or more letters: ``u.s.``, ``e.g.``
2. numbers with internal separators: ``3.50``, ``1,000,000``
3. words, with internal hyphens or apostrophes kept: ``e-mails``, ``don't``
4. any other non-space character is a token on its own
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, TaggingError

PAD, UNK, BOS, EOS, EVD, ARG, PHRASE = "<pad>", "<unk>", "<s>", "</s>", "<evd>", "<arg>", "<phrase>"
RESERVED = (PAD, UNK, BOS, EOS, EVD, ARG, PHRASE)

POS_TAGS = ("NOUN", "VERB", "ADJ", "OTHER")

_TOKEN_RE = re.compile(
    r"""
    (?:[^\W\d_]\.){2,}              # abbreviations
    | \d+(?:[.,]\d+)+               # numbers with separators
    | [^\W_]+(?:['-][^\W_]+)*       # words
    | \S                            # anything else, one char at a time
    """,
    re.VERBOSE,
)
_WORD_RE = re.compile(r"^[^\W\d_]+(?:['-][^\W\d_]+)*$")
_TERMINALS = frozenset({".", "!", "?"})


@dataclass(frozen=True)
class TokenSeq:
    """Lowercased tokens with an optional parallel coarse POS layer."""

    tokens: tuple
    pos: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(not t for t in self.tokens):
            raise DataError("empty token in TokenSeq")
        if self.pos is not None:
            object.__setattr__(self, "pos", tuple(self.pos))
            if len(self.pos) != len(self.tokens):
                raise DataError("POS layer length differs from token count")

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, item):
        return self.tokens[item]

    def text(self):
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Phrase:
    start: int
    end: int
    kind: str  # "NP" or "VP"

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise DataError(f"bad phrase span ({self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    def tokens(self, seq: TokenSeq):
        return seq.tokens[self.start : self.end]

    def overlaps(self, other: "Phrase") -> bool:
        return self.start < other.end and other.start < self.end


def tokenize(text: str) -> TokenSeq:
    text = text.replace("’", "'").replace("‘", "'").lower()
    return TokenSeq(tuple(_TOKEN_RE.findall(text)))


def split_sentences(seq: TokenSeq) -> list:
    """Split after runs of ``.``, ``!`` or ``?`` tokens."""
    sents = []
    start = 0
    n = len(seq)
    for i, tok in enumerate(seq.tokens):
        if tok in _TERMINALS and (i + 1 == n or seq.tokens[i + 1] not in _TERMINALS):
            sents.append((start, i + 1))
            start = i + 1
    if start < n:
        sents.append((start, n))
    out = []
    for lo, hi in sents:
        pos = seq.pos[lo:hi] if seq.pos is not None else None
        out.append(TokenSeq(seq.tokens[lo:hi], pos))
    return out


def is_word(token: str) -> bool:
    """Alphabetic token, allowing internal hyphens and apostrophes."""
    return bool(_WORD_RE.match(token))


def content_words(seq: Iterable[str], stopwords) -> set:
    return {t for t in seq if is_word(t) and t not in stopwords}


# ----------------------------------------------------------------------
# word lists


def load_wordlist(path) -> frozenset:
    """One entry per line; blank lines and ``#`` comments ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read word list {path}: {exc}") from exc
    return _parse_wordlist(lines)


def _parse_wordlist(lines):
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip().lower()
        if line:
            out.append(line)
    return frozenset(out)


def _shipped_lines(name):
    return resources.files("argen").joinpath("data", name).read_text(encoding="utf-8").splitlines()


@lru_cache(maxsize=None)
def shipped_wordlist(name: str) -> frozenset:
    return _parse_wordlist(_shipped_lines(name))


def default_stopwords() -> frozenset:
    return shipped_wordlist("stopwords.txt")


def default_offensive() -> frozenset:
    return shipped_wordlist("offensive.txt")


def load_phrase_list(path=None) -> list:
    """Multi-word entries (e.g. generic responses), each tokenized."""
    if path is None:
        lines = _shipped_lines("generic_responses.txt")
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read phrase list {path}: {exc}") from exc
    phrases = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            phrases.append(tokenize(line).tokens)
    return phrases


# ----------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token <-> id map with the seven reserved tokens at ids 0-6."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens in order")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate entries in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    @property
    def unk_id(self):
        return 1

    def id(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def encode(self, tokens: Iterable[str]) -> list:
        get = self.stoi.get
        return [get(t, 1) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().splitlines())


def build_vocab(corpus: Iterable[Iterable[str]], cap: int = 50_000) -> Vocabulary:
    """Reserved tokens first, then by descending frequency, ties lexicographic."""
    if cap <= len(RESERVED):
        raise ConfigError(f"vocabulary cap must exceed {len(RESERVED)}")
    counts = Counter()
    for seq in corpus:
        counts.update(t for t in seq if t not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked[: cap - len(RESERVED)]])


# ----------------------------------------------------------------------
# POS tagging and chunking

_ADJ_SUFFIXES = ("al", "ive", "ous", "ful", "less", "able", "ible", "ic", "ary", "ish")
_VERB_SUFFIXES = ("ize", "izes", "ized", "izing", "ise", "ises", "ised", "ising", "ify", "ifies", "ified", "ed", "ing")


@lru_cache(maxsize=None)
def _lexicon():
    verbs = set()
    for line in _shipped_lines("verbs.txt"):
        line = line.split("#", 1)[0]
        verbs.update(line.split())
    return {
        "closed": shipped_wordlist("closed_class.txt") | shipped_wordlist("determiners.txt"),
        "det": shipped_wordlist("determiners.txt"),
        "verbs": frozenset(verbs),
        "adj": shipped_wordlist("adjectives.txt"),
    }


def determiners() -> frozenset:
    return _lexicon()["det"]


def tag_token(token: str) -> str:
    lex = _lexicon()
    if not is_word(token) or token in lex["closed"]:
        return "OTHER"
    if token in lex["verbs"]:
        return "VERB"
    if token in lex["adj"]:
        return "ADJ"
    if len(token) > 4:
        if token.endswith(_ADJ_SUFFIXES):
            return "ADJ"
        if token.endswith(_VERB_SUFFIXES):
            return "VERB"
    return "NOUN"


def tag(seq: TokenSeq) -> TokenSeq:
    """Attach lexicon-based coarse POS tags (kept if already present)."""
    if seq.pos is not None:
        return seq
    return TokenSeq(seq.tokens, tuple(tag_token(t) for t in seq.tokens))


def chunk_phrases(seq: TokenSeq) -> list:
    """Noun and verb phrases from the coarse POS layer.

    NP: optional determiner, any ADJ run, then a maximal NOUN run.
    VP: a VERB immediately followed by an NP (span covers both).
    """
    if seq.pos is None:
        raise TaggingError("chunk_phrases needs POS tags; call tag() first")
    dets = determiners()
    toks, pos = seq.tokens, seq.pos
    n = len(toks)
    nps = []
    i = 0
    while i < n:
        j = i + 1 if toks[i] in dets and pos[i] != "NOUN" else i
        k = j
        while k < n and pos[k] == "ADJ":
            k += 1
        m = k
        while m < n and pos[m] == "NOUN":
            m += 1
        if m > k:
            nps.append(Phrase(i, m, "NP"))
            i = m
        else:
            i += 1
    np_by_start = {p.start: p for p in nps}
    vps = [Phrase(v, np_by_start[v + 1].end, "VP") for v in range(n) if pos[v] == "VERB" and v + 1 in np_by_start]
    return sorted(nps + vps, key=lambda p: (p.start, p.end))
