"""Inverted index, topic-signature queries and TF-IDF evidence reranking."""
from __future__ import annotations

import json
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError
from .text import (
    TokenSeq,
    chunk_phrases,
    default_stopwords,
    is_word,
    split_sentences,
    tag,
    tokenize,
)

INDEX_MAGIC = b"ARGEN-IDX\n"
INDEX_VERSION = 1
DEFAULT_CUTOFF = 10.83


def index_terms(tokens, stopwords) -> list:
    """Tokens that take part in TF-IDF scoring: alphanumeric, not stopwords."""
    return [t for t in tokens if t not in stopwords and any(ch.isalnum() for ch in t)]


@dataclass(frozen=True)
class Query:
    terms: tuple
    source_sentence_index: int
    units: tuple = ()

    def __post_init__(self):
        if not self.terms:
            raise DataError("query needs at least one term")

    def text(self):
        return ", ".join(" ".join(u) for u in self.units)


@dataclass(frozen=True)
class ScoredText:
    ref: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataError(f"non-finite score for {self.ref}")


@dataclass
class Article:
    title: str
    paragraphs: list  # list of list of TokenSeq (sentences)


class InvertedIndex:
    """Immutable TF-IDF index over articles, with paragraph and sentence stores.

    Paragraphs and sentences get dense global ids in article order, so
    "ascending id" tie-breaks follow corpus order at every granularity.
    """

    def __init__(self, articles, stopwords=None):
        if not articles:
            raise DataError("cannot index an empty corpus")
        self.stopwords = frozenset(default_stopwords() if stopwords is None else stopwords)
        self.articles = articles
        self.meta = {}
        self.para_article = []
        self.para_sents = []
        self.sentences = []
        self.sent_para = []
        self.article_paras = []
        for a_id, art in enumerate(articles):
            self.article_paras.append(range(len(self.para_article), len(self.para_article) + len(art.paragraphs)))
            for para in art.paragraphs:
                p_id = len(self.para_article)
                self.para_article.append(a_id)
                ids = []
                for sent in para:
                    ids.append(len(self.sentences))
                    self.sentences.append(sent)
                    self.sent_para.append(p_id)
                self.para_sents.append(ids)

        tf_by_doc = [Counter(index_terms(self.article_tokens(a), self.stopwords)) for a in range(len(articles))]
        self.terms = sorted({t for c in tf_by_doc for t in c})
        self.term_id = {t: i for i, t in enumerate(self.terms)}
        postings = [[] for _ in self.terms]
        for doc, counts in enumerate(tf_by_doc):
            for t, n in counts.items():
                postings[self.term_id[t]].append((doc, n))
        self.indptr = np.zeros(len(self.terms) + 1, dtype=np.int64)
        self.indptr[1:] = np.cumsum([len(p) for p in postings])
        self.doc_ids = np.array([d for p in postings for d, _ in p], dtype=np.int64)
        self.tf = np.array([n for p in postings for _, n in p], dtype=np.float64)
        self.df = np.diff(self.indptr).astype(np.float64)
        self.idf = np.log(len(articles) / self.df) if len(self.terms) else np.zeros(0)
        self.doc_len = np.array([sum(c.values()) for c in tf_by_doc], dtype=np.int64)
        w = self.tf * np.repeat(self.idf, np.diff(self.indptr))
        self.doc_norm = np.sqrt(np.bincount(self.doc_ids, weights=w * w, minlength=len(articles)))

    @property
    def n_articles(self):
        return len(self.articles)

    def article_tokens(self, a_id):
        art = self.articles[a_id]
        toks = list(tokenize(art.title).tokens)
        for para in art.paragraphs:
            for sent in para:
                toks.extend(sent.tokens)
        return toks

    def paragraph_tokens(self, p_id):
        return [t for s in self.para_sents[p_id] for t in self.sentences[s].tokens]

    def postings(self, term):
        tid = self.term_id.get(term)
        if tid is None:
            return []
        lo, hi = self.indptr[tid], self.indptr[tid + 1]
        return list(zip(self.doc_ids[lo:hi].tolist(), self.tf[lo:hi].astype(int).tolist()))

    def doc_freq(self, term):
        tid = self.term_id.get(term)
        return 0 if tid is None else int(self.df[tid])

    def idf_of(self, term):
        tid = self.term_id.get(term)
        return 0.0 if tid is None else float(self.idf[tid])

    def weight_vector(self, tokens) -> dict:
        """TF x IDF over known index terms; unknown terms drop out."""
        counts = Counter(index_terms(tokens, self.stopwords))
        out = {}
        for t, n in counts.items():
            tid = self.term_id.get(t)
            if tid is not None and self.idf[tid] > 0:
                out[t] = n * float(self.idf[tid])
        return out

    # -- persistence -------------------------------------------------

    def save(self, path, meta=None):
        payload = {
            "meta": meta or {},
            "version": INDEX_VERSION,
            "stopwords": sorted(self.stopwords),
            "articles": [
                {"title": a.title, "paragraphs": [[list(s.tokens) for s in p] for p in a.paragraphs]}
                for a in self.articles
            ],
        }
        blob = zlib.compress(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"), 9)
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IQ", INDEX_VERSION, len(blob)))
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, "rb") as fh:
            if fh.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
                raise DataError(f"{path} is not an index file")
            version, size = struct.unpack("<IQ", fh.read(12))
            if version != INDEX_VERSION:
                raise DataError(f"{path}: unsupported index version {version}")
            blob = fh.read(size)
        try:
            payload = json.loads(zlib.decompress(blob))
        except (zlib.error, ValueError) as exc:
            raise DataError(f"{path}: corrupt index payload") from exc
        articles = [
            Article(a["title"], [[TokenSeq(s) for s in p] for p in a["paragraphs"]]) for a in payload["articles"]
        ]
        index = cls(articles, payload["stopwords"])
        index.meta = payload.get("meta", {})
        return index


def _split_paragraphs(text):
    paras = []
    for block in text.replace("\r\n", "\n").split("\n\n"):
        seq = tokenize(block)
        if len(seq):
            paras.append(split_sentences(seq))
    return paras


def build_index(articles, stopwords=None) -> InvertedIndex:
    """``articles`` is a list of ``(title, text)``; blank lines separate paragraphs."""
    return InvertedIndex([Article(title, _split_paragraphs(text)) for title, text in articles], stopwords)


def load_articles(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                continue
            try:
                out.append((obj["title"], obj["text"]))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
    return out


# ----------------------------------------------------------------------
# topic signatures


def _log_l(p, k, n):
    out = 0.0
    if k > 0:
        out += k * math.log(p)
    if n - k > 0:
        out += (n - k) * math.log1p(-p)
    return out


def llr(k1, n1, k2, n2) -> float:
    """Binomial log-likelihood ratio, -2 log(L(same rate) / L(distinct rates))."""
    if k1 * n2 == k2 * n1:
        return 0.0
    p1, p2 = k1 / n1, k2 / n2
    p = (k1 + k2) / (n1 + n2)
    stat = 2.0 * (_log_l(p1, k1, n1) + _log_l(p2, k2, n2) - _log_l(p, k1, n1) - _log_l(p, k2, n2))
    return max(stat, 0.0)


def topic_signatures(post: TokenSeq, background, cutoff=DEFAULT_CUTOFF, stopwords=None) -> dict:
    """Content words of ``post`` over-represented against ``background``.

    Only terms with a higher rate in the post than in the background
    qualify. Returns ``{term: statistic}`` for statistics at or above
    ``cutoff``.
    """
    if cutoff < 0:
        raise DataError("cutoff must be non-negative")
    background = list(background)
    if not background:
        raise DataError("background corpus is empty")
    stopwords = default_stopwords() if stopwords is None else stopwords
    post_words = [t for t in post if is_word(t)]
    bg = Counter()
    n2 = 0
    for seq in background:
        words = [t for t in seq if is_word(t)]
        bg.update(words)
        n2 += len(words)
    n1 = len(post_words)
    if n1 == 0 or n2 == 0:
        return {}
    out = {}
    for term, k1 in sorted(Counter(post_words).items()):
        if term in stopwords:
            continue
        k2 = bg.get(term, 0)
        if k1 / n1 <= k2 / n2:
            continue
        stat = llr(k1, n1, k2, n2)
        if stat >= cutoff:
            out[term] = stat
    return out


def construct_queries(sentences, signatures) -> list:
    """One query per sentence from its NPs and verbs holding a signature word."""
    sig = set(signatures)
    queries = []
    for i, sent in enumerate(sentences):
        sent = tag(sent)
        units = []
        for ph in chunk_phrases(sent):
            if ph.kind == "NP":
                units.append((ph.start, ph.end))
        units.extend((j, j + 1) for j, p in enumerate(sent.pos) if p == "VERB")
        units = sorted(u for u in units if any(t in sig for t in sent.tokens[u[0] : u[1]]))
        if units:
            toks = tuple(tuple(sent.tokens[a:b]) for a, b in units)
            queries.append(Query(tuple(t for u in toks for t in u), i, toks))
    return queries


# ----------------------------------------------------------------------
# retrieval and reranking


def _rank(scores, cap):
    """Positive scores, descending, ties by ascending id, truncated to ``cap``."""
    pos = [(ref, s) for ref, s in scores if s > 0]
    pos.sort(key=lambda rs: (-rs[1], rs[0]))
    return [ScoredText(ref, float(s)) for ref, s in pos[:cap]]


def _cosine(qvec, qnorm, dvec):
    if not dvec or qnorm == 0:
        return 0.0
    dot = sum(w * dvec[t] for t, w in qvec.items() if t in dvec)
    if dot == 0:
        return 0.0
    return dot / (qnorm * math.sqrt(sum(v * v for v in dvec.values())))


def retrieve_articles(index: InvertedIndex, query: Query, top=5) -> list:
    qvec = index.weight_vector(query.terms)
    if not qvec:
        return []
    term_ids = np.array([index.term_id[t] for t in qvec], dtype=np.int64)
    weights = np.array(list(qvec.values()), dtype=np.float64)
    dots = kernels.accumulate_scores(index.indptr, index.doc_ids, index.tf, term_ids, weights * index.idf[term_ids], index.n_articles)
    qnorm = math.sqrt(float(weights @ weights))
    nz = np.flatnonzero(dots > 0)
    scores = [(int(d), float(dots[d] / (qnorm * index.doc_norm[d]))) for d in nz]
    return _rank(scores, top)


def rerank_paragraphs(index: InvertedIndex, candidates, statement, cap=100) -> list:
    """``candidates`` are paragraph ids; duplicates are scored once."""
    qvec = index.weight_vector(statement)
    qnorm = math.sqrt(sum(v * v for v in qvec.values()))
    seen = sorted(set(candidates))
    return _rank([(p, _cosine(qvec, qnorm, index.weight_vector(index.paragraph_tokens(p)))) for p in seen], cap)


def rerank_sentences(index: InvertedIndex, paragraphs, statement, cap=10) -> list:
    """Sentences of the given paragraph ids, scored like paragraphs."""
    qvec = index.weight_vector(statement)
    qnorm = math.sqrt(sum(v * v for v in qvec.values()))
    sent_ids = sorted({s for p in paragraphs for s in index.para_sents[p]})
    return _rank([(s, _cosine(qvec, qnorm, index.weight_vector(index.sentences[s].tokens))) for s in sent_ids], cap)


@dataclass
class RetrievalResult:
    signatures: dict
    queries: list
    articles: list  # per query: list of ScoredText
    paragraphs: list
    sentences: list
    per_sentence: list = field(default_factory=list)  # evidence sentence ids reachable from each source sentence

    def evidence(self, index):
        return [index.sentences[s.ref] for s in self.sentences]


def retrieve_evidence(index, text, background, cutoff=DEFAULT_CUTOFF, top=5, para_cap=100, sent_cap=10) -> RetrievalResult:
    """Full pass for one query source (a statement, or an argument in oracle mode).

    Reranking scores against the same text the queries came from.
    """
    seq = tokenize(text) if isinstance(text, str) else text
    sents = split_sentences(seq)
    sigs = topic_signatures(seq, background, cutoff, index.stopwords)
    queries = construct_queries(sents, sigs)
    per_query = [retrieve_articles(index, q, top) for q in queries]
    cand = [p for hits in per_query for h in hits for p in index.article_paras[h.ref]]
    paras = rerank_paragraphs(index, cand, seq.tokens, para_cap)
    final = rerank_sentences(index, [p.ref for p in paras], seq.tokens, sent_cap)
    by_sent = [set() for _ in sents]
    for q, hits in zip(queries, per_query):
        by_sent[q.source_sentence_index].update(h.ref for h in hits)
    per_sentence = [
        [s.ref for s in final if index.para_article[index.sent_para[s.ref]] in arts] for arts in by_sent
    ]
    return RetrievalResult(sigs, queries, per_query, paras, final, per_sentence)


def retrieval_stats(results) -> dict:
    """Per-statement averages of signatures, queries, distinct articles and evidence sentences."""
    results = list(results)
    keys = ("avg_topic_signatures", "avg_queries", "avg_articles", "avg_sentences")
    if not results:
        return dict.fromkeys(keys, 0.0)
    n = len(results)
    return {
        "avg_topic_signatures": sum(len(r.signatures) for r in results) / n,
        "avg_queries": sum(len(r.queries) for r in results) / n,
        "avg_articles": sum(len({h.ref for hits in r.articles for h in hits}) for r in results) / n,
        "avg_sentences": sum(len(r.sentences) for r in results) / n,
    }
