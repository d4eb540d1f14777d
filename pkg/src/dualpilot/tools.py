"""Planner tools: BM25 / hybrid retrieval, cross-session aggregation, extractive MeetSum, mock web search.

Everything here is offline and deterministic. Rankings are total orders:
score descending, then source id ascending (cross-session results break
score ties by recency first).
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyIndex, EmptyInput, FixtureMissing
from .router import HashedNgramExtractor
from .text import tokenize, truncate_words

BM25_K1 = 1.2
BM25_B = 0.75
SNIPPET_WORDS = 60

_STOP = frozenset(
    "a an and are as at be by can did do does for from hello how i in is it jiaojiao me of on "
    "or our please that the then this to us was we what when which who why will with you".split()
)


@dataclass(frozen=True)
class Snippet:
    source_id: str
    text: str
    score: float
    timestamp_s: float | None = None

    def __post_init__(self):
        if len(self.text.split()) > SNIPPET_WORDS:
            object.__setattr__(self, "text", truncate_words(self.text, SNIPPET_WORDS))
        if not math.isfinite(self.score):
            raise ValueError("snippet score must be finite")


class RetrievalIndex:
    """Build-once lexical + dense index over ``(doc_id, text[, timestamp_s])`` records."""

    def __init__(self, docs, extractor: HashedNgramExtractor | None = None):
        self.extractor = extractor or HashedNgramExtractor()
        self.doc_ids, self.texts, self.timestamps, self.tokens = [], [], [], []
        for d in docs:
            if isinstance(d, dict):
                doc_id, text, ts = d["doc_id"], d["text"], d.get("timestamp_s")
            else:
                doc_id, text, ts = (tuple(d) + (None,))[:3]
            self.doc_ids.append(str(doc_id))
            self.texts.append(text)
            self.timestamps.append(None if ts is None else float(ts))
            self.tokens.append(tokenize(text))
        self.lengths = np.array([len(t) for t in self.tokens], dtype=float)
        self.avg_len = float(self.lengths.mean()) if len(self.lengths) else 0.0
        self.tf = [Counter(t) for t in self.tokens]
        self.df = Counter()
        self.postings = {}
        for i, counts in enumerate(self.tf):
            for term, n in counts.items():
                self.df[term] += 1
                self.postings.setdefault(term, []).append((i, n))
        if self.doc_ids:
            self.embeddings = np.stack([self.extractor(t) for t in self.texts])
        else:
            self.embeddings = np.zeros((0, self.extractor.dim))
        # rank position of each doc id, for vectorised tie-breaking
        self._id_rank = np.argsort(np.argsort(np.array(self.doc_ids, dtype=object)))

    def __len__(self):
        return len(self.doc_ids)

    def idf(self, term):
        n = len(self.doc_ids)
        df = self.df.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def bm25_scores(self, query_tokens) -> np.ndarray:
        scores = np.zeros(len(self.doc_ids))
        if not len(self.doc_ids):
            return scores
        norm = BM25_K1 * (1 - BM25_B + BM25_B * self.lengths / max(self.avg_len, 1e-12))
        for term in query_tokens:
            posting = self.postings.get(term)
            if not posting:
                continue
            idx = np.fromiter((p[0] for p in posting), dtype=int, count=len(posting))
            tf = np.fromiter((p[1] for p in posting), dtype=float, count=len(posting))
            scores[idx] += self.idf(term) * tf * (BM25_K1 + 1) / (tf + norm[idx])
        return scores

    def top_k(self, scores, k) -> list:
        order = np.lexsort((self._id_rank, -scores))[:k]
        return [Snippet(self.doc_ids[i], self.texts[i], float(scores[i]), self.timestamps[i])
                for i in order]

    @classmethod
    def from_jsonl(cls, path, extractor=None):
        return cls(load_jsonl_docs(path), extractor)


def load_jsonl_docs(path):
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                docs.append(json.loads(line))
    return docs


def meeting_index(transcript, session_offset_s: float = 0.0, extractor=None) -> RetrievalIndex:
    """Index one meeting's non-injected turns as ``Meeting-<id>#<n>`` documents."""
    docs = [
        {"doc_id": f"Meeting-{transcript.meeting_id}#{i:04d}", "text": t.text,
         "timestamp_s": session_offset_s + t.start_s}
        for i, t in enumerate(transcript.turns) if not t.injected
    ]
    return RetrievalIndex(docs, extractor)


def _check(index, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(index):
        raise EmptyIndex("index has no documents")


def bm25_search(index: RetrievalIndex, query_tokens, k: int = 6) -> list:
    _check(index, k)
    if isinstance(query_tokens, str):
        query_tokens = tokenize(query_tokens)
    return index.top_k(index.bm25_scores(query_tokens), k)


def minmax(x):
    x = np.asarray(x, dtype=float)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def hybrid_scores(index: RetrievalIndex, query: str, mix: float = 0.5) -> np.ndarray:
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    lexical = minmax(index.bm25_scores(tokenize(query)))
    dense = index.embeddings @ index.extractor(query)
    return mix * lexical + (1.0 - mix) * dense


def hybrid_search(index: RetrievalIndex, query: str, k: int = 6, mix: float = 0.5) -> list:
    """``mix * minmax(BM25) + (1 - mix) * cosine`` over the hashed embeddings."""
    _check(index, k)
    return index.top_k(hybrid_scores(index, query, mix), k)


@dataclass
class CrossSessionResult:
    snippets: list
    hit_rate: float
    contributing: list = field(default_factory=list)


def cross_session_aggregate(indexes, entity_tokens, window: int = 6) -> CrossSessionResult:
    """Rank turns from several meetings by TF-IDF cosine to an entity.

    ``indexes`` maps meeting id to its :class:`RetrievalIndex`; ``window``
    caps the number of returned snippets. Equal scores go to the later
    timestamp first. The hit rate is the fraction of queried meetings with
    at least one returned snippet.
    """
    if len(indexes) < 2:
        raise ValueError("cross-session aggregation needs at least two meetings")
    if isinstance(entity_tokens, str):
        entity_tokens = tokenize(entity_tokens)
    entity = Counter(entity_tokens)
    n_docs = sum(len(ix) for ix in indexes.values())
    df = Counter()
    for ix in indexes.values():
        df.update({t: c for t, c in ix.df.items() if t in entity})
    idf = {t: math.log((1 + n_docs) / (1 + df.get(t, 0))) + 1.0 for t in entity}
    q = np.array([entity[t] * idf[t] for t in entity])
    qn = np.linalg.norm(q)
    hits = []
    for mid, ix in indexes.items():
        for i, counts in enumerate(ix.tf):
            if not any(t in counts for t in entity):
                continue
            dot = sum(entity[t] * idf[t] * counts.get(t, 0) * idf[t] for t in entity)
            # document norm over all its terms (idf of non-entity terms from this index)
            dn = math.sqrt(sum((c * (math.log((1 + n_docs) / (1 + ix.df[t])) + 1.0)) ** 2
                               for t, c in counts.items()))
            sim = dot / (qn * dn) if qn > 0 and dn > 0 else 0.0
            if sim > 0:
                ts = ix.timestamps[i]
                hits.append((mid, Snippet(ix.doc_ids[i], ix.texts[i], sim, ts)))
    hits.sort(key=lambda h: (-h[1].score, -(h[1].timestamp_s or 0.0), h[1].source_id))
    top = hits[:window]
    contributing = sorted({mid for mid, _ in top})
    return CrossSessionResult([s for _, s in top], len(contributing) / len(indexes), contributing)


@dataclass(frozen=True)
class SummarizerConfig:
    epsilon: float = 0.01
    max_sentences: int = 5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class Summary:
    sentences: list
    indices: list
    gains: list
    coverage: float

    @property
    def text(self):
        return " ".join(self.sentences)


_SENT = re.compile(r"(?<=[.!?])\s+")


def split_sentences(texts) -> list:
    out = []
    for t in texts:
        out += [s.strip() for s in _SENT.split(t) if s.strip()]
    return out


def coverage_weights(sentences):
    """Per-term TF-IDF mass of the whole segment (sentences act as documents)."""
    toks = [set(tokenize(s)) - _STOP for s in sentences]
    tf = Counter(t for s in sentences for t in tokenize(s) if t not in _STOP)
    n = len(sentences)
    df = Counter(t for ts in toks for t in ts)
    mass = {t: c * (math.log((1 + n) / (1 + df[t])) + 1.0) for t, c in tf.items()}
    return toks, mass


def meet_sum(turn_texts, cfg: SummarizerConfig | None = None) -> Summary:
    """Greedy extractive summary maximising covered TF-IDF mass.

    Stops when the best marginal gain (as a fraction of total mass) drops
    below ``epsilon`` or ``max_sentences`` are selected; the first sentence
    is always taken.
    """
    cfg = cfg or SummarizerConfig()
    sentences = split_sentences(turn_texts)
    if not sentences:
        raise EmptyInput("nothing to summarise")
    toks, mass = coverage_weights(sentences)
    total = sum(mass.values()) or 1.0
    covered = set()
    chosen, gains = [], []
    while len(chosen) < min(cfg.max_sentences, len(sentences)):
        best, best_gain = None, -1.0
        for i, ts in enumerate(toks):
            if i in chosen:
                continue
            g = sum(mass[t] for t in ts - covered) / total
            if g > best_gain + 1e-12:  # near-ties go to the earlier sentence
                best, best_gain = i, g
        if chosen and best_gain < cfg.epsilon:
            break
        chosen.append(best)
        gains.append(best_gain)
        covered |= toks[best]
    idx = sorted(chosen)
    return Summary([sentences[i] for i in idx], idx, gains, sum(mass[t] for t in covered) / total)


def load_fixtures(path):
    path = Path(path)
    if not path.exists():
        raise FixtureMissing(f"web fixture file {path} not found")
    return load_jsonl_docs(path)


def web_search_mock(fixtures, query: str, k: int = 3) -> list:
    """Keyword overlap search over local fixtures; never touches the network."""
    if fixtures is None:
        raise FixtureMissing("no web fixtures loaded")
    q = set(tokenize(query)) - _STOP
    if not q:
        return []
    scored = []
    for fx in fixtures:
        overlap = len(q & set(tokenize(fx["text"])))
        if overlap:
            scored.append(Snippet(str(fx["doc_id"]), fx["text"], overlap / len(q), fx.get("timestamp_s")))
    scored.sort(key=lambda s: (-s.score, s.source_id))
    return scored[:k]


def entity_tokens(query: str) -> list:
    """Identifier-like tokens (letters and digits mixed), e.g. project codenames."""
    return [t for t in tokenize(query) if any(c.isalpha() for c in t) and any(c.isdigit() for c in t)]
