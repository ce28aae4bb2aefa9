"""Hybrid candidate generation and re-ranking down to the top context passages.

Flow: a query first tries an exact-ish FAQ match (cosine >= 0.9). Failing
that, candidates are the union of dense top-k and BM25 top-k, merged by unit
id, then scored by a relevance judge (LLM-backed online, token-overlap
offline) and cut to the top 2.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

from .index import IndexSet, bm25_topk, dense_topk
from .ingest import FaqPair, token_set, jaccard

_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)")


class ScoreParseError(ValueError):
    """The scorer reply contained no numeric literal."""


@dataclass
class Candidate:
    id: str
    text: str
    origin: frozenset[str]  # subset of {"dense", "keyword"}
    dense_score: float | None = None
    keyword_score: float | None = None


@dataclass
class RankedPassage:
    id: str
    text: str
    relevance: float  # in [0, 1]
    rank: int  # 1-based, contiguous


@dataclass
class RerankOutcome:
    passages: list[RankedPassage]
    degraded: bool = False  # True when the scorer failed on every candidate


class RerankScorer(Protocol):
    def score(self, query: str, passage: str) -> float: ...


class OverlapScorer:
    """Jaccard token overlap between query and passage; offline/degraded mode.

    Punctuation-only tokens carry no relevance signal and are excluded from
    both sets.
    """

    @staticmethod
    def _content_tokens(text: str) -> frozenset[str]:
        return frozenset(
            t for t in token_set(text) if any(ch.isalnum() for ch in t)
        )

    def score(self, query: str, passage: str) -> float:
        q, p = self._content_tokens(query), self._content_tokens(passage)
        if not q or not p:
            return 0.0
        return jaccard(q, p)


RERANK_SYSTEM = "You are a relevance judge. Reply with only a number between 0 and 1."


class LlmRerankScorer:
    """Zero-shot cross-encoder relevance via an LLM chat provider.

    Scoring runs at temperature 0; the reply is parsed with
    parse_score_reply, so anything without a leading number raises and the
    caller falls back to retrieval scores for that candidate.
    """

    def __init__(self, provider, max_tokens: int = 8) -> None:
        # Late import keeps generate -> retrieve the only dependency direction.
        from .generate import GenerationParams

        self._provider = provider
        self._params = GenerationParams(temperature=0.0, top_p=1.0, max_tokens=max_tokens)

    def score(self, query: str, passage: str) -> float:
        messages = [
            {"role": "system", "content": RERANK_SYSTEM},
            {"role": "user", "content": f"{query}\n---\n{passage}"},
        ]
        stream = self._provider.chat(messages, self._params)
        reply = "".join(stream)
        return parse_score_reply(reply)


def parse_score_reply(reply: str) -> float:
    """First decimal literal in the reply, clamped to [0, 1]."""
    m = _NUMBER_RE.search(reply)
    if not m:
        raise ScoreParseError(f"no numeric literal in scorer reply: {reply!r}")
    return min(1.0, max(0.0, float(m.group())))


def _fallback_relevance(cand: Candidate, max_keyword: float) -> float:
    dense = min(1.0, max(0.0, cand.dense_score)) if cand.dense_score is not None else 0.0
    keyword = 0.0
    if cand.keyword_score is not None and max_keyword > 0.0:
        keyword = cand.keyword_score / max_keyword
    return max(dense, keyword)


def rerank(
    query: str,
    pool: Sequence[Candidate],
    scorer: RerankScorer,
    keep: int = 2,
    max_concurrency: int = 8,
) -> RerankOutcome:
    """Score every candidate and keep the top `keep` passages.

    Per-candidate scorer failures fall back to max(clamped dense score,
    keyword score normalized by the pool maximum). If the scorer fails on the
    entire pool the outcome is flagged degraded and uses fallback scores
    throughout. Output is deterministic for deterministic scorers regardless
    of pool order or concurrency.
    """
    if not pool:
        raise ValueError("rerank requires a non-empty candidate pool")
    max_keyword = max(
        (c.keyword_score for c in pool if c.keyword_score is not None), default=0.0
    )

    def _score_one(cand: Candidate) -> tuple[float, bool]:
        try:
            return min(1.0, max(0.0, scorer.score(query, cand.text))), True
        except Exception:
            return _fallback_relevance(cand, max_keyword), False

    if max_concurrency > 1 and len(pool) > 1:
        with ThreadPoolExecutor(max_workers=min(max_concurrency, len(pool))) as px:
            scored = list(px.map(_score_one, pool))
    else:
        scored = [_score_one(c) for c in pool]

    degraded = not any(ok for _, ok in scored)
    ranked = sorted(
        zip(pool, (s for s, _ in scored)), key=lambda t: (-t[1], t[0].id)
    )
    passages = [
        RankedPassage(id=c.id, text=c.text, relevance=rel, rank=i + 1)
        for i, (c, rel) in enumerate(ranked[: max(0, keep)])
    ]
    return RerankOutcome(passages=passages, degraded=degraded)


class Retriever:
    """Query-side access to an IndexSet: direct FAQ match plus hybrid search."""

    def __init__(self, index_set: IndexSet, embedder) -> None:
        self.index_set = index_set
        self.embedder = embedder

    def faq_direct_match(self, query: str, threshold: float = 0.9) -> FaqPair | None:
        """Top FAQ by cosine, returned only when its score >= threshold."""
        qv = self.embedder.embed(query)
        hits = dense_topk(self.index_set.dense, qv, k=1, prefix="FAQ-")
        if not hits:
            return None
        unit_id, score = hits[0]
        if score < threshold:
            return None
        record = self.index_set.units[unit_id]
        return FaqPair(faq_id=unit_id, question=record.question or "", answer=record.answer or "")

    def dense_candidates(self, query: str, k: int = 15) -> list[Candidate]:
        qv = self.embedder.embed(query)
        return [
            Candidate(
                id=uid,
                text=self.index_set.unit_text(uid),
                origin=frozenset({"dense"}),
                dense_score=score,
            )
            for uid, score in dense_topk(self.index_set.dense, qv, k=k)
        ]

    def keyword_candidates(self, query: str, k: int = 15) -> list[Candidate]:
        return [
            Candidate(
                id=uid,
                text=self.index_set.unit_text(uid),
                origin=frozenset({"keyword"}),
                keyword_score=score,
            )
            for uid, score in bm25_topk(self.index_set.sparse, query, k=k)
        ]

    def hybrid(self, query: str, k_dense: int = 15, k_keyword: int = 15) -> list[Candidate]:
        """Union of dense and keyword top-k, merged by id.

        Pool order: dense score desc (absent last), keyword score desc, id asc.
        """
        merged: dict[str, Candidate] = {}
        for cand in self.dense_candidates(query, k=k_dense):
            merged[cand.id] = cand
        for cand in self.keyword_candidates(query, k=k_keyword):
            existing = merged.get(cand.id)
            if existing is None:
                merged[cand.id] = cand
            else:
                merged[cand.id] = Candidate(
                    id=cand.id,
                    text=cand.text,
                    origin=existing.origin | cand.origin,
                    dense_score=existing.dense_score,
                    keyword_score=cand.keyword_score,
                )
        inf = float("inf")
        return sorted(
            merged.values(),
            key=lambda c: (
                -c.dense_score if c.dense_score is not None else inf,
                -c.keyword_score if c.keyword_score is not None else inf,
                c.id,
            ),
        )
