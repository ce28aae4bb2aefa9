"""Corpus ingestion: load, clean, deduplicate, redact, and chunk.

Pipeline order for documents: normalize -> entropy gate -> PII redaction ->
near-duplicate removal -> chunking. FAQ pairs are normalized and redacted but
never chunked. All downstream token accounting (chunk windows, BM25, Jaccard)
uses the same tokenizer defined here.

Policy notes:
- "Diacritic normalization" means Unicode NFC composition. Vietnamese meaning
  depends on diacritics, so they are preserved, never stripped.
- Dedup is greedy first-wins in input order.
- The final chunk window is clamped to [L - size, L) so no trailing text is
  lost.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DOC_SOURCES = ("faq_export", "drive_doc", "web_page")

FAQ_ID_RE = re.compile(r"^FAQ-[0-9]{4}$")
CHUNK_ID_RE = re.compile(r"^DOC-[0-9]{4}$")

_WS_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# Redaction patterns, applied in this order. Email and national-ID run before
# phone so the greedy phone pattern cannot eat digits out of longer matches.
DEFAULT_PII_PATTERNS: dict[str, str] = {
    "email": r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}",
    "id": r"\b[0-9]{12}\b",
    "phone": r"(\+84|0)[0-9]{9,10}",
}
PII_REPLACEMENTS = {"email": "[EMAIL]", "id": "[ID]", "phone": "[PHONE]"}


class CorpusError(ValueError):
    """Raised when an input record violates the corpus schema."""


@dataclass
class RawDocument:
    doc_id: str
    title: str
    body: str
    source: str
    year: int

    def __post_init__(self) -> None:
        if self.source not in DOC_SOURCES:
            raise CorpusError(f"{self.doc_id}: unknown source {self.source!r}")


@dataclass
class FaqPair:
    faq_id: str
    question: str
    answer: str
    embedding: object | None = None

    def __post_init__(self) -> None:
        if not FAQ_ID_RE.match(self.faq_id):
            raise CorpusError(f"bad faq_id {self.faq_id!r}, expected FAQ-NNNN")
        if not self.question.strip() or not self.answer.strip():
            raise CorpusError(f"{self.faq_id}: question and answer must be non-empty")


@dataclass
class Chunk:
    chunk_id: str
    parent_doc: str
    token_start: int
    token_len: int
    text: str
    embedding: object | None = None


@dataclass
class CleaningReport:
    docs_in: int = 0
    docs_retained: int = 0
    docs_deduped: int = 0
    entropy_rejects: int = 0
    pii_redactions: dict[str, int] = field(default_factory=dict)
    chunks_out: int = 0
    faqs_in: int = 0
    faqs_out: int = 0

    def to_dict(self) -> dict:
        return {
            "docs_in": self.docs_in,
            "docs_retained": self.docs_retained,
            "docs_deduped": self.docs_deduped,
            "entropy_rejects": self.entropy_rejects,
            "pii_redactions": dict(self.pii_redactions),
            "chunks_out": self.chunks_out,
            "faqs_in": self.faqs_in,
            "faqs_out": self.faqs_out,
        }


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    reason: str | None
    entropy: float


def normalize_text(raw: str) -> str:
    """Lowercase, NFC-compose, and collapse whitespace. Total and idempotent."""
    s = unicodedata.normalize("NFC", raw)
    s = s.lower()
    # Lowercasing can produce combining sequences (e.g. dotted capital I);
    # re-compose so output is always NFC.
    s = unicodedata.normalize("NFC", s)
    return _WS_RE.sub(" ", s).strip()


def tokenize(t: str) -> list[str]:
    """Split on whitespace, with each punctuation character as its own token."""
    return _TOKEN_RE.findall(t)


def token_set(t: str) -> frozenset[str]:
    return frozenset(tokenize(normalize_text(t)))


def redact_pii(
    t: str, patterns: dict[str, str] | None = None
) -> tuple[str, dict[str, int]]:
    """Replace phone/email/national-ID matches with placeholder tags.

    Returns the redacted text and a per-category match count. Idempotent:
    placeholder tags contain no redactable substrings.
    """
    pats = patterns if patterns is not None else DEFAULT_PII_PATTERNS
    counts: dict[str, int] = {}
    for category, pattern in pats.items():
        replacement = PII_REPLACEMENTS.get(category, f"[{category.upper()}]")
        t, n = re.subn(pattern, replacement, t)
        counts[category] = n
    return t, counts


def shannon_entropy(t: str) -> float:
    """Shannon entropy in bits over the character frequency distribution."""
    if not t:
        return 0.0
    counts = Counter(t)
    total = len(t)
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


def entropy_gate(t: str, low: float = 1.5, high: float = 6.0) -> GateResult:
    """Accept text whose character entropy falls inside [low, high] bits.

    The band was chosen empirically for Vietnamese/English prose; repetitive
    filler sits below it and random byte noise above it.
    """
    if not t:
        return GateResult(False, "empty", 0.0)
    h = shannon_entropy(t)
    if h < low:
        return GateResult(False, "low_entropy", h)
    if h > high:
        return GateResult(False, "high_entropy", h)
    return GateResult(True, None, h)


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def jaccard_dedup(
    docs: Sequence[RawDocument], threshold: float = 0.9
) -> tuple[list[RawDocument], list[RawDocument]]:
    """Greedy first-wins dedup over normalized token sets.

    A document is removed iff its Jaccard similarity with any already-retained
    document is >= threshold.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    retained: list[RawDocument] = []
    removed: list[RawDocument] = []
    kept_sets: list[frozenset[str]] = []
    for doc in docs:
        toks = token_set(doc.body)
        if any(jaccard(toks, seen) >= threshold for seen in kept_sets):
            removed.append(doc)
        else:
            retained.append(doc)
            kept_sets.append(toks)
    return retained, removed


def chunk_spans(length: int, size: int = 500, stride: int = 100) -> list[tuple[int, int]]:
    """Window spans [(start, len), ...] covering a document of `length` tokens.

    L <= size gives one span [0, L). Otherwise windows start at every multiple
    of stride up to L - size; a final clamped span [L - size, L) is appended
    when (L - size) is not a multiple of stride.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    if not 0 < stride <= size:
        raise ValueError("stride must satisfy 0 < stride <= size")
    if length <= 0:
        return []
    if length <= size:
        return [(0, length)]
    last_full = ((length - size) // stride) * stride
    spans = [(s, size) for s in range(0, last_full + 1, stride)]
    if (length - size) % stride != 0:
        spans.append((length - size, size))
    return spans


def chunk_document(
    doc: RawDocument,
    size: int = 500,
    stride: int = 100,
    id_start: int = 0,
) -> list[Chunk]:
    """Split a document into overlapping token windows.

    Chunk text is the original character span of its token window, so number
    formats like 22,5 survive intact. Chunk ids are DOC-NNNN, numbered
    sequentially from `id_start` so a corpus run can keep ids globally unique.
    """
    normalized = normalize_text(doc.body)
    matches = list(_TOKEN_RE.finditer(normalized))
    chunks = []
    for i, (start, length) in enumerate(chunk_spans(len(matches), size, stride)):
        seq = id_start + i
        if seq > 9999:
            raise ValueError("chunk id space exhausted (max DOC-9999)")
        chunks.append(
            Chunk(
                chunk_id=f"DOC-{seq:04d}",
                parent_doc=doc.doc_id,
                token_start=start,
                token_len=length,
                text=normalized[matches[start].start() : matches[start + length - 1].end()],
            )
        )
    return chunks


def load_corpus(path: str | Path) -> list[RawDocument]:
    """Read document records from a JSON Lines file."""
    docs = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        try:
            doc = RawDocument(
                doc_id=str(record["doc_id"]),
                title=str(record["title"]),
                body=str(record["body"]),
                source=str(record["source"]),
                year=int(record["year"]),
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc}") from None
        if doc.doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        docs.append(doc)
    return docs


def load_faqs(path: str | Path) -> list[FaqPair]:
    faqs = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        try:
            faq = FaqPair(
                faq_id=str(record["faq_id"]),
                question=str(record["question"]),
                answer=str(record["answer"]),
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc}") from None
        if faq.faq_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate faq_id {faq.faq_id!r}")
        seen.add(faq.faq_id)
        faqs.append(faq)
    return faqs


def _iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def run_ingest(
    documents: Sequence[RawDocument],
    faqs: Sequence[FaqPair],
    chunk_size: int = 500,
    stride: int = 100,
    dedup_threshold: float = 0.9,
    entropy_low: float = 1.5,
    entropy_high: float = 6.0,
) -> tuple[list[FaqPair], list[Chunk], CleaningReport]:
    """Run the full cleaning pipeline over a corpus batch."""
    report = CleaningReport(docs_in=len(documents), faqs_in=len(faqs))
    pii_totals: Counter[str] = Counter()

    cleaned_docs: list[RawDocument] = []
    for doc in documents:
        body = normalize_text(doc.body)
        gate = entropy_gate(body, low=entropy_low, high=entropy_high)
        if not gate.accepted:
            report.entropy_rejects += 1
            continue
        body, counts = redact_pii(body)
        pii_totals.update(counts)
        cleaned_docs.append(
            RawDocument(doc.doc_id, doc.title, body, doc.source, doc.year)
        )

    retained, removed = jaccard_dedup(cleaned_docs, threshold=dedup_threshold)
    report.docs_deduped = len(removed)
    report.docs_retained = len(retained)

    chunks: list[Chunk] = []
    for doc in retained:
        chunks.extend(
            chunk_document(doc, size=chunk_size, stride=stride, id_start=len(chunks))
        )
    report.chunks_out = len(chunks)

    cleaned_faqs: list[FaqPair] = []
    for faq in faqs:
        question = normalize_text(faq.question)
        answer = normalize_text(faq.answer)
        question, q_counts = redact_pii(question)
        answer, a_counts = redact_pii(answer)
        pii_totals.update(q_counts)
        pii_totals.update(a_counts)
        if not question or not answer:
            continue
        cleaned_faqs.append(FaqPair(faq.faq_id, question, answer))
    report.faqs_out = len(cleaned_faqs)
    report.pii_redactions = dict(pii_totals)

    return cleaned_faqs, chunks, report
