"""Dense vector index (flat inner-product scan) and BM25 inverted index.

Both indexes are immutable after build. Vectors are unit-normalized 768-dim
float32 rows; similarity is the dot product, which equals cosine on unit
vectors. Scoring runs in float64 so rankings are reproducible against a
brute-force oracle. Tie-breaking everywhere: descending score, then ascending
unit id.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .ingest import Chunk, FaqPair, normalize_text, tokenize

DIM = 768
SNAPSHOT_VERSION = 1


class IndexError_(ValueError):
    pass


class SnapshotError(RuntimeError):
    """Snapshot directory is missing, corrupt, or from another format version."""


class EmbeddingError(RuntimeError):
    pass


class EmbeddingProvider(Protocol):
    name: str

    def embed(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Deterministic feature-hash embeddings for offline use and tests.

    Each token is hashed to one of 768 buckets, with a +/-1 sign drawn from a
    second hash; token contributions are summed and the vector is
    unit-normalized. Token-overlap similarity is preserved well enough for
    oracle tests, with zero network dependencies.
    """

    name = "feature-hash-768/v1"

    def __init__(self) -> None:
        self._token_cache: dict[str, tuple[int, float]] = {}

    def _slot(self, token: str) -> tuple[int, float]:
        cached = self._token_cache.get(token)
        if cached is None:
            raw = token.encode("utf-8")
            bucket = int.from_bytes(hashlib.sha1(raw).digest()[:4], "little") % DIM
            sign_bit = hashlib.sha1(b"sign\x00" + raw).digest()[0] & 1
            cached = (bucket, 1.0 if sign_bit else -1.0)
            self._token_cache[token] = cached
        return cached

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(DIM, dtype=np.float64)
        for token in tokenize(normalize_text(text)):
            bucket, sign = self._slot(token)
            v[bucket] += sign
        norm = np.linalg.norm(v)
        if norm == 0.0:
            v[0] = 1.0
            norm = 1.0
        return (v / norm).astype(np.float32)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, DIM), dtype=np.float32)
        return np.stack([self.embed(t) for t in texts])


class HttpEmbeddingProvider:
    """Embeddings over an OpenAI-style /embeddings HTTP endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        client=None,
    ) -> None:
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.name = f"http:{model}"
        headers = {}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, DIM), dtype=np.float32)
        resp = self._client.post(
            f"{self.base_url}/embeddings",
            json={"model": self.model, "input": list(texts)},
        )
        if resp.status_code != 200:
            raise EmbeddingError(f"embedding endpoint returned {resp.status_code}")
        data = resp.json().get("data", [])
        if len(data) != len(texts):
            raise EmbeddingError("embedding endpoint returned wrong item count")
        out = np.array([row["embedding"] for row in data], dtype=np.float64)
        if out.shape[1] != DIM:
            raise EmbeddingError(f"expected {DIM}-dim vectors, got {out.shape[1]}")
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return (out / norms).astype(np.float32)


@dataclass
class DenseIndex:
    ids: list[str]
    matrix: np.ndarray  # (N, 768) float32, unit rows
    _ids_arr: np.ndarray = field(init=False, repr=False)
    _mat64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.ids), DIM):
            raise IndexError_(
                f"matrix shape {self.matrix.shape} does not match {len(self.ids)} ids"
            )
        self._ids_arr = np.array(self.ids, dtype=object)
        self._mat64 = self.matrix.astype(np.float64)

    def __len__(self) -> int:
        return len(self.ids)


def build_dense(
    units: Sequence[tuple[str, str]], provider: EmbeddingProvider, batch_size: int = 64
) -> DenseIndex:
    """Embed (id, text) units into a flat index. Aborts on provider failure."""
    ids = [uid for uid, _ in units]
    if len(set(ids)) != len(ids):
        dupes = sorted(uid for uid, n in Counter(ids).items() if n > 1)
        raise IndexError_(f"duplicate unit ids: {dupes[:5]}")
    rows = []
    for start in range(0, len(units), batch_size):
        batch = [text for _, text in units[start : start + batch_size]]
        try:
            rows.append(provider.embed_batch(batch))
        except Exception as exc:
            raise EmbeddingError(
                f"embedding aborted after {start}/{len(units)} units: {exc}"
            ) from exc
    matrix = (
        np.concatenate(rows) if rows else np.zeros((0, DIM), dtype=np.float32)
    )
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if len(matrix) and not np.allclose(norms, 1.0, atol=1e-6):
        raise IndexError_("provider returned non-unit vectors")
    return DenseIndex(ids=ids, matrix=matrix.astype(np.float32))


def dense_topk(
    ix: DenseIndex, q: np.ndarray, k: int, prefix: str | None = None
) -> list[tuple[str, float]]:
    """Exhaustive cosine top-k: min(k, N) results, score desc then id asc."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ix) == 0:
        return []
    scores = ix._mat64 @ np.asarray(q, dtype=np.float64)
    ids = ix._ids_arr
    if prefix is not None:
        mask = np.array([u.startswith(prefix) for u in ix.ids])
        scores, ids = scores[mask], ids[mask]
        if len(ids) == 0:
            return []
    n = len(ids)
    if k < n:
        # Keep every row tied with the k-th score so id tie-breaking stays exact.
        kth = np.partition(scores, n - k)[n - k]
        keep = scores >= kth
        scores, ids = scores[keep], ids[keep]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(str(ids[i]), float(scores[i])) for i in order[: min(k, n)]]


@dataclass
class SparseIndex:
    postings: dict[str, dict[str, int]]  # term -> {unit id: term frequency}
    doc_len: dict[str, int]
    avg_len: float
    k1: float = 1.2
    b: float = 0.75

    @property
    def n_units(self) -> int:
        return len(self.doc_len)


def build_sparse(
    units: Sequence[tuple[str, str]], k1: float = 1.2, b: float = 0.75
) -> SparseIndex:
    postings: dict[str, dict[str, int]] = {}
    doc_len: dict[str, int] = {}
    for uid, text in units:
        if uid in doc_len:
            raise IndexError_(f"duplicate unit id: {uid}")
        tokens = tokenize(normalize_text(text))
        doc_len[uid] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, {})[uid] = tf
    avg_len = sum(doc_len.values()) / len(doc_len) if doc_len else 0.0
    return SparseIndex(postings=postings, doc_len=doc_len, avg_len=avg_len, k1=k1, b=b)


def _idf(ix: SparseIndex, term: str) -> float:
    n_t = len(ix.postings.get(term, {}))
    return math.log(1.0 + (ix.n_units - n_t + 0.5) / (n_t + 0.5))


def bm25_score(ix: SparseIndex, q_terms: Sequence[str], unit: str) -> float:
    """Okapi BM25 with idf = ln(1 + (N - n_t + 0.5)/(n_t + 0.5)).

    Query terms are summed as given (repeats count twice); terms absent from
    the unit contribute 0.
    """
    if unit not in ix.doc_len:
        raise IndexError_(f"unknown unit {unit!r}")
    length = ix.doc_len[unit]
    norm = ix.k1 * (1.0 - ix.b + ix.b * length / ix.avg_len) if ix.avg_len else ix.k1
    score = 0.0
    for term in q_terms:
        tf = ix.postings.get(term, {}).get(unit, 0)
        if tf == 0:
            continue
        score += _idf(ix, term) * (tf * (ix.k1 + 1.0)) / (tf + norm)
    return score


def bm25_topk(ix: SparseIndex, query: str, k: int = 15) -> list[tuple[str, float]]:
    """Top-k units by BM25, positive scores only, score desc then id asc."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q_terms = tokenize(normalize_text(query))
    scores: dict[str, float] = {}
    for term in q_terms:
        plist = ix.postings.get(term)
        if not plist:
            continue
        idf = _idf(ix, term)
        for uid, tf in plist.items():
            length = ix.doc_len[uid]
            norm = ix.k1 * (1.0 - ix.b + ix.b * length / ix.avg_len)
            scores[uid] = scores.get(uid, 0.0) + idf * (tf * (ix.k1 + 1.0)) / (tf + norm)
    hits = [(uid, s) for uid, s in scores.items() if s > 0.0]
    hits.sort(key=lambda t: (-t[1], t[0]))
    return hits[:k]


@dataclass
class UnitRecord:
    """One retrievable unit: a FAQ pair or a document chunk."""

    unit_id: str
    kind: str  # "faq" | "chunk"
    text: str
    question: str | None = None
    answer: str | None = None
    parent_doc: str | None = None


@dataclass
class IndexSet:
    """Dense + sparse indexes plus the unit store they were built from."""

    dense: DenseIndex
    sparse: SparseIndex
    units: dict[str, UnitRecord]
    embedder_name: str

    def unit_text(self, unit_id: str) -> str:
        return self.units[unit_id].text


def units_from_corpus(
    faqs: Sequence[FaqPair], chunks: Sequence[Chunk]
) -> list[UnitRecord]:
    records = []
    for faq in faqs:
        records.append(
            UnitRecord(
                unit_id=faq.faq_id,
                kind="faq",
                text=f"{faq.question}\n{faq.answer}",
                question=faq.question,
                answer=faq.answer,
            )
        )
    for chunk in chunks:
        records.append(
            UnitRecord(
                unit_id=chunk.chunk_id,
                kind="chunk",
                text=chunk.text,
                parent_doc=chunk.parent_doc,
            )
        )
    return records


def build_index_set(
    faqs: Sequence[FaqPair],
    chunks: Sequence[Chunk],
    provider: EmbeddingProvider,
    k1: float = 1.2,
    b: float = 0.75,
) -> IndexSet:
    """Build both indexes over the same unit space.

    Dense vectors embed the FAQ question (queries match questions) and the raw
    chunk text; the sparse index covers the full unit text including FAQ
    answers, so rare keywords in answers stay findable.
    """
    records = units_from_corpus(faqs, chunks)
    embed_units = [
        (r.unit_id, r.question if r.kind == "faq" else r.text) for r in records
    ]
    sparse_units = [(r.unit_id, r.text) for r in records]
    return IndexSet(
        dense=build_dense(embed_units, provider),
        sparse=build_sparse(sparse_units, k1=k1, b=b),
        units={r.unit_id: r for r in records},
        embedder_name=provider.name,
    )


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_snapshot(ixset: IndexSet, directory: str | Path) -> dict:
    """Persist an index set; returns the manifest written alongside it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    matrix = ixset.dense.matrix.astype("<f4")
    (directory / "dense.f32").write_bytes(matrix.tobytes(order="C"))
    (directory / "ids.txt").write_text(
        "".join(f"{uid}\n" for uid in ixset.dense.ids), encoding="utf-8"
    )

    with open(directory / "postings.jsonl", "w", encoding="utf-8") as fh:
        meta = {
            "k1": ixset.sparse.k1,
            "b": ixset.sparse.b,
            "avg_len": ixset.sparse.avg_len,
            "doc_len": ixset.sparse.doc_len,
        }
        fh.write(json.dumps(meta, ensure_ascii=False) + "\n")
        for term, plist in ixset.sparse.postings.items():
            fh.write(
                json.dumps({"t": term, "p": list(plist.items())}, ensure_ascii=False)
                + "\n"
            )

    with open(directory / "units.jsonl", "w", encoding="utf-8") as fh:
        for r in ixset.units.values():
            fh.write(
                json.dumps(
                    {
                        "unit_id": r.unit_id,
                        "kind": r.kind,
                        "text": r.text,
                        "question": r.question,
                        "answer": r.answer,
                        "parent_doc": r.parent_doc,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )

    data_files = ["dense.f32", "ids.txt", "postings.jsonl", "units.jsonl"]
    manifest = {
        "format_version": SNAPSHOT_VERSION,
        "embedder": ixset.embedder_name,
        "n_units": len(ixset.dense.ids),
        "dim": DIM,
        "checksums": {name: _sha256(directory / name) for name in data_files},
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8"
    )
    return manifest


def load_snapshot(directory: str | Path) -> IndexSet:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise SnapshotError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"snapshot version {manifest.get('format_version')} != {SNAPSHOT_VERSION}"
        )
    for name, expected in manifest["checksums"].items():
        path = directory / name
        if not path.exists():
            raise SnapshotError(f"missing snapshot file {name}")
        actual = _sha256(path)
        if actual != expected:
            raise SnapshotError(f"checksum mismatch for {name}")

    ids = (directory / "ids.txt").read_text(encoding="utf-8").splitlines()
    raw = (directory / "dense.f32").read_bytes()
    matrix = np.frombuffer(raw, dtype="<f4").reshape(len(ids), DIM).copy()

    postings: dict[str, dict[str, int]] = {}
    with open(directory / "postings.jsonl", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        for line in fh:
            record = json.loads(line)
            postings[record["t"]] = {uid: int(tf) for uid, tf in record["p"]}
    sparse = SparseIndex(
        postings=postings,
        doc_len={uid: int(n) for uid, n in meta["doc_len"].items()},
        avg_len=float(meta["avg_len"]),
        k1=float(meta["k1"]),
        b=float(meta["b"]),
    )

    units: dict[str, UnitRecord] = {}
    with open(directory / "units.jsonl", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            units[record["unit_id"]] = UnitRecord(
                unit_id=record["unit_id"],
                kind=record["kind"],
                text=record["text"],
                question=record.get("question"),
                answer=record.get("answer"),
                parent_doc=record.get("parent_doc"),
            )

    return IndexSet(
        dense=DenseIndex(ids=ids, matrix=matrix),
        sparse=sparse,
        units=units,
        embedder_name=manifest["embedder"],
    )
