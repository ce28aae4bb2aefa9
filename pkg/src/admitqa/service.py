"""HTTP chat service: sessions, streamed answers, rating, metrics, cost.

Answers are generated fully (citation guard included) before any token is
streamed to the client; discarding an uncited draft must never leak it. The
interaction record is appended to the log before the final `done` event
acknowledges the reply, so a crash cannot lose an acknowledged answer.
"""

from __future__ import annotations

import json
import math
import re
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Iterator, Sequence

from fastapi import Depends, FastAPI, Header, HTTPException, Query
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel

from . import __version__
from .agents import AgentOutcome, Router, RouterConfig, load_cutoffs, load_rules
from .config import EngineConfig, fixture_path
from .evalharness import GroundedMockProvider
from .generate import HttpLlmProvider, ScriptedLlmProvider
from .index import (
    HashEmbeddingProvider,
    HttpEmbeddingProvider,
    IndexSet,
    build_index_set,
    load_snapshot,
    save_snapshot,
)
from .ingest import load_corpus, load_faqs, run_ingest
from .retrieve import LlmRerankScorer, OverlapScorer, Retriever
from .session import SessionNotFound, SessionStore, Turn

VERDICTS = ("correct", "incorrect")


@dataclass
class InteractionRecord:
    record_id: str
    session_id: str
    turn_index: int
    timestamp: float  # unix seconds, UTC
    question: str
    answer: str
    agent: str
    query_type: str
    citations: list[str]
    input_tokens: int
    output_tokens: int
    first_token_ms: float
    total_ms: float
    refused: bool = False
    verdict: str | None = None  # None = unrated
    rater: str | None = None

    def to_dict(self) -> dict:
        return {
            "type": "record",
            "record_id": self.record_id,
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "timestamp": self.timestamp,
            "question": self.question,
            "answer": self.answer,
            "agent": self.agent,
            "query_type": self.query_type,
            "citations": self.citations,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "first_token_ms": self.first_token_ms,
            "total_ms": self.total_ms,
            "refused": self.refused,
            "verdict": self.verdict,
            "rater": self.rater,
        }


class RecordLog:
    """Append-only interaction log with verdict amendments.

    Each append is a single JSON line written under a lock, so concurrent
    sessions cannot interleave partial records. State is rebuilt by replaying
    the file on startup.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._records: dict[str, InteractionRecord] = {}
        self._seq = 0
        if self.path and self.path.exists():
            self._replay()

    def _replay(self) -> None:
        assert self.path is not None
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                entry = json.loads(line)
                if entry.get("type") == "record":
                    entry.pop("type")
                    record = InteractionRecord(**entry)
                    self._records[record.record_id] = record
                    seq = int(record.record_id.split("-")[1])
                    self._seq = max(self._seq, seq)
                elif entry.get("type") == "verdict":
                    record = self._records.get(entry["record_id"])
                    if record is not None:
                        record.verdict = entry["verdict"]
                        record.rater = entry.get("rater")

    def _append_line(self, payload: dict) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, ensure_ascii=False) + "\n")
            fh.flush()

    def next_record_id(self) -> str:
        with self._lock:
            self._seq += 1
            return f"rec-{self._seq:08d}"

    def append(self, record: InteractionRecord) -> None:
        with self._lock:
            self._records[record.record_id] = record
            self._append_line(record.to_dict())

    def set_verdict(self, record_id: str, verdict: str, rater: str | None) -> InteractionRecord:
        if verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        with self._lock:
            record = self._records.get(record_id)
            if record is None:
                raise KeyError(record_id)
            record.verdict = verdict
            record.rater = rater
            self._append_line(
                {"type": "verdict", "record_id": record_id, "verdict": verdict, "rater": rater}
            )
            return record

    def get(self, record_id: str) -> InteractionRecord:
        with self._lock:
            record = self._records.get(record_id)
        if record is None:
            raise KeyError(record_id)
        return record

    def all_records(self) -> list[InteractionRecord]:
        with self._lock:
            return list(self._records.values())


@dataclass
class DailyMetrics:
    date: str
    questions: int
    input_tokens: int
    output_tokens: int
    accuracy: float | None
    p50_ms: float
    p95_ms: float

    def to_dict(self) -> dict:
        return {
            "date": self.date,
            "questions": self.questions,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "accuracy": self.accuracy,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
        }


def _utc_date(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d")


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: value at ceil(pct/100 * n), 1-based."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def daily_rollup(records: Sequence[InteractionRecord], date: str) -> DailyMetrics:
    """Aggregate the records whose timestamp falls on the given UTC date."""
    day = [r for r in records if _utc_date(r.timestamp) == date]
    rated = [r for r in day if r.verdict in VERDICTS]
    correct = sum(1 for r in rated if r.verdict == "correct")
    latencies = [r.total_ms for r in day]
    return DailyMetrics(
        date=date,
        questions=len(day),
        input_tokens=sum(r.input_tokens for r in day),
        output_tokens=sum(r.output_tokens for r in day),
        accuracy=(correct / len(rated)) if rated else None,
        p50_ms=nearest_rank_percentile(latencies, 50),
        p95_ms=nearest_rank_percentile(latencies, 95),
    )


@dataclass
class ModelPrice:
    input_per_1m: float
    output_per_1m: float

    def __post_init__(self) -> None:
        if self.input_per_1m < 0 or self.output_per_1m < 0:
            raise ValueError("prices must be >= 0")


class PriceSheet:
    def __init__(self, prices: dict[str, ModelPrice]) -> None:
        self.prices = prices

    @classmethod
    def load(cls, path: str | Path) -> "PriceSheet":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            {
                model: ModelPrice(
                    input_per_1m=float(p["input_per_1m"]),
                    output_per_1m=float(p["output_per_1m"]),
                )
                for model, p in data.items()
            }
        )


def estimate_cost(
    records: Sequence[InteractionRecord], prices: PriceSheet, model: str
) -> float:
    """Token-linear cost in currency units, rounded half-up to cents."""
    if model not in prices.prices:
        raise KeyError(f"no prices for model {model!r}")
    price = prices.prices[model]
    total_in = sum(r.input_tokens for r in records)
    total_out = sum(r.output_tokens for r in records)
    cost = (
        Decimal(total_in) * Decimal(str(price.input_per_1m))
        + Decimal(total_out) * Decimal(str(price.output_per_1m))
    ) / Decimal(1_000_000)
    return float(cost.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def build_providers(config: EngineConfig):
    """(llm provider, embedder, rerank scorer) per config + environment."""
    if config.embedder.kind == "http":
        embedder = HttpEmbeddingProvider(
            base_url=config.embedder.base_url or "",
            model=config.embedder.model or "",
            api_key=config.embedder.api_key,
        )
    else:
        embedder = HashEmbeddingProvider()

    if config.llm.kind == "http":
        provider = HttpLlmProvider(
            base_url=config.llm.base_url or "",
            model=config.llm.model or config.model,
            api_key=config.llm.api_key,
        )
        scorer = LlmRerankScorer(provider)
    elif config.llm.kind == "scripted":
        provider = ScriptedLlmProvider.from_file(config.llm.transcript_path, cycle=True)
        scorer = OverlapScorer()
    else:
        provider = GroundedMockProvider()
        scorer = OverlapScorer()
    return provider, embedder, scorer


class EngineRuntime:
    """Wires config, indexes, providers, router, sessions, and the record log."""

    def __init__(self, config: EngineConfig, index_set: IndexSet | None = None) -> None:
        self.config = config
        self.provider, self.embedder, self.scorer = build_providers(config)
        self.rules = load_rules(config.rules_path or fixture_path("rules.json"))
        self.cutoffs = load_cutoffs(config.cutoffs_path or fixture_path("cutoffs.json"))
        self.prices = PriceSheet.load(config.prices_path or fixture_path("prices.json"))
        self.sessions = SessionStore(config.sessions_dir if config.data_dir else None)
        self.records = RecordLog(config.records_path if config.data_dir else None)
        self._swap_lock = threading.Lock()
        self._ingest_lock = threading.Lock()
        self.index_set = index_set if index_set is not None else self._load_index()
        self._rebuild_router()

    def _load_index(self) -> IndexSet:
        if self.config.index_dir and Path(self.config.index_dir, "manifest.json").exists():
            return load_snapshot(self.config.index_dir)
        return self.run_ingest_build()

    def run_ingest_build(self) -> IndexSet:
        corpus = self.config.corpus_path or fixture_path("corpus.jsonl")
        faq = self.config.faq_path or fixture_path("faq.jsonl")
        docs = load_corpus(corpus)
        faqs = load_faqs(faq)
        cleaned_faqs, chunks, report = run_ingest(
            docs,
            faqs,
            chunk_size=self.config.chunk_size,
            stride=self.config.stride,
            dedup_threshold=self.config.dedup_threshold,
            entropy_low=self.config.entropy_low,
            entropy_high=self.config.entropy_high,
        )
        index_set = build_index_set(
            cleaned_faqs, chunks, self.embedder, k1=self.config.bm25_k1, b=self.config.bm25_b
        )
        self.last_ingest_report = report
        if self.config.index_dir:
            save_snapshot(index_set, self.config.index_dir)
        return index_set

    def _rebuild_router(self) -> None:
        retriever = Retriever(self.index_set, self.embedder)
        self.router = Router(
            retriever=retriever,
            provider=self.provider,
            scorer=self.scorer,
            rules=self.rules,
            cutoffs=self.cutoffs,
            config=RouterConfig(
                k_dense=self.config.k_dense,
                k_keyword=self.config.k_keyword,
                keep=self.config.keep,
                faq_threshold=self.config.faq_threshold,
                max_retries=self.config.max_retries,
                min_passage_relevance=self.config.min_passage_relevance,
                context_budget=self.config.context_budget,
                contact=self.config.contact,
            ),
        )

    def swap_index(self, index_set: IndexSet) -> None:
        with self._swap_lock:
            self.index_set = index_set
            self._rebuild_router()

    def try_ingest(self) -> dict:
        """Exclusive re-ingest; raises RuntimeError when one is already running."""
        if not self._ingest_lock.acquire(blocking=False):
            raise RuntimeError("ingest already running")
        try:
            index_set = self.run_ingest_build()
            self.swap_index(index_set)
            return self.last_ingest_report.to_dict()
        finally:
            self._ingest_lock.release()


class MessageIn(BaseModel):
    text: str


class VerdictIn(BaseModel):
    verdict: str
    rater: str | None = None


_TOKEN_SPLIT_RE = re.compile(r"\S+\s*|\s+")


def _sse(event: str, data: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(data, ensure_ascii=False)}\n\n"


def create_app(runtime: EngineRuntime) -> FastAPI:
    app = FastAPI(title="admissions counseling chat service", version=__version__)

    def require_admin(authorization: str | None = Header(default=None)) -> None:
        expected = f"Bearer {runtime.config.admin_token}"
        if authorization != expected:
            raise HTTPException(status_code=401, detail="admin token required")

    @app.get("/v1/health")
    def health() -> dict:
        return {
            "status": "ok",
            "version": __version__,
            "units": len(runtime.index_set.units),
            "model": runtime.config.model,
        }

    @app.post("/v1/sessions")
    def create_session() -> dict:
        session = runtime.sessions.create()
        return {"session_id": session.session_id}

    @app.get("/v1/units/{unit_id}")
    def unit_text(unit_id: str) -> dict:
        record = runtime.index_set.units.get(unit_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown unit {unit_id}")
        return {"unit_id": unit_id, "kind": record.kind, "text": record.text}

    def _answer(session_id: str, text: str) -> tuple[InteractionRecord, AgentOutcome]:
        try:
            session = runtime.sessions.get(session_id)
        except SessionNotFound:
            raise HTTPException(status_code=404, detail="unknown or expired session")
        lock = runtime.sessions.lock(session_id)
        with lock:  # one in-flight request per session
            outcome = runtime.router.route(text, session)
            now = time.time()
            runtime.sessions.append_turn(
                session, Turn(role="user", text=text, timestamp=now)
            )
            runtime.sessions.append_turn(
                session,
                Turn(
                    role="assistant",
                    text=outcome.answer,
                    timestamp=now,
                    agent=outcome.agent.value,
                    citations=list(outcome.citations),
                ),
            )
            record = InteractionRecord(
                record_id=runtime.records.next_record_id(),
                session_id=session_id,
                turn_index=len(session.turns) - 1,
                timestamp=now,
                question=text,
                answer=outcome.answer,
                agent=outcome.agent.value,
                query_type=outcome.query_type.value,
                citations=list(outcome.citations),
                input_tokens=outcome.input_tokens,
                output_tokens=outcome.output_tokens,
                first_token_ms=outcome.first_token_ms,
                total_ms=outcome.total_ms,
                refused=outcome.refused,
            )
            # Persist before the reply is acknowledged to the client.
            runtime.records.append(record)
            return record, outcome

    @app.post("/v1/sessions/{session_id}/messages")
    def post_message(session_id: str, message: MessageIn, stream: bool = True):
        if not message.text.strip():
            raise HTTPException(status_code=400, detail="text must be non-empty")
        try:
            record, outcome = _answer(session_id, message.text)
        except RuntimeError as exc:
            raise HTTPException(status_code=503, detail={"error": str(exc), "retryable": True})

        payload = {
            "record_id": record.record_id,
            "answer": record.answer,
            "citations": record.citations,
            "agent": record.agent,
            "query_type": record.query_type,
            "refused": record.refused,
            "needs_clarification": outcome.needs_clarification,
            "missing_fields": outcome.missing_fields,
            "usage": {
                "input_tokens": record.input_tokens,
                "output_tokens": record.output_tokens,
            },
            "latency_ms": {
                "first_token": record.first_token_ms,
                "total": record.total_ms,
            },
        }
        if not stream:
            return JSONResponse(payload)

        def events() -> Iterator[str]:
            for chunk in _TOKEN_SPLIT_RE.findall(record.answer):
                yield _sse("token", {"text": chunk})
            for citation in record.citations:
                yield _sse("citation", {"unit_id": citation})
            yield _sse(
                "done",
                {
                    "record_id": record.record_id,
                    "refused": record.refused,
                    "needs_clarification": outcome.needs_clarification,
                    "agent": record.agent,
                    "usage": payload["usage"],
                    "latency_ms": payload["latency_ms"],
                },
            )

        return StreamingResponse(events(), media_type="text/event-stream")

    @app.get("/v1/records/{record_id}")
    def fetch_record(record_id: str) -> dict:
        # Recovery path for dropped streams: the completed record is
        # re-fetchable without re-running the pipeline.
        try:
            record = runtime.records.get(record_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown record {record_id}")
        return record.to_dict()

    @app.post("/v1/records/{record_id}/verdict", dependencies=[Depends(require_admin)])
    def rate_record(record_id: str, verdict: VerdictIn) -> dict:
        try:
            record = runtime.records.set_verdict(record_id, verdict.verdict, verdict.rater)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown record {record_id}")
        return {"record_id": record.record_id, "verdict": record.verdict, "rater": record.rater}

    @app.get("/v1/records", dependencies=[Depends(require_admin)])
    def list_records(
        date: str | None = Query(default=None),
        verdict: str | None = Query(default=None),
        limit: int = Query(default=100, ge=1, le=1000),
    ) -> dict:
        records = runtime.records.all_records()
        if date is not None:
            records = [r for r in records if _utc_date(r.timestamp) == date]
        if verdict == "unrated":
            records = [r for r in records if r.verdict is None]
        elif verdict in VERDICTS:
            records = [r for r in records if r.verdict == verdict]
        records.sort(key=lambda r: r.record_id)
        return {"records": [r.to_dict() for r in records[-limit:]]}

    @app.get("/v1/metrics/daily")
    def metrics_daily(
        from_date: str = Query(alias="from"), to_date: str = Query(alias="to")
    ) -> dict:
        try:
            start = datetime.strptime(from_date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
            end = datetime.strptime(to_date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        except ValueError:
            raise HTTPException(status_code=400, detail="dates must be YYYY-MM-DD")
        if end < start:
            raise HTTPException(status_code=400, detail="to must be >= from")
        records = runtime.records.all_records()
        days = []
        cursor = start
        while cursor <= end:
            days.append(daily_rollup(records, cursor.strftime("%Y-%m-%d")).to_dict())
            cursor += timedelta(days=1)
        return {"days": days}

    @app.get("/v1/metrics/cost")
    def metrics_cost(model: str | None = None) -> dict:
        model = model or runtime.config.model
        try:
            cost = estimate_cost(runtime.records.all_records(), runtime.prices, model)
        except KeyError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        records = runtime.records.all_records()
        return {
            "model": model,
            "cost": cost,
            "input_tokens": sum(r.input_tokens for r in records),
            "output_tokens": sum(r.output_tokens for r in records),
        }

    @app.post("/v1/admin/ingest", dependencies=[Depends(require_admin)])
    def admin_ingest() -> dict:
        try:
            report = runtime.try_ingest()
        except RuntimeError:
            raise HTTPException(status_code=409, detail="ingest already running")
        return {"status": "ok", "report": report}

    return app
