"""Offline evaluation of pipeline configurations on a labeled QA fixture.

Three modes are compared: llm_only (no retrieval, no citation enforcement),
rag_rerank (dense retrieval + re-ranking), and hybrid (dense + keyword union).
Judging is grounding-based and automatic: an answer is grounded when it cites
a gold unit, hallucinated when it is non-refused but cites nothing valid, and
correct when it is grounded and repeats the gold key fields (numbers) from
the reference answer.

Determinism: with the bundled grounding-aware mock provider and a fixed seed,
report.json is byte-identical across runs. Wall-clock response times cannot
be deterministic, so they are written to a timings.json sidecar (and shown in
the human-readable table) but never enter report.json.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .agents import QueryType
from .generate import (
    GenerationParams,
    GenerationResult,
    ChatStream,
    Usage,
    assemble_prompt,
    extract_citations,
    generate_answer,
    _split_stream_chunks,
)
from .index import IndexSet
from .ingest import normalize_text, _iter_jsonl
from .retrieve import OverlapScorer, RerankScorer, Retriever, rerank

MODES = ("llm_only", "rag_rerank", "hybrid")
MODE_LABELS = {"llm_only": "LLM Only", "rag_rerank": "RAG+Re-rank", "hybrid": "Hybrid RAG"}

_PASSAGE_BLOCK_RE = re.compile(r"\[((?:FAQ|DOC)-[0-9]{4})\] (.*)", re.DOTALL)
_KEY_FIELD_RE = re.compile(r"\d+(?:[.,]\d+)?")


def _prompt_passages(user_content: str) -> list[tuple[str, str]]:
    """(unit id, text) pairs for each cited passage block in a prompt."""
    head = user_content.split("Question:")[0]
    passages = []
    for block in head.split("\n\n"):
        m = _PASSAGE_BLOCK_RE.match(block.strip())
        if m:
            passages.append((m.group(1), m.group(2)))
    return passages


class EvalError(ValueError):
    pass


@dataclass
class EvalItem:
    id: str
    question: str
    gold_answer: str
    gold_unit_ids: frozenset[str]
    query_type: QueryType

    def key_fields(self) -> list[str]:
        """Gold key facts: the numeric literals of the reference answer."""
        return sorted(set(_KEY_FIELD_RE.findall(self.gold_answer)))


def load_eval_items(path: str | Path) -> list[EvalItem]:
    items = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        item = EvalItem(
            id=str(record["id"]),
            question=str(record["question"]),
            gold_answer=str(record["gold_answer"]),
            gold_unit_ids=frozenset(record["gold_unit_ids"]),
            query_type=QueryType(record["query_type"]),
        )
        if item.id in seen:
            raise EvalError(f"{path}:{lineno}: duplicate item id {item.id}")
        seen.add(item.id)
        items.append(item)
    return items


@dataclass
class PipelineConfig:
    mode: str
    k_dense: int = 15
    k_keyword: int = 15
    keep: int = 2
    max_retries: int = 2
    min_passage_relevance: float = 0.0
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise EvalError(f"unknown mode {self.mode!r}, expected one of {MODES}")


class GroundedMockProvider:
    """Input-deterministic mock LLM for offline runs.

    When the prompt carries cited passages, the reply restates the top passage
    and cites its id, so grounding succeeds exactly when retrieval put a gold
    unit first. Without passages it answers from nothing and cites nothing,
    which is what an ungrounded LLM baseline looks like to the judge.
    """

    name = "grounded-mock"

    def chat(self, messages: list[dict[str, str]], params: GenerationParams) -> ChatStream:
        user = next((m["content"] for m in reversed(messages) if m["role"] == "user"), "")
        passages = _prompt_passages(user)
        if passages:
            reply = " ".join(
                f"Theo tài liệu [{uid}]: {' '.join(text.split())}" for uid, text in passages
            )
        else:
            question = user.split("Question:")[-1].strip() or user.strip()
            reply = f"Theo hiểu biết chung của tôi, {question[:120]} là một nội dung tuyển sinh phổ biến."
        usage = Usage(
            input_tokens=sum(len(m["content"]) for m in messages) // 4,
            output_tokens=max(1, len(reply) // 4),
        )
        return ChatStream(iter(_split_stream_chunks(reply)), usage)


@dataclass
class Judgment:
    item_id: str
    relevant_retrieved: bool
    grounded: bool
    hallucinated: bool
    correct: bool
    refused: bool
    citations: list[str]
    latency_s: float = 0.0


def judge_answer(
    result: GenerationResult,
    item: EvalItem,
    corpus_ids: frozenset[str] | set[str],
    retrieved_ids: Sequence[str] = (),
) -> Judgment:
    cited = set(result.citations)
    grounded = bool(cited & item.gold_unit_ids)
    hallucinated = (not result.refused) and (
        not cited or not cited <= set(corpus_ids) or not grounded
    )
    answer_folded = normalize_text(result.text)
    correct = grounded and all(f in answer_folded for f in item.key_fields())
    return Judgment(
        item_id=item.id,
        relevant_retrieved=bool(set(retrieved_ids) & item.gold_unit_ids),
        grounded=grounded,
        hallucinated=hallucinated,
        correct=correct,
        refused=result.refused,
        citations=sorted(cited),
    )


@dataclass
class MetricsRow:
    mode: str
    precision: float
    recall: float
    f1: float
    hallucination_rate: float
    mean_response_s: float
    n_items: int
    n_refused: int


def compute_metrics(judgments: Sequence[Judgment], mode: str = "") -> MetricsRow:
    """Precision over attempted (non-refused) answers, recall over all items."""
    if not judgments:
        raise EvalError("compute_metrics requires at least one judgment")
    total = len(judgments)
    attempted = sum(1 for j in judgments if not j.refused)
    correct = sum(1 for j in judgments if j.correct)
    precision = correct / attempted if attempted else 0.0
    recall = correct / total
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    hallucinated = sum(1 for j in judgments if j.hallucinated)
    mean_latency = sum(j.latency_s for j in judgments) / total
    return MetricsRow(
        mode=mode,
        precision=precision,
        recall=recall,
        f1=f1,
        hallucination_rate=hallucinated / total,
        mean_response_s=mean_latency,
        n_items=total,
        n_refused=total - attempted,
    )


LLM_ONLY_SYSTEM = (
    "You are an admissions counseling assistant for a university. "
    "Answer the question concisely."
)


def _run_llm_only(item: EvalItem, provider, config: PipelineConfig) -> tuple[GenerationResult, list[str]]:
    messages = [
        {"role": "system", "content": LLM_ONLY_SYSTEM},
        {"role": "user", "content": f"Question: {item.question}"},
    ]
    start = time.perf_counter()
    stream = provider.chat(messages, config.params)
    text = "".join(stream)
    elapsed = (time.perf_counter() - start) * 1000.0
    return (
        GenerationResult(
            text=text,
            citations=extract_citations(text),
            attempts=1,
            input_tokens=stream.usage.input_tokens or 0,
            output_tokens=stream.usage.output_tokens or 0,
            tokens_estimated=stream.usage.input_tokens is None,
            first_token_latency_ms=elapsed,
            total_latency_ms=elapsed,
            refused=False,
        ),
        [],
    )


def _run_retrieval_mode(
    item: EvalItem,
    retriever: Retriever,
    provider,
    scorer: RerankScorer,
    config: PipelineConfig,
) -> tuple[GenerationResult, list[str]]:
    from .generate import refusal_result

    if config.mode == "hybrid":
        pool = retriever.hybrid(item.question, k_dense=config.k_dense, k_keyword=config.k_keyword)
    else:
        pool = retriever.dense_candidates(item.question, k=config.k_dense)
    if not pool:
        return refusal_result(), []
    outcome = rerank(item.question, pool, scorer, keep=config.keep)
    passages = [p for p in outcome.passages if p.relevance > config.min_passage_relevance]
    retrieved = [c.id for c in pool]
    if not passages:
        return refusal_result(), retrieved
    bundle = assemble_prompt(passages, item.question, params=config.params)
    return generate_answer(bundle, provider, max_retries=config.max_retries), retrieved


@dataclass
class EvalReport:
    seed: int
    rows: list[MetricsRow]
    judgments: dict[str, list[Judgment]]

    def to_json_bytes(self) -> bytes:
        """Deterministic serialization: metrics and judgments, no wall-clock."""
        payload = {
            "seed": self.seed,
            "configs": {
                row.mode: {
                    "precision": round(row.precision, 6),
                    "recall": round(row.recall, 6),
                    "f1": round(row.f1, 6),
                    "hallucination_rate": round(row.hallucination_rate, 6),
                    "n_items": row.n_items,
                    "n_refused": row.n_refused,
                }
                for row in self.rows
            },
            "items": {
                mode: [
                    {
                        "id": j.item_id,
                        "relevant_retrieved": j.relevant_retrieved,
                        "grounded": j.grounded,
                        "hallucinated": j.hallucinated,
                        "correct": j.correct,
                        "refused": j.refused,
                        "citations": j.citations,
                    }
                    for j in sorted(judgments, key=lambda j: j.item_id)
                ]
                for mode, judgments in self.judgments.items()
            },
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2).encode("utf-8")

    def timings(self) -> dict:
        return {
            "configs": {row.mode: {"mean_response_s": row.mean_response_s} for row in self.rows},
            "items": {
                mode: {j.item_id: round(j.latency_s, 6) for j in judgments}
                for mode, judgments in self.judgments.items()
            },
        }

    def render_text(self) -> str:
        """Metric-rows-by-config-columns summary table."""
        modes = [row.mode for row in self.rows]
        headers = [MODE_LABELS.get(m, m) for m in modes]
        by_mode = {row.mode: row for row in self.rows}
        width = max(12, *(len(h) for h in headers))
        lines = ["Metric".ljust(22) + " | " + " | ".join(h.rjust(width) for h in headers)]
        lines.append("-" * len(lines[0]))

        def fmt_row(label: str, getter) -> str:
            return label.ljust(22) + " | " + " | ".join(
                f"{getter(by_mode[m]):.3f}".rjust(width) for m in modes
            )

        lines.append(fmt_row("Precision", lambda r: r.precision))
        lines.append(fmt_row("Recall", lambda r: r.recall))
        lines.append(fmt_row("F1-score", lambda r: r.f1))
        lines.append(fmt_row("Response Time (s)", lambda r: r.mean_response_s))
        lines.append(fmt_row("Hallucination Rate", lambda r: r.hallucination_rate))
        return "\n".join(lines) + "\n"


def run_eval(
    items: Sequence[EvalItem],
    configs: Sequence[PipelineConfig],
    index_set: IndexSet,
    embedder,
    provider,
    scorer: RerankScorer | None = None,
    seed: int = 0,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Run every item through every config and assemble the metrics table."""
    if not items:
        raise EvalError("eval needs at least one item")
    if not configs:
        raise EvalError("eval needs at least one config")
    corpus_ids = frozenset(index_set.units)
    for item in items:
        missing = item.gold_unit_ids - corpus_ids
        if missing:
            raise EvalError(f"item {item.id}: gold unit ids not in corpus: {sorted(missing)}")

    scorer = scorer or OverlapScorer()
    retriever = Retriever(index_set, embedder)

    def run_item(config: PipelineConfig, item: EvalItem) -> Judgment:
        start = time.perf_counter()
        if config.mode == "llm_only":
            result, retrieved = _run_llm_only(item, provider, config)
        else:
            result, retrieved = _run_retrieval_mode(item, retriever, provider, scorer, config)
        latency = time.perf_counter() - start
        judgment = judge_answer(result, item, corpus_ids, retrieved)
        judgment.latency_s = latency
        return judgment

    rows: list[MetricsRow] = []
    judgments: dict[str, list[Judgment]] = {}
    for config in configs:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                config_judgments = list(pool.map(lambda it: run_item(config, it), items))
        else:
            config_judgments = [run_item(config, item) for item in items]
        config_judgments.sort(key=lambda j: j.item_id)
        judgments[config.mode] = config_judgments
        rows.append(compute_metrics(config_judgments, mode=config.mode))

    report = EvalReport(seed=seed, rows=rows, judgments=judgments)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_bytes(report.to_json_bytes())
        (out / "timings.json").write_text(
            json.dumps(report.timings(), indent=2), encoding="utf-8"
        )
        (out / "report.txt").write_text(report.render_text(), encoding="utf-8")
    return report
