from __future__ import annotations

import pytest

from admitqa.agents import QueryType
from admitqa.config import fixture_path
from admitqa.evalharness import (
    EvalError,
    EvalItem,
    GroundedMockProvider,
    Judgment,
    PipelineConfig,
    compute_metrics,
    judge_answer,
    load_eval_items,
    run_eval,
)
from admitqa.generate import GenerationParams, GenerationResult, refusal_result


def item(gold_ids=("DOC-0017",), gold_answer="giá trị 54 triệu") -> EvalItem:
    return EvalItem(
        id="t1",
        question="q",
        gold_answer=gold_answer,
        gold_unit_ids=frozenset(gold_ids),
        query_type=QueryType.keyword_lookup,
    )


def result(text: str, citations: list[str], refused: bool = False) -> GenerationResult:
    return GenerationResult(
        text=text,
        citations=citations,
        attempts=1,
        input_tokens=10,
        output_tokens=5,
        tokens_estimated=True,
        first_token_latency_ms=1.0,
        total_latency_ms=2.0,
        refused=refused,
    )


CORPUS = frozenset({"DOC-0017", "DOC-0042", "FAQ-0001"})


class TestJudge:
    def test_grounded_citation(self):
        j = judge_answer(result("câu trả lời 54 triệu [DOC-0017]", ["DOC-0017"]), item(), CORPUS)
        assert j.grounded and not j.hallucinated and j.correct

    def test_refusal_not_hallucinated(self):
        j = judge_answer(refusal_result(), item(), CORPUS)
        assert j.refused and not j.hallucinated and not j.grounded and not j.correct

    def test_wrong_citation_hallucinated(self):
        j = judge_answer(result("x [DOC-0042]", ["DOC-0042"]), item(), CORPUS)
        assert not j.grounded and j.hallucinated

    def test_uncited_hallucinated(self):
        j = judge_answer(result("x", []), item(), CORPUS)
        assert j.hallucinated

    def test_citation_outside_corpus_hallucinated(self):
        j = judge_answer(result("x [DOC-0099]", ["DOC-0099"]), item(), CORPUS)
        assert j.hallucinated

    def test_grounded_but_missing_key_fact_incorrect(self):
        j = judge_answer(result("không có con số [DOC-0017]", ["DOC-0017"]), item(), CORPUS)
        assert j.grounded and not j.correct

    def test_no_numeric_key_facts_means_grounding_suffices(self):
        it = item(gold_answer="trường không đào tạo ngành y")
        j = judge_answer(result("đúng vậy [DOC-0017]", ["DOC-0017"]), it, CORPUS)
        assert j.correct

    def test_relevant_retrieved_flag(self):
        j = judge_answer(result("x", []), item(), CORPUS, retrieved_ids=["DOC-0017"])
        assert j.relevant_retrieved
        j2 = judge_answer(result("x", []), item(), CORPUS, retrieved_ids=["FAQ-0001"])
        assert not j2.relevant_retrieved


def judgments(correct: int, hallucinated: int, refused: int, total: int) -> list[Judgment]:
    out = []
    for i in range(total):
        is_refused = i < refused
        is_correct = refused <= i < refused + correct
        is_halluc = refused + correct <= i < refused + correct + hallucinated
        out.append(
            Judgment(
                item_id=f"i{i:03d}",
                relevant_retrieved=is_correct,
                grounded=is_correct,
                hallucinated=is_halluc,
                correct=is_correct,
                refused=is_refused,
                citations=[],
                latency_s=0.5,
            )
        )
    return out


class TestComputeMetrics:
    def test_nine_of_ten(self):
        row = compute_metrics(judgments(correct=9, hallucinated=1, refused=0, total=10))
        assert row.precision == 0.9
        assert row.recall == 0.9
        assert row.f1 == pytest.approx(0.9)

    def test_refusals_hit_recall_not_precision(self):
        row = compute_metrics(judgments(correct=6, hallucinated=0, refused=2, total=8))
        assert row.precision == 1.0
        assert row.recall == 0.75
        assert row.f1 == pytest.approx(2 * 1.0 * 0.75 / 1.75)

    def test_all_refused_degenerate(self):
        row = compute_metrics(judgments(correct=0, hallucinated=0, refused=5, total=5))
        assert row.precision == 0.0 and row.recall == 0.0 and row.f1 == 0.0

    def test_f1_harmonic_mean_identity(self):
        # harmonic mean of P=0.985 and R=0.89 is 0.935
        p, r = 0.985, 0.89
        f1 = 2 * p * r / (p + r)
        assert f1 == pytest.approx(0.935, abs=0.001)

    def test_hallucination_rate(self):
        row = compute_metrics(judgments(correct=5, hallucinated=3, refused=2, total=10))
        assert row.hallucination_rate == 0.3

    def test_mean_latency(self):
        row = compute_metrics(judgments(correct=1, hallucinated=0, refused=0, total=4))
        assert row.mean_response_s == pytest.approx(0.5)

    def test_empty_judgments_rejected(self):
        with pytest.raises(EvalError):
            compute_metrics([])


class TestGroundedMock:
    def test_cites_prompt_passages(self):
        from admitqa.generate import assemble_prompt
        from admitqa.retrieve import RankedPassage

        passages = [
            RankedPassage(id="FAQ-0001", text="học phí 354.000 đồng", relevance=0.9, rank=1),
            RankedPassage(id="DOC-0002", text="ký túc xá 1.200 chỗ", relevance=0.5, rank=2),
        ]
        bundle = assemble_prompt(passages, "học phí?")
        reply = "".join(GroundedMockProvider().chat(bundle.messages(), GenerationParams()))
        assert "[FAQ-0001]" in reply and "[DOC-0002]" in reply
        assert "354.000" in reply

    def test_no_passages_no_citation(self):
        messages = [
            {"role": "system", "content": "x"},
            {"role": "user", "content": "Question: điểm chuẩn bao nhiêu?"},
        ]
        reply = "".join(GroundedMockProvider().chat(messages, GenerationParams()))
        assert "[" not in reply


@pytest.fixture(scope="module")
def eval_items():
    return load_eval_items(fixture_path("eval_items.jsonl"))


class TestRunEval:
    def test_fixture_items_shape(self, eval_items):
        assert len(eval_items) == 60
        by_type = {}
        for it in eval_items:
            by_type.setdefault(it.query_type, []).append(it)
        assert {len(v) for v in by_type.values()} == {10}
        assert len(by_type) == 6

    def test_empty_items_rejected(self, fixture_index, hash_provider):
        with pytest.raises(EvalError):
            run_eval([], [PipelineConfig(mode="hybrid")], fixture_index, hash_provider, GroundedMockProvider())

    def test_unknown_gold_ids_rejected(self, fixture_index, hash_provider):
        bad = EvalItem(
            id="x", question="q", gold_answer="a",
            gold_unit_ids=frozenset({"DOC-9999"}), query_type=QueryType.keyword_lookup,
        )
        with pytest.raises(EvalError, match="DOC-9999"):
            run_eval([bad], [PipelineConfig(mode="hybrid")], fixture_index, hash_provider, GroundedMockProvider())

    def test_unknown_mode_rejected(self):
        with pytest.raises(EvalError):
            PipelineConfig(mode="quantum")

    def test_direction_and_determinism(self, eval_items, fixture_index, hash_provider, tmp_path):
        configs = [PipelineConfig(mode=m) for m in ("llm_only", "rag_rerank", "hybrid")]
        a = run_eval(eval_items, configs, fixture_index, hash_provider, GroundedMockProvider(),
                     seed=7, out_dir=tmp_path / "a")
        b = run_eval(eval_items, configs, fixture_index, hash_provider, GroundedMockProvider(),
                     seed=7, out_dir=tmp_path / "b")
        by_mode = {row.mode: row for row in a.rows}
        assert by_mode["hybrid"].precision > by_mode["rag_rerank"].precision > by_mode["llm_only"].precision
        assert by_mode["hybrid"].hallucination_rate < by_mode["rag_rerank"].hallucination_rate < by_mode["llm_only"].hallucination_rate
        assert a.to_json_bytes() == b.to_json_bytes()
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert (tmp_path / "a" / "report.txt").exists()
        assert (tmp_path / "a" / "timings.json").exists()

    def test_citation_guard_holds_on_fixture(self, eval_items, fixture_index, hash_provider):
        report = run_eval(
            eval_items, [PipelineConfig(mode="hybrid")], fixture_index, hash_provider, GroundedMockProvider()
        )
        for judgment in report.judgments["hybrid"]:
            if not judgment.refused:
                assert judgment.citations, f"{judgment.item_id} answered without citation"

    def test_text_table_layout(self, eval_items, fixture_index, hash_provider):
        report = run_eval(
            eval_items,
            [PipelineConfig(mode="llm_only"), PipelineConfig(mode="hybrid")],
            fixture_index, hash_provider, GroundedMockProvider(),
        )
        text = report.render_text()
        for label in ("Precision", "Recall", "F1-score", "Response Time (s)", "Hallucination Rate"):
            assert label in text
        assert "LLM Only" in text and "Hybrid RAG" in text

    def test_concurrent_workers_same_judgments(self, eval_items, fixture_index, hash_provider):
        config = [PipelineConfig(mode="hybrid")]
        seq = run_eval(eval_items, config, fixture_index, hash_provider, GroundedMockProvider(), workers=1)
        par = run_eval(eval_items, config, fixture_index, hash_provider, GroundedMockProvider(), workers=4)
        assert seq.to_json_bytes() == par.to_json_bytes()
