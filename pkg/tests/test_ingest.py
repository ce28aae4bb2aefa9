from __future__ import annotations

import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admitqa.ingest import (
    Chunk,
    CorpusError,
    FaqPair,
    RawDocument,
    chunk_document,
    chunk_spans,
    entropy_gate,
    jaccard,
    jaccard_dedup,
    normalize_text,
    redact_pii,
    run_ingest,
    shannon_entropy,
    token_set,
    tokenize,
)
from oracles import char_entropy_bits, chunk_count_law, naive_tokenize


def doc(doc_id: str, body: str) -> RawDocument:
    return RawDocument(doc_id=doc_id, title=doc_id, body=body, source="drive_doc", year=2025)


class TestNormalize:
    def test_whitespace_and_case(self):
        assert normalize_text("  Hello   WORLD ") == "hello world"

    def test_lowercase_preserves_diacritics(self):
        assert normalize_text("ĐIỂM Chuẩn") == "điểm chuẩn"

    def test_nfc_composition(self):
        decomposed = "é"  # e + combining acute
        assert normalize_text(decomposed) == "é"

    @given(st.text(max_size=200))
    def test_idempotent(self, raw):
        once = normalize_text(raw)
        assert normalize_text(once) == once

    @given(st.text(max_size=200))
    def test_output_is_nfc(self, raw):
        out = normalize_text(raw)
        assert unicodedata.normalize("NFC", out) == out


class TestTokenize:
    def test_punctuation_split(self):
        assert tokenize("điểm chuẩn 2025?") == ["điểm", "chuẩn", "2025", "?"]

    def test_empty(self):
        assert tokenize("") == []

    def test_multi_space(self):
        assert tokenize("a  b") == ["a", "b"]

    @given(st.text(alphabet=st.characters(codec="utf-8"), max_size=120))
    def test_matches_independent_tokenizer(self, raw):
        text = normalize_text(raw)
        assert tokenize(text) == naive_tokenize(text)


class TestRedact:
    def test_phone(self):
        text, counts = redact_pii("call 0912345678")
        assert text == "call [PHONE]"
        assert counts["phone"] == 1

    def test_email(self):
        text, counts = redact_pii("mail a@b.com now")
        assert text == "mail [EMAIL] now"
        assert counts["email"] == 1

    def test_national_id(self):
        text, counts = redact_pii("cccd 012345678901 het")
        assert text == "cccd [ID] het"
        assert counts["id"] == 1

    def test_clean_text_untouched(self):
        text, counts = redact_pii("no pii here")
        assert text == "no pii here"
        assert all(n == 0 for n in counts.values())

    def test_id_wins_over_phone_prefix(self):
        # A 12-digit number is one national id, not a phone plus leftovers.
        text, counts = redact_pii("số 012345678901 đây")
        assert counts == {"email": 0, "id": 1, "phone": 0}
        assert "[ID]" in text

    @given(st.text(max_size=300))
    def test_idempotent(self, raw):
        once, _ = redact_pii(raw)
        twice, counts = redact_pii(once)
        assert twice == once
        assert all(n == 0 for n in counts.values())


class TestEntropyGate:
    def test_repetitive_rejected(self):
        result = entropy_gate("aaaaaaaaaa")
        assert not result.accepted
        assert result.reason == "low_entropy"
        assert result.entropy == 0.0

    def test_normal_prose_accepted(self):
        sentence = "what is the tuition fee for civil engineering"
        result = entropy_gate(sentence)
        assert result.accepted
        # frozen against the independent frequency-count oracle
        assert result.entropy == pytest.approx(3.6960143427044887, abs=1e-12)
        assert result.entropy == pytest.approx(char_entropy_bits(sentence), abs=1e-12)

    def test_empty_rejected(self):
        result = entropy_gate("")
        assert not result.accepted
        assert result.reason == "empty"

    @given(st.text(min_size=1, max_size=300))
    def test_matches_oracle(self, text):
        assert shannon_entropy(text) == pytest.approx(char_entropy_bits(text), abs=1e-9)


class TestJaccardDedup:
    def test_identical_removed(self):
        d1, d2 = doc("a", "xin chào các bạn"), doc("b", "xin chào các bạn")
        retained, removed = jaccard_dedup([d1, d2])
        assert [d.doc_id for d in retained] == ["a"]
        assert [d.doc_id for d in removed] == ["b"]

    def test_half_overlap_retained(self):
        # token sets {a,b,c} vs {a,b,d}: J = 2/4 = 0.5 < 0.9
        retained, removed = jaccard_dedup([doc("x", "a b c"), doc("y", "a b d")])
        assert len(retained) == 2 and not removed

    def test_single_doc(self):
        retained, removed = jaccard_dedup([doc("only", "một mình")])
        assert len(retained) == 1 and not removed

    def test_jaccard_value(self):
        assert jaccard(frozenset("abc"), frozenset("abd")) == 0.5

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            jaccard_dedup([], threshold=0.0)

    @given(st.lists(st.text(alphabet="abcdef ", min_size=1, max_size=30), max_size=8))
    @settings(max_examples=50)
    def test_idempotent(self, bodies):
        docs = [doc(f"d{i}", body) for i, body in enumerate(bodies)]
        retained, _ = jaccard_dedup(docs)
        again, removed = jaccard_dedup(retained)
        assert [d.doc_id for d in again] == [d.doc_id for d in retained]
        assert not removed


class TestChunking:
    def test_exact_size_single_chunk(self):
        assert chunk_spans(500) == [(0, 500)]

    def test_short_doc(self):
        assert chunk_spans(50) == [(0, 50)]

    def test_L700_three_chunks(self):
        assert chunk_spans(700) == [(0, 500), (100, 500), (200, 500)]

    def test_clamped_tail(self):
        # 864 - 500 = 364 is not a stride multiple, so a clamped final window
        assert chunk_spans(864) == [(0, 500), (100, 500), (200, 500), (300, 500), (364, 500)]

    def test_empty(self):
        assert chunk_spans(0) == []

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            chunk_spans(10, size=0)
        with pytest.raises(ValueError):
            chunk_spans(10, size=100, stride=0)
        with pytest.raises(ValueError):
            chunk_spans(10, size=100, stride=101)

    @given(st.integers(min_value=1, max_value=3000))
    def test_count_law_and_coverage(self, length):
        spans = chunk_spans(length)
        assert len(spans) == chunk_count_law(length, 500, 100)
        covered = set()
        for start, width in spans:
            assert 1 <= width <= 500
            covered.update(range(start, start + width))
        assert covered == set(range(length))

    def test_chunk_document_text_spans(self):
        body = " ".join(f"word{i}" for i in range(700))
        chunks = chunk_document(doc("long", body))
        assert [c.chunk_id for c in chunks] == ["DOC-0000", "DOC-0001", "DOC-0002"]
        assert chunks[1].token_start == 100
        assert chunks[1].text.startswith("word100")
        assert chunks[1].text.endswith("word599")

    def test_chunk_text_preserves_number_formats(self):
        chunks = chunk_document(doc("fmt", "Điểm chuẩn là 22,5 và 354.000 đồng"))
        assert "22,5" in chunks[0].text
        assert "354.000" in chunks[0].text

    def test_consecutive_start_difference_is_stride(self):
        body = " ".join(f"w{i}" for i in range(1234))
        chunks = chunk_document(doc("d", body))
        for a, b in zip(chunks, chunks[1:-1]):
            assert b.token_start - a.token_start == 100


class TestTypes:
    def test_faq_id_format(self):
        with pytest.raises(CorpusError):
            FaqPair(faq_id="FAQ-12", question="q", answer="a")

    def test_faq_requires_content(self):
        with pytest.raises(CorpusError):
            FaqPair(faq_id="FAQ-0001", question=" ", answer="a")

    def test_unknown_source(self):
        with pytest.raises(CorpusError):
            RawDocument("d", "t", "body", "carrier_pigeon", 2025)


class TestRunIngest:
    def test_fixture_pipeline(self, fixture_corpus):
        cleaned_faqs, chunks, report = fixture_corpus
        assert report.docs_in == 40
        assert report.docs_retained == 40
        assert report.docs_deduped == 0
        assert report.entropy_rejects == 0
        assert report.chunks_out == len(chunks) == 44
        assert report.faqs_in == report.faqs_out == len(cleaned_faqs) == 80
        # the contact document carries one of each PII category
        assert report.pii_redactions == {"email": 1, "id": 1, "phone": 1}

    def test_chunk_ids_unique_and_formatted(self, fixture_corpus):
        _, chunks, _ = fixture_corpus
        ids = [c.chunk_id for c in chunks]
        assert len(set(ids)) == len(ids)
        assert all(len(i) == 8 and i.startswith("DOC-") for i in ids)

    def test_near_duplicates_dropped(self):
        base = "điểm chuẩn ngành công nghệ thông tin năm 2025 là 25,10 điểm theo phương thức xét điểm thi"
        docs = [doc("a", base), doc("b", base + " nhé"), doc("c", "nội dung hoàn toàn khác về ký túc xá sinh viên")]
        faqs: list[FaqPair] = []
        _, chunks, report = run_ingest(docs, faqs)
        assert report.docs_deduped == 1
        assert report.docs_retained == 2

    def test_entropy_reject_counted(self):
        docs = [doc("junk", "aaaa aaaa aaaa aaaa"), doc("ok", "nội dung bình thường về tuyển sinh đại học")]
        _, _, report = run_ingest(docs, [])
        assert report.entropy_rejects == 1
        assert report.docs_retained == 1
