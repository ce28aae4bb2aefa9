from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from admitqa.config import fixture_path
from admitqa.index import HashEmbeddingProvider, build_index_set
from admitqa.ingest import load_corpus, load_faqs, run_ingest


@pytest.fixture(scope="session")
def fixture_corpus():
    docs = load_corpus(fixture_path("corpus.jsonl"))
    faqs = load_faqs(fixture_path("faq.jsonl"))
    cleaned_faqs, chunks, report = run_ingest(docs, faqs)
    return cleaned_faqs, chunks, report


@pytest.fixture(scope="session")
def hash_provider():
    return HashEmbeddingProvider()


@pytest.fixture(scope="session")
def fixture_index(fixture_corpus, hash_provider):
    cleaned_faqs, chunks, _ = fixture_corpus
    return build_index_set(cleaned_faqs, chunks, hash_provider)
