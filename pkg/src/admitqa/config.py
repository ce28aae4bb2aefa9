"""Engine configuration: JSON file plus environment overrides.

Provider endpoints honor LLM_BASE_URL / LLM_MODEL / LLM_API_KEY and
EMBED_BASE_URL / EMBED_MODEL so any chat-completions-compatible backend can
be swapped in without touching the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | scripted | http
    base_url: str | None = None
    model: str | None = None
    api_key: str | None = None
    transcript_path: str | None = None  # scripted provider replies


@dataclass
class EmbedderConfig:
    kind: str = "hash"  # hash | http
    base_url: str | None = None
    model: str | None = None
    api_key: str | None = None


@dataclass
class EngineConfig:
    chunk_size: int = 500
    stride: int = 100
    dedup_threshold: float = 0.9
    entropy_low: float = 1.5
    entropy_high: float = 6.0
    k_dense: int = 15
    k_keyword: int = 15
    keep: int = 2
    faq_threshold: float = 0.9
    max_retries: int = 2
    min_passage_relevance: float = 0.0
    context_budget: int = 1200
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    model: str = "gpt-4o-mini"
    admin_token: str = "change-me"
    contact: str = "tuyensinh@example.edu.vn"
    corpus_path: str | None = None
    faq_path: str | None = None
    rules_path: str | None = None
    cutoffs_path: str | None = None
    prices_path: str | None = None
    index_dir: str | None = None
    data_dir: str = "data"
    llm: ProviderConfig = field(default_factory=ProviderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)

    @property
    def sessions_dir(self) -> str:
        return str(Path(self.data_dir) / "sessions")

    @property
    def records_path(self) -> str:
        return str(Path(self.data_dir) / "records.jsonl")


def load_config(path: str | Path | None = None) -> EngineConfig:
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))

    llm = ProviderConfig(**data.pop("llm", {}))
    embedder = EmbedderConfig(**data.pop("embedder", {}))
    config = EngineConfig(llm=llm, embedder=embedder, **data)

    if os.environ.get("LLM_BASE_URL"):
        config.llm.kind = "http"
        config.llm.base_url = os.environ["LLM_BASE_URL"]
    if os.environ.get("LLM_MODEL"):
        config.llm.model = os.environ["LLM_MODEL"]
    if os.environ.get("LLM_API_KEY"):
        config.llm.api_key = os.environ["LLM_API_KEY"]
    if os.environ.get("EMBED_BASE_URL"):
        config.embedder.kind = "http"
        config.embedder.base_url = os.environ["EMBED_BASE_URL"]
    if os.environ.get("EMBED_MODEL"):
        config.embedder.model = os.environ["EMBED_MODEL"]
    return config


def fixture_path(name: str) -> Path:
    """Path to a bundled fixture file (synthetic corpus, tables, eval items)."""
    return Path(str(resources.files("admitqa").joinpath("fixtures", name)))
