"""Command-line entry points: ingest, index, query, eval, serve, fixture."""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

import click

from .config import EngineConfig, fixture_path, load_config
from .evalharness import GroundedMockProvider, PipelineConfig, load_eval_items, run_eval
from .index import (
    HashEmbeddingProvider,
    bm25_topk,
    build_index_set,
    dense_topk,
    load_snapshot,
    save_snapshot,
)
from .ingest import load_corpus, load_faqs, run_ingest
from .retrieve import OverlapScorer, Retriever, rerank


@click.group()
def main() -> None:
    """Admissions counseling QA engine."""


def _build_snapshot(
    corpus: str, faq: str, out: str, chunk_size: int, stride: int, dedup_threshold: float
) -> dict:
    docs = load_corpus(corpus)
    faqs = load_faqs(faq)
    cleaned_faqs, chunks, report = run_ingest(
        docs, faqs, chunk_size=chunk_size, stride=stride, dedup_threshold=dedup_threshold
    )
    provider = HashEmbeddingProvider()
    index_set = build_index_set(cleaned_faqs, chunks, provider)
    save_snapshot(index_set, out)
    return report.to_dict()


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--faq", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--chunk-size", default=500, show_default=True)
@click.option("--stride", default=100, show_default=True)
@click.option("--dedup-threshold", default=0.9, show_default=True)
def ingest(corpus, faq, out, chunk_size, stride, dedup_threshold) -> None:
    """Clean and chunk a corpus, then build and save the index snapshot."""
    report = _build_snapshot(corpus, faq, out, chunk_size, stride, dedup_threshold)
    click.echo(json.dumps(report, ensure_ascii=False, indent=2))


@main.group()
def index() -> None:
    """Build or query an index snapshot."""


@index.command("build")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--faq", required=True, type=click.Path(exists=True))
@click.option("--dir", "directory", required=True, type=click.Path())
def index_build(corpus, faq, directory) -> None:
    report = _build_snapshot(corpus, faq, directory, 500, 100, 0.9)
    click.echo(json.dumps(report, ensure_ascii=False, indent=2))


@index.command("query")
@click.option("--dir", "directory", required=True, type=click.Path(exists=True))
@click.option("--question", required=True)
@click.option("--mode", type=click.Choice(["dense", "keyword"]), default="dense")
@click.option("-k", default=15, show_default=True)
def index_query(directory, question, mode, k) -> None:
    index_set = load_snapshot(directory)
    if mode == "dense":
        provider = HashEmbeddingProvider()
        hits = dense_topk(index_set.dense, provider.embed(question), k=k)
    else:
        hits = bm25_topk(index_set.sparse, question, k=k)
    click.echo(json.dumps([{"unit_id": u, "score": s} for u, s in hits], indent=2))


@main.command()
@click.option("--dir", "directory", required=True, type=click.Path(exists=True))
@click.option("--question", required=True)
@click.option("--mode", type=click.Choice(["hybrid", "dense", "keyword"]), default="hybrid")
@click.option("--keep", default=2, show_default=True)
def query(directory, question, mode, keep) -> None:
    """Retrieve and re-rank context passages for a question."""
    index_set = load_snapshot(directory)
    retriever = Retriever(index_set, HashEmbeddingProvider())
    if mode == "hybrid":
        pool = retriever.hybrid(question)
    elif mode == "dense":
        pool = retriever.dense_candidates(question)
    else:
        pool = retriever.keyword_candidates(question)
    if not pool:
        click.echo("[]")
        return
    outcome = rerank(question, pool, OverlapScorer(), keep=keep)
    click.echo(
        json.dumps(
            [
                {"rank": p.rank, "unit_id": p.id, "relevance": round(p.relevance, 4), "text": p.text}
                for p in outcome.passages
            ],
            ensure_ascii=False,
            indent=2,
        )
    )


@main.group()
def eval() -> None:
    """Offline pipeline evaluation."""


@eval.command("run")
@click.option("--items", "items_path", type=click.Path(exists=True), default=None,
              help="Eval items JSONL (defaults to the bundled fixture).")
@click.option("--corpus", type=click.Path(exists=True), default=None)
@click.option("--faq", type=click.Path(exists=True), default=None)
@click.option("--configs", default="llm_only,rag_rerank,hybrid", show_default=True)
@click.option("--provider", "provider_kind", type=click.Choice(["mock", "http"]), default="mock")
@click.option("--out", "out_dir", type=click.Path(), default="report")
@click.option("--seed", default=0, show_default=True)
def eval_run(items_path, corpus, faq, configs, provider_kind, out_dir, seed) -> None:
    items = load_eval_items(items_path or fixture_path("eval_items.jsonl"))
    docs = load_corpus(corpus or fixture_path("corpus.jsonl"))
    faqs = load_faqs(faq or fixture_path("faq.jsonl"))
    cleaned_faqs, chunks, _ = run_ingest(docs, faqs)
    embedder = HashEmbeddingProvider()
    index_set = build_index_set(cleaned_faqs, chunks, embedder)

    if provider_kind == "http":
        from .generate import HttpLlmProvider
        import os

        provider = HttpLlmProvider(
            base_url=os.environ.get("LLM_BASE_URL", ""),
            model=os.environ.get("LLM_MODEL", "gpt-4o-mini"),
            api_key=os.environ.get("LLM_API_KEY"),
        )
    else:
        provider = GroundedMockProvider()

    pipeline_configs = [PipelineConfig(mode=m.strip()) for m in configs.split(",") if m.strip()]
    report = run_eval(items, pipeline_configs, index_set, embedder, provider, seed=seed, out_dir=out_dir)
    click.echo(report.render_text())
    click.echo(f"report written to {out_dir}/")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
def serve(config_path, host, port) -> None:
    """Run the chat service."""
    import uvicorn

    from .service import EngineRuntime, create_app

    config = load_config(config_path)
    runtime = EngineRuntime(config)
    uvicorn.run(create_app(runtime), host=host, port=port, log_level="warning")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
def fixture(out_dir) -> None:
    """Copy the bundled synthetic fixture files into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [
        "corpus.jsonl",
        "faq.jsonl",
        "rules.json",
        "cutoffs.json",
        "prices.json",
        "eval_items.jsonl",
        "intent_queries.jsonl",
    ]
    for name in names:
        shutil.copy(fixture_path(name), out / name)
    click.echo(f"wrote {len(names)} fixture files to {out}")


if __name__ == "__main__":
    sys.exit(main())
