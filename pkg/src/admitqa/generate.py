"""Grounded prompt assembly, LLM calls, and citation integrity enforcement.

Every non-refused answer must cite at least one of the passage ids it was
prompted with; answers failing that check are discarded and regenerated with
penalized decoding (lower temperature/top_p plus an explicit reminder). After
max_retries violations the caller gets a templated refusal instead, never an
uncited answer.
"""

from __future__ import annotations

import json
import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

from .retrieve import RankedPassage

CITATION_RE = re.compile(r"\[(FAQ|DOC)-[0-9]{4}\]")

SYSTEM_TEMPLATE = (
    "You are an admissions counseling assistant for a university.\n"
    "Answer ONLY from the provided passages. Do not speculate or add facts "
    "that are not in the passages.\n"
    "Cite the supporting passage ids in square brackets, for example [FAQ-0001].\n"
    'If the passages do not answer the question, reply exactly: "I don\'t know, '
    'please contact the admissions office."'
)
HEDGED_SUPPLEMENT = (
    "The question is subjective; answer in a hedged, advisory tone and make "
    "clear the final choice belongs to the applicant."
)
PENALIZED_REMINDER = "You MUST cite passage IDs."

REFUSAL_TEXT = (
    "Tôi không thể trả lời câu hỏi này từ các nguồn hiện có. "
    "Vui lòng liên hệ phòng tuyển sinh: {contact}.\n"
    "I cannot answer this question from the available sources. "
    "Please contact the admissions office: {contact}."
)
DEFAULT_CONTACT = "[ADMISSIONS CONTACT]"


class ProviderError(RuntimeError):
    """Transport-level provider failure, distinct from a content refusal."""


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: int = 350

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


PENALIZED_PARAMS = GenerationParams(temperature=0.3, top_p=0.8, max_tokens=350)


@dataclass(frozen=True)
class TokenCount:
    value: int
    estimated: bool


def count_tokens(text: str, reported: int | None = None) -> TokenCount:
    """Provider-reported usage when present, else ceil(chars / 4) flagged as estimate."""
    if reported is not None:
        return TokenCount(value=int(reported), estimated=False)
    return TokenCount(value=math.ceil(len(text) / 4), estimated=True)


@dataclass
class PromptBundle:
    system_instruction: str
    passages: list[RankedPassage]
    user_query: str
    profile_summary: str | None
    params: GenerationParams
    # prior turns as (role, text), oldest first, already budget-trimmed
    history: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 < len(self.passages) <= 2:
            raise ValueError("prompt requires 1 or 2 passages")

    @property
    def passage_ids(self) -> list[str]:
        return [p.id for p in self.passages]

    def messages(self, penalized: bool = False) -> list[dict[str, str]]:
        system = self.system_instruction
        if penalized:
            system = f"{system}\n{PENALIZED_REMINDER}"
        out = [{"role": "system", "content": system}]
        for role, text in self.history:
            out.append({"role": "assistant" if role == "assistant" else "user", "content": text})
        parts = []
        if self.profile_summary:
            parts.append(f"User profile: {self.profile_summary}")
        parts.append("Passages:")
        parts.append("\n\n".join(f"[{p.id}] {p.text}" for p in self.passages))
        parts.append(f"Question: {self.user_query}")
        out.append({"role": "user", "content": "\n\n".join(parts)})
        return out


def assemble_prompt(
    passages: Sequence[RankedPassage],
    query: str,
    profile_summary: str | None = None,
    params: GenerationParams | None = None,
    hedged: bool = False,
    history: Sequence[tuple[str, str]] = (),
) -> PromptBundle:
    """Build the fixed grounded-prompt template; byte-deterministic for fixed inputs."""
    system = SYSTEM_TEMPLATE if not hedged else f"{SYSTEM_TEMPLATE}\n{HEDGED_SUPPLEMENT}"
    return PromptBundle(
        system_instruction=system,
        passages=list(passages),
        user_query=query,
        profile_summary=profile_summary,
        params=params or GenerationParams(),
        history=list(history),
    )


@dataclass(frozen=True)
class CitationCheck:
    valid: bool
    reason: str | None
    cited: tuple[str, ...]


def extract_citations(text: str) -> list[str]:
    """All [FAQ-NNNN]/[DOC-NNNN] ids cited in the text, first-seen order."""
    seen: list[str] = []
    for m in CITATION_RE.finditer(text):
        unit_id = m.group(0)[1:-1]
        if unit_id not in seen:
            seen.append(unit_id)
    return seen


def enforce_citations(answer: str, allowed: set[str] | frozenset[str]) -> CitationCheck:
    """Valid iff the answer cites >= 1 id and every cited id is in `allowed`."""
    cited = extract_citations(answer)
    if not cited:
        return CitationCheck(False, "no citation", ())
    unknown = [c for c in cited if c not in allowed]
    if unknown:
        return CitationCheck(False, f"unknown id {unknown[0]}", tuple(cited))
    return CitationCheck(True, None, tuple(cited))


@dataclass
class Usage:
    input_tokens: int | None = None
    output_tokens: int | None = None


class ChatStream:
    """Iterator over reply tokens; `usage` is populated once exhausted."""

    def __init__(self, chunks: Iterator[str], usage: Usage | None = None) -> None:
        self._chunks = chunks
        self.usage = usage or Usage()

    def __iter__(self) -> Iterator[str]:
        return self._chunks


class LlmProvider(Protocol):
    def chat(self, messages: list[dict[str, str]], params: GenerationParams) -> ChatStream: ...


def _split_stream_chunks(text: str) -> list[str]:
    """Whitespace-preserving chunks so joined output is byte-identical."""
    return re.findall(r"\S+\s*|\s+", text)


class ScriptedLlmProvider:
    """Replays a transcript of replies keyed by call index. Thread-safe.

    Replies may be plain strings or {"text", "input_tokens", "output_tokens"}
    objects; token fields feed the usage accounting.
    """

    def __init__(self, replies: Sequence[str | dict], cycle: bool = False) -> None:
        if not replies:
            raise ValueError("transcript must contain at least one reply")
        self._replies = list(replies)
        self._cycle = cycle
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path, cycle: bool = False) -> "ScriptedLlmProvider":
        replies = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(replies, list):
            raise ValueError("transcript file must hold a JSON list of replies")
        return cls(replies, cycle=cycle)

    def chat(self, messages: list[dict[str, str]], params: GenerationParams) -> ChatStream:
        with self._lock:
            i = self.calls
            self.calls += 1
        if i >= len(self._replies):
            if not self._cycle:
                raise ProviderError(f"transcript exhausted after {len(self._replies)} replies")
            i = i % len(self._replies)
        reply = self._replies[i]
        if isinstance(reply, dict):
            text = reply["text"]
            usage = Usage(reply.get("input_tokens"), reply.get("output_tokens"))
        else:
            text, usage = reply, Usage()
        return ChatStream(iter(_split_stream_chunks(text)), usage)


class HttpLlmProvider:
    """Chat-completions wire format over HTTP with streamed event chunks."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        client=None,
    ) -> None:
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        headers = {}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def chat(self, messages: list[dict[str, str]], params: GenerationParams) -> ChatStream:
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "stream": True,
            "stream_options": {"include_usage": True},
        }
        usage = Usage()

        def _events() -> Iterator[str]:
            try:
                with self._client.stream(
                    "POST", f"{self.base_url}/chat/completions", json=payload
                ) as resp:
                    if resp.status_code != 200:
                        raise ProviderError(f"LLM endpoint returned {resp.status_code}")
                    for line in resp.iter_lines():
                        if not line.startswith("data:"):
                            continue
                        data = line[len("data:"):].strip()
                        if data == "[DONE]":
                            break
                        event = json.loads(data)
                        if event.get("usage"):
                            usage.input_tokens = event["usage"].get("prompt_tokens")
                            usage.output_tokens = event["usage"].get("completion_tokens")
                        for choice in event.get("choices", []):
                            delta = choice.get("delta", {}).get("content")
                            if delta:
                                yield delta
            except ProviderError:
                raise
            except Exception as exc:
                raise ProviderError(f"LLM transport failure: {exc}") from exc

        return ChatStream(_events(), usage)


@dataclass
class GenerationResult:
    text: str
    citations: list[str]
    attempts: int
    input_tokens: int
    output_tokens: int
    tokens_estimated: bool
    first_token_latency_ms: float
    total_latency_ms: float
    refused: bool = False
    violations: list[str] = field(default_factory=list)


def refusal_result(
    attempts: int = 0,
    contact: str = DEFAULT_CONTACT,
    input_tokens: int = 0,
    output_tokens: int = 0,
    tokens_estimated: bool = True,
    first_token_latency_ms: float = 0.0,
    total_latency_ms: float = 0.0,
    violations: Sequence[str] = (),
) -> GenerationResult:
    return GenerationResult(
        text=REFUSAL_TEXT.format(contact=contact),
        citations=[],
        attempts=max(attempts, 1),
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        tokens_estimated=tokens_estimated,
        first_token_latency_ms=first_token_latency_ms,
        total_latency_ms=total_latency_ms,
        refused=True,
        violations=list(violations),
    )


def _run_attempt(
    provider: LlmProvider,
    messages: list[dict[str, str]],
    params: GenerationParams,
    transport_retries: int = 2,
) -> tuple[str, Usage, float, float]:
    """One provider call: returns (text, usage, first_token_ms, total_ms)."""
    last_exc: Exception | None = None
    for _ in range(1 + transport_retries):
        start = time.perf_counter()
        first_token_ms: float | None = None
        parts: list[str] = []
        try:
            stream = provider.chat(messages, params)
            for chunk in stream:
                if first_token_ms is None:
                    first_token_ms = (time.perf_counter() - start) * 1000.0
                parts.append(chunk)
            total_ms = (time.perf_counter() - start) * 1000.0
            return "".join(parts), stream.usage, first_token_ms or total_ms, total_ms
        except ProviderError as exc:
            last_exc = exc
    raise ProviderError(f"provider failed after {1 + transport_retries} tries: {last_exc}")


def generate_answer(
    bundle: PromptBundle,
    provider: LlmProvider,
    max_retries: int = 2,
    contact: str = DEFAULT_CONTACT,
) -> GenerationResult:
    """Generate with citation enforcement and penalized-decoding retries.

    Attempt 1 uses the bundle params; every retry after a citation violation
    uses PENALIZED_PARAMS plus an appended citation reminder. After
    max_retries violations the refusal template is returned with refused=True
    (attempts == 1 + max_retries).
    """
    allowed = set(bundle.passage_ids)

    total_in = 0
    total_out = 0
    estimated = False
    first_token_ms = 0.0
    total_ms = 0.0
    violations: list[str] = []

    for attempt in range(1, 2 + max_retries):
        penalized = attempt > 1
        params = bundle.params if not penalized else PENALIZED_PARAMS
        messages = bundle.messages(penalized=penalized)
        text, usage, ft_ms, att_ms = _run_attempt(provider, messages, params)
        prompt_text = "".join(m["content"] for m in messages)
        in_count = count_tokens(prompt_text, usage.input_tokens)
        out_count = count_tokens(text, usage.output_tokens)
        total_in += in_count.value
        total_out += out_count.value
        estimated = estimated or in_count.estimated or out_count.estimated
        if attempt == 1:
            first_token_ms = ft_ms
        total_ms += att_ms

        check = enforce_citations(text, allowed)
        if check.valid:
            return GenerationResult(
                text=text,
                citations=list(check.cited),
                attempts=attempt,
                input_tokens=total_in,
                output_tokens=total_out,
                tokens_estimated=estimated,
                first_token_latency_ms=first_token_ms,
                total_latency_ms=total_ms,
                refused=False,
                violations=violations,
            )
        violations.append(check.reason or "violation")

    return refusal_result(
        attempts=1 + max_retries,
        contact=contact,
        input_tokens=total_in,
        output_tokens=total_out,
        tokens_estimated=estimated,
        first_token_latency_ms=first_token_ms,
        total_latency_ms=total_ms,
        violations=violations,
    )
