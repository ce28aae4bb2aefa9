"""Multi-turn conversation state and the cumulative user profile.

Sessions are append-only and persisted one turn per JSONL line, so the
service can restart without losing conversations. Profiles follow
newest-value-wins per slot; slots never clear on their own.
"""

from __future__ import annotations

import dataclasses
import json
import re
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .agents import ExtractedEntities, ScoreRuleTable
from .generate import count_tokens

IDLE_EXPIRY_S = 24 * 3600.0


class SessionNotFound(KeyError):
    pass


@dataclass
class UserProfile:
    province: str | None = None
    region: str | None = None
    priority_group: str | None = None
    scores: dict[str, float] = field(default_factory=dict)
    interested_programs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UserProfile":
        return cls(
            province=data.get("province"),
            region=data.get("region"),
            priority_group=data.get("priority_group"),
            scores=dict(data.get("scores", {})),
            interested_programs=list(data.get("interested_programs", [])),
        )


def update_profile(
    profile: UserProfile, entities: ExtractedEntities, rules: ScoreRuleTable
) -> UserProfile:
    """Merge extracted entities into a new profile; the old one is unchanged."""
    new = UserProfile(
        province=profile.province,
        region=profile.region,
        priority_group=profile.priority_group,
        scores=dict(profile.scores),
        interested_programs=list(profile.interested_programs),
    )
    if entities.province is not None:
        new.province = entities.province
        mapped = rules.province_region.get(entities.province)
        if mapped and entities.region is None:
            new.region = mapped
    if entities.region is not None:
        new.region = entities.region
    if entities.priority_group is not None:
        new.priority_group = entities.priority_group
    if entities.transcript_points is not None:
        new.scores["transcript"] = entities.transcript_points
    if entities.exam_points is not None:
        new.scores["exam"] = entities.exam_points
    if entities.program is not None and entities.program not in new.interested_programs:
        new.interested_programs.append(entities.program)
    return new


def profile_summary(profile: UserProfile) -> str:
    """Deterministic one-line summary injected into prompts outside the budget."""
    parts = []
    if profile.province:
        parts.append(f"province={profile.province}")
    if profile.region:
        parts.append(f"region={profile.region}")
    if profile.priority_group:
        parts.append(f"priority_group={profile.priority_group}")
    for method in sorted(profile.scores):
        parts.append(f"{method}_points={profile.scores[method]:g}")
    if profile.interested_programs:
        parts.append("programs=" + ",".join(profile.interested_programs))
    return "; ".join(parts)


@dataclass
class Turn:
    role: str  # "user" | "assistant"
    text: str
    timestamp: float
    agent: str | None = None
    citations: list[str] = field(default_factory=list)


@dataclass
class ChatSession:
    session_id: str
    created_at: float
    turns: list[Turn] = field(default_factory=list)
    profile: UserProfile = field(default_factory=UserProfile)

    def append_turn(self, turn: Turn) -> None:
        if self.turns and turn.timestamp <= self.turns[-1].timestamp:
            # Clock resolution can collapse timestamps; keep them strictly increasing.
            turn.timestamp = self.turns[-1].timestamp + 1e-6
        self.turns.append(turn)

    @property
    def last_activity(self) -> float:
        return self.turns[-1].timestamp if self.turns else self.created_at


def new_session_id() -> str:
    # 16 random bytes -> >= 128 bits of entropy.
    return secrets.token_urlsafe(16)


@dataclass
class ContextWindow:
    turns: list[Turn]
    truncated: bool = False


def context_window(session: ChatSession, budget: int = 1200) -> ContextWindow:
    """Most recent turns fitting the token budget, oldest dropped first.

    A single turn larger than the whole budget is kept, truncated from the
    front so the most recent content survives, and flagged.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    kept: list[Turn] = []
    used = 0
    for turn in reversed(session.turns):
        cost = count_tokens(turn.text).value
        if used + cost > budget:
            if not kept and cost > budget:
                tail = turn.text[-budget * 4 :]
                clipped = Turn(
                    role=turn.role,
                    text=tail,
                    timestamp=turn.timestamp,
                    agent=turn.agent,
                    citations=list(turn.citations),
                )
                return ContextWindow(turns=[clipped], truncated=True)
            break
        kept.append(turn)
        used += cost
    kept.reverse()
    return ContextWindow(turns=kept, truncated=False)


_SAFE_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")


class SessionStore:
    """In-memory sessions with append-only JSONL persistence per session.

    One in-flight request per session is enforced by per-session locks;
    distinct sessions are fully concurrent. Idle sessions expire after 24h.
    """

    def __init__(self, directory: str | Path | None = None, idle_expiry_s: float = IDLE_EXPIRY_S) -> None:
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.idle_expiry_s = idle_expiry_s
        self._sessions: dict[str, ChatSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def create(self) -> ChatSession:
        session = ChatSession(session_id=new_session_id(), created_at=time.time())
        with self._registry_lock:
            self._sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()
        return session

    def get(self, session_id: str) -> ChatSession:
        with self._registry_lock:
            session = self._sessions.get(session_id)
        if session is None:
            session = self._load(session_id)
            if session is None:
                raise SessionNotFound(session_id)
            with self._registry_lock:
                self._sessions.setdefault(session_id, session)
                self._locks.setdefault(session_id, threading.Lock())
        if time.time() - session.last_activity > self.idle_expiry_s:
            raise SessionNotFound(f"{session_id} (expired)")
        return session

    def lock(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            if session_id not in self._locks:
                raise SessionNotFound(session_id)
            return self._locks[session_id]

    def append_turn(self, session: ChatSession, turn: Turn) -> None:
        session.append_turn(turn)
        if self.directory is None:
            return
        record = {
            "role": turn.role,
            "text": turn.text,
            "timestamp": turn.timestamp,
            "agent": turn.agent,
            "citations": turn.citations,
            "profile": session.profile.to_dict(),
        }
        path = self._path(session.session_id)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def _path(self, session_id: str) -> Path:
        assert self.directory is not None
        if not _SAFE_ID_RE.match(session_id):
            raise SessionNotFound(session_id)
        return self.directory / f"{session_id}.jsonl"

    def _load(self, session_id: str) -> ChatSession | None:
        if self.directory is None or not _SAFE_ID_RE.match(session_id):
            return None
        path = self._path(session_id)
        if not path.exists():
            return None
        session = ChatSession(session_id=session_id, created_at=path.stat().st_mtime)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                record = json.loads(line)
                session.turns.append(
                    Turn(
                        role=record["role"],
                        text=record["text"],
                        timestamp=record["timestamp"],
                        agent=record.get("agent"),
                        citations=list(record.get("citations", [])),
                    )
                )
                if record.get("profile"):
                    session.profile = UserProfile.from_dict(record["profile"])
        if session.turns:
            session.created_at = min(session.created_at, session.turns[0].timestamp)
        return session
