"""Intent routing and the four query-processing agents.

Queries are classified by a deterministic weighted-rule matcher into one of
four agents: information search, score calculation, program recommendation,
or the general hybrid-RAG fallback (forced whenever classification confidence
drops below 0.5). Entity extraction is pattern-based and never invents
values: every populated field comes from a query substring or a session
profile slot.

All numeric scoring policy (region/group bonuses, the 22.5 scaling threshold)
lives in config tables, not code.
"""

from __future__ import annotations

import json
import re
import time
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence, TYPE_CHECKING

from .generate import (
    DEFAULT_CONTACT,
    GenerationParams,
    GenerationResult,
    assemble_prompt,
    generate_answer,
    refusal_result,
)
from .retrieve import RankedPassage, RerankScorer, Retriever, rerank

if TYPE_CHECKING:
    from .session import ChatSession, UserProfile

REGIONS = ("KV1", "KV2-NT", "KV2", "KV3")
PRIORITY_GROUPS = ("PG1", "PG2", "none")
METHODS = ("exam", "transcript")


class Intent(str, Enum):
    info_search = "info_search"
    score_calc = "score_calc"
    recommend = "recommend"
    general = "general"


class QueryType(str, Enum):
    keyword_lookup = "keyword_lookup"
    entity_eligibility = "entity_eligibility"
    answer_generation = "answer_generation"
    logic_calculation = "logic_calculation"
    multiturn_personal = "multiturn_personal"
    ambiguous_subjective = "ambiguous_subjective"


@dataclass
class IntentClassification:
    intent: Intent
    query_type: QueryType
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        if self.confidence < 0.5:
            self.intent = Intent.general


@dataclass
class ExtractedEntities:
    transcript_points: float | None = None
    exam_points: float | None = None
    region: str | None = None
    priority_group: str | None = None
    province: str | None = None
    program: str | None = None
    year: int | None = None

    def is_empty(self) -> bool:
        return all(
            getattr(self, f) is None
            for f in (
                "transcript_points",
                "exam_points",
                "region",
                "priority_group",
                "province",
                "program",
                "year",
            )
        )


class TableError(ValueError):
    """A rules or cutoff table failed validation; startup must abort."""


class ClarificationNeeded(RuntimeError):
    def __init__(self, missing_fields: Sequence[str], message: str | None = None) -> None:
        self.missing_fields = list(missing_fields)
        super().__init__(message or f"missing fields: {', '.join(missing_fields)}")


class AmbiguousQuery(RuntimeError):
    def __init__(self, fld: str, values: Sequence[float]) -> None:
        self.field = fld
        self.values = list(values)
        super().__init__(f"conflicting values for {fld}: {values}")


class UnknownProgram(RuntimeError):
    def __init__(self, name: str, suggestions: Sequence[str]) -> None:
        self.name = name
        self.suggestions = list(suggestions)
        super().__init__(f"unknown program {name!r}")


class NoCutoffData(RuntimeError):
    def __init__(self, program: str, method: str) -> None:
        self.program = program
        self.method = method
        super().__init__(f"no {method} cutoff data for {program}")


@dataclass
class ScoreRuleTable:
    region_bonus: dict[str, float]
    group_bonus: dict[str, float]
    province_region: dict[str, str]
    max_total: float = 30.0
    scaling_threshold: float = 22.5

    def __post_init__(self) -> None:
        if self.scaling_threshold >= self.max_total:
            raise TableError("scaling_threshold must be below max_total")
        for region in REGIONS:
            if region not in self.region_bonus:
                raise TableError(f"region_bonus missing {region}")
        for group in PRIORITY_GROUPS:
            if group not in self.group_bonus:
                raise TableError(f"group_bonus missing {group}")
        if any(v < 0 for v in self.region_bonus.values()):
            raise TableError("region bonuses must be >= 0")
        if any(v < 0 for v in self.group_bonus.values()):
            raise TableError("group bonuses must be >= 0")
        for province, region in self.province_region.items():
            if region not in REGIONS:
                raise TableError(f"province {province!r} maps to unknown region {region!r}")


def load_rules(path: str | Path) -> ScoreRuleTable:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return ScoreRuleTable(
            region_bonus={k: float(v) for k, v in data["region_bonus"].items()},
            group_bonus={k: float(v) for k, v in data["group_bonus"].items()},
            province_region=dict(data["province_region"]),
            max_total=float(data.get("max_total", 30.0)),
            scaling_threshold=float(data.get("scaling_threshold", 22.5)),
        )
    except KeyError as exc:
        raise TableError(f"rules table missing key {exc}") from None


@dataclass
class CutoffRow:
    program_id: str
    program_name: str
    year: int
    method: str
    cutoff: float
    quota: int
    aliases: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise TableError(f"{self.program_id}: unknown method {self.method!r}")
        if not 0.0 < self.cutoff <= 30.0:
            raise TableError(f"{self.program_id}: cutoff must be in (0, 30]")


class CutoffTable:
    def __init__(self, rows: Sequence[CutoffRow]) -> None:
        seen = set()
        for row in rows:
            key = (row.program_id, row.year, row.method)
            if key in seen:
                raise TableError(f"duplicate cutoff row {key}")
            seen.add(key)
        self.rows = list(rows)

    def programs(self) -> dict[str, str]:
        """program_id -> program_name, insertion order preserved."""
        out: dict[str, str] = {}
        for row in self.rows:
            out.setdefault(row.program_id, row.program_name)
        return out

    def aliases_for(self, program_id: str) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            if row.program_id == program_id:
                for name in [row.program_name, *row.aliases]:
                    if name not in names:
                        names.append(name)
        return names

    def latest_year(self, program_id: str, method: str) -> int | None:
        years = [
            r.year for r in self.rows if r.program_id == program_id and r.method == method
        ]
        return max(years) if years else None

    def lookup(self, program_id: str, year: int, method: str) -> CutoffRow | None:
        for row in self.rows:
            if (row.program_id, row.year, row.method) == (program_id, year, method):
                return row
        return None


def load_cutoffs(path: str | Path) -> CutoffTable:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = []
    for item in data:
        try:
            rows.append(
                CutoffRow(
                    program_id=str(item["program_id"]),
                    program_name=str(item["program_name"]),
                    year=int(item["year"]),
                    method=str(item["method"]),
                    cutoff=float(item["cutoff"]),
                    quota=int(item["quota"]),
                    aliases=[str(a) for a in item.get("aliases", [])],
                )
            )
        except KeyError as exc:
            raise TableError(f"cutoff row missing key {exc}") from None
    return CutoffTable(rows)


def strip_diacritics(t: str) -> str:
    """Fold Vietnamese text to plain ASCII-ish for robust keyword matching."""
    t = t.replace("đ", "d").replace("Đ", "D")
    decomposed = unicodedata.normalize("NFD", t)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def _norm_query(q: str) -> tuple[str, str]:
    from .ingest import normalize_text

    low = normalize_text(q)
    return low, strip_diacritics(low)


# ---------------------------------------------------------------------------
# Intent classification
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"\d+(?:[.,]\d+)?")

# Keyword banks are matched against the diacritic-stripped lowercase query, so
# each entry is written accent-free and covers both VN and EN phrasings.
_SCORE_WORDS = ("diem", "points", "point", "score")
_TOTAL_ASK = (
    "tong diem",
    "tinh diem",
    "tinh ra",
    "bao nhieu diem",
    "duoc cong",
    "cong bao nhieu",
    "cong them",
    "cong diem",
    "total score",
    "total points",
    "how many points",
    "calculate my",
    "priority points",
    "bonus points",
    "diem uu tien",
    "diem xet tuyen cua",
    "my admission score",
)
_PRIORITY_WORDS = (
    "uu tien",
    "doi tuong",
    "khu vuc",
    "kv1",
    "kv2",
    "kv3",
    "priority",
    "vung nui",
    "mien nui",
)
_PASS_WORDS = (
    "co dau",
    "co do",
    "dau khong",
    "do khong",
    "dau duoc",
    "do duoc",
    "trung tuyen",
    "kha nang dau",
    "kha nang do",
    "du diem",
    "du de vao",
    "du de dau",
    "can i pass",
    "can i get into",
    "can i get in",
    "enough for",
    "enough to",
    "enough points",
    "chances of getting",
    "will i be admitted",
    "get admitted",
    "vao duoc",
)
# "co dau X khong" style with the program name in between
_PASS_RE = re.compile(r"\b(dau|do|vao duoc|trung tuyen)\b.{0,40}\bkhong\b")
_WHICH_PROGRAM = (
    "nganh nao",
    "nhung nganh nao",
    "hoc nganh gi",
    "what programs",
    "which programs",
    "which majors",
    "what majors",
)
_GENERATIVE_WORDS = (
    "gioi thieu",
    "mo ta",
    "trinh bay",
    "introduce",
    "tell me about",
    "describe",
    "overview of",
    "la nganh gi",
    "hoc nhung gi",
    "hoc gi",
    "ra truong lam gi",
    "noi dung gi",
    "explain",
)
_SUBJECTIVE_WORDS = (
    "phu hop voi",
    "phu hop cho",
    "nen chon",
    "nen hoc",
    "suitable for",
    "best for",
    "huong noi",
    "huong ngoai",
    "introvert",
    "extrovert",
    "tot nhat",
    "hay nhat",
    "co nen",
    "should i",
    "which is better",
    "dang hoc khong",
    "worth studying",
    "vat va",
    "tot hon",
    "hay hon",
    "co tot khong",
)
_CATALOG_WORDS = (
    "hoc phi",
    "tuition",
    "ky tuc xa",
    "dormitory",
    "dorm",
    "hoc bong",
    "scholarship",
    "diem chuan",
    "cutoff",
    "cut-off",
    "chi tieu",
    "quota",
    "nganh",
    "program",
    "major",
    "dao tao",
    "campus",
    "co so",
    "ho so",
    "thu tuc",
    "dang ky",
    "apply",
    "application",
    "deadline",
    "han nop",
    "xet tuyen",
    "admission",
    "tuyen sinh",
    "lien he",
    "contact",
    "thu vien",
    "library",
    "hoc bo tuc",
    "lich hoc",
    "khai giang",
    "bus",
    "xe buyt",
    "bao hiem",
    "insurance",
    "viec lam",
    "job",
    "internship",
    "thuc tap",
    "english",
    "tieng anh",
    "address",
    "dia chi",
    "medical",
    "nganh y",
)
_INTERROGATIVE_WORDS = (
    "?",
    "la gi",
    "bao nhieu",
    "nhu the nao",
    "the nao",
    "khi nao",
    "bao gio",
    "o dau",
    "co nhung",
    "co khong",
    "khong",
    "what",
    "how",
    "when",
    "where",
    "which",
    "who",
    "does",
    "do ",
    "is ",
    "are ",
    "can ",
)
_FOLLOWUP_MARKERS = (
    "vay thi",
    "vay toi",
    "vay em",
    "the thi",
    "con toi",
    "truong hop cua toi",
    "cua toi thi",
    "so then",
    "then how",
    "what about me",
    "in my case",
    "voi diem cua",
    "voi diem do",
    "nhu toi da noi",
    "nhu em da noi",
    "as i said",
    "as i mentioned",
)
_FOLLOWUP_RE = re.compile(r"^(vay|the thi|then|so then)\b")
_PERSONAL_MARKERS = (
    "toi la",
    "em la",
    "minh la",
    "toi den tu",
    "em den tu",
    "toi o",
    "em o",
    "que toi",
    "que em",
    "que o",
    "i am from",
    "i'm from",
    "i come from",
    "my hometown",
)


def _hits(folded: str, bank: Sequence[str]) -> int:
    return sum(1 for w in bank if w in folded)


@dataclass
class IntentClassifier:
    """Weighted keyword/pattern scorer over the four intents.

    Per-intent evidence weights are summed and capped at 1.0; the best intent
    wins (priority order score_calc > recommend > info_search on exact ties)
    and its capped score is the confidence. An LLM classifier can be plugged
    behind the same interface.
    """

    def classify(self, query: str, profile: "UserProfile | None" = None) -> IntentClassification:
        low, folded = _norm_query(query)
        has_number = bool(_NUM_RE.search(folded))
        has_points_number = bool(
            re.search(r"(?<!\d)\d{1,2}(?:[.,]\d{1,2})?(?!\d)\s*(?:diem|points?)", folded)
            or re.search(r"(?:diem|duoc|being|have|got|points?)\s*(?:cua\s+\w+\s+)?(?:la\s+)?(?<!\d)\d{1,2}(?![\d])", folded)
        )
        profile_has_points = bool(profile is not None and profile.scores)

        score_kw = _hits(folded, _SCORE_WORDS) > 0
        total_ask = _hits(folded, _TOTAL_ASK) > 0
        priority_kw = _hits(folded, _PRIORITY_WORDS) > 0
        pass_kw = _hits(folded, _PASS_WORDS) > 0 or bool(_PASS_RE.search(folded))
        which_program = _hits(folded, _WHICH_PROGRAM) > 0
        generative = _hits(folded, _GENERATIVE_WORDS) > 0
        subjective = _hits(folded, _SUBJECTIVE_WORDS) > 0
        catalog = _hits(folded, _CATALOG_WORDS) > 0
        interrogative = _hits(folded, _INTERROGATIVE_WORDS) > 0
        followup = _hits(folded, _FOLLOWUP_MARKERS) > 0 or bool(_FOLLOWUP_RE.match(folded))
        personal = _hits(folded, _PERSONAL_MARKERS) > 0

        scores = {intent: 0.0 for intent in Intent}

        if total_ask:
            scores[Intent.score_calc] += 0.55
        if priority_kw and (score_kw or total_ask):
            scores[Intent.score_calc] += 0.30
        if has_points_number and score_kw and not pass_kw:
            scores[Intent.score_calc] += 0.20
        if followup and priority_kw:
            scores[Intent.score_calc] += 0.25

        if pass_kw and (has_points_number or profile_has_points or followup):
            scores[Intent.recommend] += 0.75
        elif pass_kw:
            scores[Intent.recommend] += 0.55
        if which_program and (has_points_number or profile_has_points):
            scores[Intent.recommend] += 0.70
        if pass_kw and which_program:
            scores[Intent.recommend] += 0.20

        if catalog and interrogative and not pass_kw and not total_ask:
            scores[Intent.info_search] += 0.70
        elif catalog and not pass_kw and not total_ask:
            scores[Intent.info_search] += 0.45
        if generative:
            scores[Intent.info_search] += 0.50
        if generative and catalog:
            scores[Intent.info_search] += 0.20
        if subjective:
            # Subjective queries are hedged through the general agent.
            scores[Intent.info_search] -= 0.35
            scores[Intent.recommend] -= 0.25

        for intent in scores:
            scores[intent] = min(1.0, max(0.0, scores[intent]))

        priority = [Intent.score_calc, Intent.recommend, Intent.info_search, Intent.general]
        best = max(priority, key=lambda i: scores[i])
        confidence = scores[best]
        if confidence < 0.5:
            best, confidence = Intent.general, min(confidence, 0.49)

        query_type = self._query_type(
            best,
            subjective=subjective,
            generative=generative,
            personal=personal or followup,
            pass_kw=pass_kw,
            total_ask=total_ask or (priority_kw and score_kw),
        )
        return IntentClassification(intent=best, query_type=query_type, confidence=confidence)

    @staticmethod
    def _query_type(
        intent: Intent,
        subjective: bool,
        generative: bool,
        personal: bool,
        pass_kw: bool,
        total_ask: bool,
    ) -> QueryType:
        if subjective:
            return QueryType.ambiguous_subjective
        if personal:
            return QueryType.multiturn_personal
        if intent == Intent.score_calc or total_ask:
            return QueryType.logic_calculation
        if intent == Intent.recommend or pass_kw:
            return QueryType.entity_eligibility
        if generative:
            return QueryType.answer_generation
        return QueryType.keyword_lookup


def classify_query(query: str, profile: "UserProfile | None" = None) -> IntentClassification:
    return IntentClassifier().classify(query, profile)


# ---------------------------------------------------------------------------
# Entity extraction
# ---------------------------------------------------------------------------

_POINTS_AFTER_RE = re.compile(
    r"(?<!\d)(\d{1,2}(?:[.,]\d{1,2})?)(?!\d)\s*(?:diem|points?)(?:\s+(hoc ba|transcript|thi|exam|thpt|xet tuyen))?"
)
_POINTS_BEFORE_RE = re.compile(
    r"(?:diem|points?)\s*(?:(hoc ba|transcript|thi|exam|thpt)\s*)?(?:la|la khoang|:|=)?\s*(?<!\d)(\d{1,2}(?:[.,]\d{1,2})?)(?!\d)"
)
_REGION_PATTERNS = (
    (re.compile(r"\bkv\s?2\s?-?\s?nt\b|khu vuc 2\s?(?:nong thon|-\s?nt)"), "KV2-NT"),
    (re.compile(r"\bkv\s?1\b|khu vuc 1"), "KV1"),
    (re.compile(r"\bkv\s?2\b|khu vuc 2"), "KV2"),
    (re.compile(r"\bkv\s?3\b|khu vuc 3"), "KV3"),
)
_GROUP_PATTERNS = (
    (re.compile(r"doi tuong\s*0?1\b|nhom uu tien\s*0?1\b|priority group\s*0?1\b|\buu tien 1\b|\bpg\s?1\b"), "PG1"),
    (re.compile(r"doi tuong\s*0?2\b|nhom uu tien\s*0?2\b|priority group\s*0?2\b|\buu tien 2\b|\bpg\s?2\b"), "PG2"),
)
_YEAR_RE = re.compile(r"\b(20[0-9]{2})\b")
_TRANSCRIPT_HINTS = ("hoc ba", "transcript")
_EXAM_HINTS = ("thi", "exam", "thpt")


def _parse_number(raw: str) -> float:
    return float(raw.replace(",", "."))


@dataclass
class EntityExtractor:
    """Pattern extraction of admission entities, backfilled from the profile."""

    rules: ScoreRuleTable
    cutoffs: CutoffTable

    def extract(self, query: str, profile: "UserProfile | None" = None) -> ExtractedEntities:
        low, folded = _norm_query(query)
        ent = ExtractedEntities()

        transcript_claims: list[float] = []
        exam_claims: list[float] = []
        spans: list[tuple[int, int]] = []
        for m in _POINTS_AFTER_RE.finditer(folded):
            value, hint = _parse_number(m.group(1)), (m.group(2) or "")
            self._bind_points(value, hint, folded, m.start(), transcript_claims, exam_claims)
            spans.append(m.span())
        for m in _POINTS_BEFORE_RE.finditer(folded):
            if any(s <= m.start() < e for s, e in spans):
                continue
            hint = m.group(1) or ""
            value = _parse_number(m.group(2))
            self._bind_points(value, hint, folded, m.start(), transcript_claims, exam_claims)

        for name, claims in (("transcript_points", transcript_claims), ("exam_points", exam_claims)):
            distinct = sorted(set(claims))
            if len(distinct) > 1:
                raise AmbiguousQuery(name, distinct)
            if distinct:
                setattr(ent, name, distinct[0])

        for pattern, region in _REGION_PATTERNS:
            if pattern.search(folded):
                ent.region = region
                break
        for pattern, group in _GROUP_PATTERNS:
            if pattern.search(folded):
                ent.priority_group = group
                break

        for province, region in self.rules.province_region.items():
            if strip_diacritics(province).lower() in folded:
                ent.province = province
                if ent.region is None:
                    ent.region = region
                break

        year_m = _YEAR_RE.search(folded)
        if year_m:
            ent.year = int(year_m.group(1))

        ent.program = self._match_program(folded)

        if profile is not None:
            if ent.province is None and profile.province:
                ent.province = profile.province
            if ent.region is None and profile.region:
                ent.region = profile.region
            if ent.priority_group is None and profile.priority_group:
                ent.priority_group = profile.priority_group
            if ent.transcript_points is None and "transcript" in profile.scores:
                ent.transcript_points = profile.scores["transcript"]
            if ent.exam_points is None and "exam" in profile.scores:
                ent.exam_points = profile.scores["exam"]
        return ent

    @staticmethod
    def _bind_points(
        value: float,
        hint: str,
        folded: str,
        pos: int,
        transcript_claims: list[float],
        exam_claims: list[float],
    ) -> None:
        if not 0.0 <= value <= 30.0:
            return
        window = folded[max(0, pos - 24) : pos + 32]
        if any(h in hint or h in window for h in _TRANSCRIPT_HINTS):
            transcript_claims.append(value)
        elif any(h in hint or h in window for h in _EXAM_HINTS):
            exam_claims.append(value)
        else:
            # Bare "N points" defaults to the national exam method.
            exam_claims.append(value)

    def _match_program(self, folded: str) -> str | None:
        """Catalog match: program code, then alias containment, then edit distance <= 2."""
        padded = f" {' '.join(folded.split())} "
        for program_id in self.cutoffs.programs():
            if f" {program_id} " in padded:
                return program_id
        best: str | None = None
        best_len = 0
        for program_id in self.cutoffs.programs():
            for alias in self.cutoffs.aliases_for(program_id):
                alias_folded = strip_diacritics(alias).lower().strip()
                if not alias_folded:
                    continue
                if alias_folded in folded and len(alias_folded) > best_len:
                    best, best_len = program_id, len(alias_folded)
        if best:
            return best

        query_tokens = folded.split()
        for program_id in self.cutoffs.programs():
            for alias in self.cutoffs.aliases_for(program_id):
                alias_folded = strip_diacritics(alias).lower().strip()
                n = len(alias_folded.split())
                if n < 2:
                    continue  # single short aliases are too noisy for fuzzy match
                for width in (n, n + 1):
                    for i in range(0, max(0, len(query_tokens) - width + 1)):
                        window = " ".join(query_tokens[i : i + width])
                        if _edit_distance_le(alias_folded, window, 2):
                            return program_id
        return None


def _edit_distance_le(a: str, b: str, limit: int) -> bool:
    if abs(len(a) - len(b)) > limit:
        return False
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        row_min = i
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
            row_min = min(row_min, cur[j])
        if row_min > limit:
            return False
        prev = cur
    return prev[-1] <= limit


def program_suggestions(name: str, cutoffs: CutoffTable, limit: int = 3) -> list[str]:
    folded = strip_diacritics(name).lower()
    ranked = sorted(
        cutoffs.programs().items(),
        key=lambda kv: (_token_overlap(folded, strip_diacritics(kv[1]).lower()), kv[0]),
        reverse=True,
    )
    return [name for _, name in ranked[:limit]]


def _token_overlap(a: str, b: str) -> int:
    return len(set(a.split()) & set(b.split()))


# ---------------------------------------------------------------------------
# Score calculation and recommendation
# ---------------------------------------------------------------------------


@dataclass
class ScoreBreakdown:
    base: float
    method: str
    region: str
    priority_group: str
    region_bonus: float
    group_bonus: float
    scaling_factor: float
    total: float


def compute_admission_score(
    entities: ExtractedEntities, rules: ScoreRuleTable
) -> ScoreBreakdown:
    """Base points plus priority bonuses, scaled down near the 30-point cap.

    raw_bonus = region_bonus + group_bonus
    factor    = 1                                   if base < threshold
                (max - base) / (max - threshold)    otherwise
    total     = min(max, base + raw_bonus * factor)
    """
    if entities.exam_points is not None:
        base, method = entities.exam_points, "exam"
    elif entities.transcript_points is not None:
        base, method = entities.transcript_points, "transcript"
    else:
        raise ClarificationNeeded(["points"], "no transcript or exam points provided")
    if not 0.0 <= base <= rules.max_total:
        raise ValueError(f"base points {base} outside [0, {rules.max_total}]")

    region = entities.region or "KV3"
    group = entities.priority_group or "none"
    region_bonus = rules.region_bonus[region]
    group_bonus = rules.group_bonus[group]
    if base < rules.scaling_threshold:
        factor = 1.0
    else:
        factor = (rules.max_total - base) / (rules.max_total - rules.scaling_threshold)
    total = min(rules.max_total, base + (region_bonus + group_bonus) * factor)
    return ScoreBreakdown(
        base=base,
        method=method,
        region=region,
        priority_group=group,
        region_bonus=region_bonus,
        group_bonus=group_bonus,
        scaling_factor=factor,
        total=total,
    )


CUTOFF_DISCLAIMER = (
    "Lưu ý: điểm chuẩn các năm trước chỉ mang tính tham khảo. "
    "Prior-year cutoffs are indicative only."
)


@dataclass
class RecommendationRow:
    program_id: str
    program_name: str
    year: int
    method: str
    cutoff: float
    margin: float
    verdict: str  # pass | borderline | fail


def _verdict(margin: float) -> str:
    if margin >= 0.5:
        return "pass"
    if abs(margin) < 0.5:
        return "borderline"
    return "fail"


def recommend_programs(
    entities: ExtractedEntities,
    cutoffs: CutoffTable,
    rules: ScoreRuleTable,
) -> list[RecommendationRow]:
    """Eligibility verdicts against the latest-year cutoff rows.

    Named program: that program's latest-year row for the applicant's method,
    any verdict. No program named: all non-fail programs sorted by margin
    descending. Margin band +/-0.5 marks borderline.
    """
    breakdown = compute_admission_score(entities, rules)
    if not cutoffs.rows:
        raise TableError("cutoff table is empty")
    method = breakdown.method

    def row_for(program_id: str) -> RecommendationRow | None:
        year = entities.year or cutoffs.latest_year(program_id, method)
        if year is None:
            return None
        row = cutoffs.lookup(program_id, year, method)
        if row is None:
            return None
        margin = breakdown.total - row.cutoff
        return RecommendationRow(
            program_id=row.program_id,
            program_name=row.program_name,
            year=row.year,
            method=row.method,
            cutoff=row.cutoff,
            margin=margin,
            verdict=_verdict(margin),
        )

    if entities.program is not None:
        if entities.program not in cutoffs.programs():
            raise UnknownProgram(
                entities.program, program_suggestions(entities.program, cutoffs)
            )
        row = row_for(entities.program)
        if row is None:
            raise NoCutoffData(entities.program, method)
        return [row]

    rows = [r for pid in cutoffs.programs() if (r := row_for(pid)) is not None]
    rows = [r for r in rows if r.verdict != "fail"]
    rows.sort(key=lambda r: (-r.margin, r.program_id))
    return rows


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------


@dataclass
class AgentOutcome:
    agent: Intent
    query_type: QueryType
    confidence: float
    answer: str
    citations: list[str] = field(default_factory=list)
    refused: bool = False
    needs_clarification: bool = False
    missing_fields: list[str] = field(default_factory=list)
    evidence: dict = field(default_factory=dict)
    input_tokens: int = 0
    output_tokens: int = 0
    tokens_estimated: bool = True
    first_token_ms: float = 0.0
    total_ms: float = 0.0
    attempts: int = 1
    degraded: bool = False


def render_score_answer(breakdown: ScoreBreakdown, rules: ScoreRuleTable) -> str:
    lines = [
        f"Điểm {('thi' if breakdown.method == 'exam' else 'học bạ')} của bạn: {breakdown.base:g}.",
        f"Khu vực {breakdown.region}: +{breakdown.region_bonus:g} điểm; "
        f"đối tượng {breakdown.priority_group}: +{breakdown.group_bonus:g} điểm.",
    ]
    if breakdown.scaling_factor < 1.0:
        lines.append(
            f"Do điểm trên {rules.scaling_threshold:g}, điểm ưu tiên được nhân hệ số "
            f"{breakdown.scaling_factor:.4f} theo quy định."
        )
    lines.append(f"Tổng điểm xét tuyển: {breakdown.total:.2f}/{rules.max_total:g}.")
    return "\n".join(lines)


def render_recommendation_answer(rows: Sequence[RecommendationRow], total: float) -> str:
    verdict_vn = {"pass": "đủ điểm", "borderline": "sát ngưỡng", "fail": "chưa đủ điểm"}
    lines = [f"Với tổng điểm {total:.2f}:"]
    for row in rows:
        lines.append(
            f"- {row.program_name} ({row.program_id}), năm {row.year}, "
            f"điểm chuẩn {row.cutoff:g} ({row.method}): {verdict_vn[row.verdict]} "
            f"(chênh {row.margin:+.2f})."
        )
    if not rows:
        lines.append("- Không có ngành nào đạt ngưỡng với mức điểm này.")
    lines.append(CUTOFF_DISCLAIMER)
    return "\n".join(lines)


@dataclass
class RouterConfig:
    k_dense: int = 15
    k_keyword: int = 15
    keep: int = 2
    faq_threshold: float = 0.9
    max_retries: int = 2
    min_passage_relevance: float = 0.0  # passages must score strictly above this
    context_budget: int = 1200  # token budget for prior turns in the prompt
    contact: str = DEFAULT_CONTACT
    params: GenerationParams = field(default_factory=GenerationParams)


class Router:
    """Dispatches each query to exactly one agent and runs it end to end."""

    def __init__(
        self,
        retriever: Retriever,
        provider,
        scorer: RerankScorer,
        rules: ScoreRuleTable,
        cutoffs: CutoffTable,
        config: RouterConfig | None = None,
        classifier: IntentClassifier | None = None,
    ) -> None:
        self.retriever = retriever
        self.provider = provider
        self.scorer = scorer
        self.rules = rules
        self.cutoffs = cutoffs
        self.config = config or RouterConfig()
        self.classifier = classifier or IntentClassifier()
        self.extractor = EntityExtractor(rules=rules, cutoffs=cutoffs)

    def route(self, query: str, session: "ChatSession") -> AgentOutcome:
        from .session import update_profile

        started = time.perf_counter()
        cls = self.classifier.classify(query, session.profile)
        try:
            entities = self.extractor.extract(query, session.profile)
        except AmbiguousQuery as exc:
            return self._finish(
                AgentOutcome(
                    agent=cls.intent,
                    query_type=cls.query_type,
                    confidence=cls.confidence,
                    answer=(
                        "Bạn đã nêu nhiều mức điểm khác nhau "
                        f"({', '.join(f'{v:g}' for v in exc.values)}). "
                        "Vui lòng xác nhận lại mức điểm chính xác."
                    ),
                    needs_clarification=True,
                    missing_fields=[exc.field],
                ),
                started,
            )
        session.profile = update_profile(session.profile, entities, self.rules)

        if cls.intent == Intent.score_calc:
            outcome = self._score_calc(cls, entities)
        elif cls.intent == Intent.recommend:
            outcome = self._recommend(cls, entities)
        elif cls.intent == Intent.info_search:
            outcome = self._info_search(cls, query, session, try_faq=True)
        else:
            outcome = self._info_search(
                cls, query, session, try_faq=False,
                hedged=cls.query_type == QueryType.ambiguous_subjective,
            )
        return self._finish(outcome, started)

    @staticmethod
    def _finish(outcome: AgentOutcome, started: float) -> AgentOutcome:
        elapsed = (time.perf_counter() - started) * 1000.0
        outcome.total_ms = max(outcome.total_ms, elapsed)
        if outcome.first_token_ms == 0.0:
            outcome.first_token_ms = outcome.total_ms
        return outcome

    def _score_calc(self, cls: IntentClassification, entities: ExtractedEntities) -> AgentOutcome:
        missing = []
        if entities.exam_points is None and entities.transcript_points is None:
            missing.append("points")
        if entities.region is None:
            # The bonus depends on the region, so ask rather than silently
            # assume KV3 for a user who did not state one.
            missing.append("region")
        if missing:
            return AgentOutcome(
                agent=Intent.score_calc,
                query_type=cls.query_type,
                confidence=cls.confidence,
                answer=(
                    "Để tính điểm xét tuyển, vui lòng cho biết thêm: "
                    + ", ".join(_FIELD_LABELS[f] for f in missing)
                    + "."
                ),
                needs_clarification=True,
                missing_fields=missing,
            )
        breakdown = compute_admission_score(entities, self.rules)
        answer = render_score_answer(breakdown, self.rules)
        return AgentOutcome(
            agent=Intent.score_calc,
            query_type=cls.query_type,
            confidence=cls.confidence,
            answer=answer,
            evidence={"breakdown": breakdown.__dict__},
            output_tokens=len(answer) // 4,
        )

    def _recommend(self, cls: IntentClassification, entities: ExtractedEntities) -> AgentOutcome:
        if entities.exam_points is None and entities.transcript_points is None:
            return AgentOutcome(
                agent=Intent.recommend,
                query_type=cls.query_type,
                confidence=cls.confidence,
                answer="Vui lòng cho biết mức điểm của bạn để tư vấn ngành phù hợp.",
                needs_clarification=True,
                missing_fields=["points"],
            )
        breakdown = compute_admission_score(entities, self.rules)
        try:
            rows = recommend_programs(entities, self.cutoffs, self.rules)
        except UnknownProgram as exc:
            return AgentOutcome(
                agent=Intent.recommend,
                query_type=cls.query_type,
                confidence=cls.confidence,
                answer=(
                    "Không tìm thấy ngành bạn nêu. Có phải bạn muốn hỏi: "
                    + "; ".join(exc.suggestions)
                    + "?"
                ),
                needs_clarification=True,
                missing_fields=["program"],
            )
        except NoCutoffData as exc:
            return AgentOutcome(
                agent=Intent.recommend,
                query_type=cls.query_type,
                confidence=cls.confidence,
                answer=(
                    f"Hiện chưa có dữ liệu điểm chuẩn theo phương thức {exc.method} "
                    f"cho ngành này. Vui lòng liên hệ phòng tuyển sinh."
                ),
                evidence={"data_gap": {"program": exc.program, "method": exc.method}},
            )
        answer = render_recommendation_answer(rows, breakdown.total)
        return AgentOutcome(
            agent=Intent.recommend,
            query_type=cls.query_type,
            confidence=cls.confidence,
            answer=answer,
            evidence={
                "breakdown": breakdown.__dict__,
                "rows": [r.__dict__ for r in rows],
            },
            output_tokens=len(answer) // 4,
        )

    def _info_search(
        self,
        cls: IntentClassification,
        query: str,
        session: "ChatSession",
        try_faq: bool,
        hedged: bool = False,
    ) -> AgentOutcome:
        from .session import context_window, profile_summary

        if try_faq:
            faq = self.retriever.faq_direct_match(query, threshold=self.config.faq_threshold)
            if faq is not None:
                answer = f"{faq.answer} [{faq.faq_id}]"
                return AgentOutcome(
                    agent=cls.intent,
                    query_type=cls.query_type,
                    confidence=cls.confidence,
                    answer=answer,
                    citations=[faq.faq_id],
                    evidence={"faq_direct": faq.faq_id},
                    output_tokens=len(answer) // 4,
                )

        pool = self.retriever.hybrid(
            query, k_dense=self.config.k_dense, k_keyword=self.config.k_keyword
        )
        if not pool:
            return self._refusal(cls)
        outcome = rerank(query, pool, self.scorer, keep=self.config.keep)
        passages = [
            p for p in outcome.passages if p.relevance > self.config.min_passage_relevance
        ]
        if not passages:
            return self._refusal(cls, degraded=outcome.degraded)

        window = context_window(session, budget=self.config.context_budget)
        bundle = assemble_prompt(
            passages,
            query,
            profile_summary=profile_summary(session.profile) or None,
            params=self.config.params,
            hedged=hedged,
            history=[(t.role, t.text) for t in window.turns],
        )
        result = generate_answer(
            bundle, self.provider, max_retries=self.config.max_retries,
            contact=self.config.contact,
        )
        return AgentOutcome(
            agent=cls.intent,
            query_type=cls.query_type,
            confidence=cls.confidence,
            answer=result.text,
            citations=result.citations,
            refused=result.refused,
            evidence={"passages": [p.id for p in passages]},
            input_tokens=result.input_tokens,
            output_tokens=result.output_tokens,
            tokens_estimated=result.tokens_estimated,
            first_token_ms=result.first_token_latency_ms,
            total_ms=result.total_latency_ms,
            attempts=result.attempts,
            degraded=outcome.degraded,
        )

    def _refusal(self, cls: IntentClassification, degraded: bool = False) -> AgentOutcome:
        result: GenerationResult = refusal_result(contact=self.config.contact)
        return AgentOutcome(
            agent=cls.intent,
            query_type=cls.query_type,
            confidence=cls.confidence,
            answer=result.text,
            refused=True,
            degraded=degraded,
        )


_FIELD_LABELS = {
    "points": "mức điểm (học bạ hoặc thi THPT)",
    "region": "khu vực ưu tiên (KV1, KV2-NT, KV2, KV3)",
    "program": "tên ngành",
}
