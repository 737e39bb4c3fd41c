"""Agent roles over the gateway.

Four cooperating roles turn a prompt and an image into auditable evidence:
expectation extraction (prompt only, never sees the image), question
formulation (one expectation at a time), visual perception (image plus a
single question, never sees the prompt), and reasoned judgment over the
merged facts. A fifth role scores in one naive step for comparison runs.

System prompts live as versioned template files next to this module, one
per role, with machine-readable response schemas alongside. Placeholders
use string.Template syntax ($round, plus the rubric constants in the
single-step template).
"""
from __future__ import annotations

import copy
import json
import logging
import string
from dataclasses import dataclass, field
from hashlib import sha256
from importlib import resources
from typing import Mapping, Sequence

import re

from .errors import StageError
from .gateway import (
    ChatRequest,
    EndpointConfig,
    Gateway,
    ImagePart,
    SchemaCheckFailed,
    SchemaSpec,
    TextPart,
)
from .scoring import (
    DEFAULT_RUBRIC,
    Importance,
    LayerScores,
    LedgerEntry,
    QuestionType,
    RubricConstants,
    aggregate,
)

logger = logging.getLogger("worldcheck.agents")

SCHEMA_EXPECTATIONS = "expectations"
SCHEMA_QUESTIONS = "questions"
SCHEMA_PERCEPTION = "perception"
SCHEMA_JUDGMENT = "judgment"
SCHEMA_DIRECT = "direct_judgment"

ALL_TEMPLATES = (
    SCHEMA_EXPECTATIONS,
    SCHEMA_QUESTIONS,
    SCHEMA_PERCEPTION,
    SCHEMA_JUDGMENT,
    SCHEMA_DIRECT,
)

# Heuristic: an expectation that is nothing but "<subject> is <verb>ing"
# names a process, not a visible trace, and cannot be checked in a single
# frame. Deliberately narrow; prose that continues after the verb passes.
_BARE_PROCESS_RE = re.compile(
    r"^\s*(?:(?:the|a|an|some|this|that|these|those)\s+)?"
    r"[\w' -]+?\s+(?:is|are|was|were)\s+\w+ing\s*[.!]?\s*$",
    re.IGNORECASE,
)


def is_bare_process_claim(text: str) -> bool:
    return bool(_BARE_PROCESS_RE.match(text))


@dataclass(frozen=True)
class Expectation:
    """One atomic, image-verifiable claim the prompt implies."""

    id: str
    text: str
    rationale: str
    importance: Importance

    def __post_init__(self) -> None:
        object.__setattr__(self, "importance", Importance.parse(self.importance))
        if not self.id:
            raise ValueError("expectation id must be non-empty")
        if not self.text or not self.text.strip():
            raise ValueError("expectation text must be non-blank")
        if is_bare_process_claim(self.text):
            raise ValueError(
                f"expectation {self.text!r} is a bare process claim;"
                " phrase it as a static visible trace"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "rationale": self.rationale,
            "importance": int(self.importance),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Expectation":
        return cls(
            id=data["id"],
            text=data["text"],
            rationale=data.get("rationale", ""),
            importance=Importance.parse(data["importance"]),
        )


@dataclass(frozen=True)
class VisualQuestion:
    """A single typed question, indexed within its expectation."""

    expectation_id: str
    index: int
    qtype: QuestionType
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "qtype", QuestionType(self.qtype))
        if not self.text or not self.text.strip():
            raise ValueError("question text must be non-blank")
        if self.index < 0:
            raise ValueError("question index must be >= 0")

    def to_dict(self) -> dict:
        return {
            "expectation_id": self.expectation_id,
            "index": self.index,
            "qtype": self.qtype.value,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "VisualQuestion":
        return cls(
            expectation_id=data["expectation_id"],
            index=int(data["index"]),
            qtype=QuestionType(data["qtype"]),
            text=data["text"],
        )


@dataclass(frozen=True)
class Answer:
    """The perceiver's reply to one question; confidence already in [0, 1]."""

    expectation_id: str
    question_index: int
    question: VisualQuestion
    detail: str
    verdict: bool
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence!r} outside [0, 1]")
        if (self.expectation_id, self.question_index) != (
            self.question.expectation_id,
            self.question.index,
        ):
            raise ValueError("answer reference does not match its question")

    def to_dict(self) -> dict:
        return {
            "expectation_id": self.expectation_id,
            "question_index": self.question_index,
            "question": self.question.to_dict(),
            "detail": self.detail,
            "verdict": self.verdict,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Answer":
        return cls(
            expectation_id=data["expectation_id"],
            question_index=int(data["question_index"]),
            question=VisualQuestion.from_dict(data["question"]),
            detail=data.get("detail", ""),
            verdict=bool(data["verdict"]),
            confidence=float(data["confidence"]),
        )


@dataclass(frozen=True)
class FactBundle:
    """All answers for one expectation, merged for the judge."""

    expectation: Expectation
    answers: tuple[Answer, ...]
    image_ref: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise ValueError(
                f"expectation {self.expectation.id} has no answers to merge"
            )
        for answer in self.answers:
            if answer.expectation_id != self.expectation.id:
                raise ValueError(
                    f"answer for {answer.expectation_id} mixed into bundle"
                    f" for {self.expectation.id}"
                )

    def to_dict(self) -> dict:
        return {
            "expectation": self.expectation.to_dict(),
            "answers": [a.to_dict() for a in self.answers],
            "image_ref": self.image_ref,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FactBundle":
        return cls(
            expectation=Expectation.from_dict(data["expectation"]),
            answers=tuple(Answer.from_dict(a) for a in data["answers"]),
            image_ref=data.get("image_ref", ""),
        )


@dataclass(frozen=True)
class NuanceItem:
    label: str
    value: float

    def to_dict(self) -> dict:
        return {"label": self.label, "value": self.value}


@dataclass(frozen=True)
class FulfillmentOverride:
    """Judge-issued correction of one perception verdict."""

    expectation_id: str
    question_index: int
    verdict: bool
    justification: str

    def __post_init__(self) -> None:
        if not self.justification or not self.justification.strip():
            raise ValueError("override requires a justification")

    def to_dict(self) -> dict:
        return {
            "expectation_id": self.expectation_id,
            "question_index": self.question_index,
            "verdict": self.verdict,
            "justification": self.justification,
        }


@dataclass(frozen=True)
class NuanceAssessment:
    """The judge's itemized output; never carries a scalar score."""

    foundational: tuple[NuanceItem, ...]
    bonuses: tuple[NuanceItem, ...]
    penalties: tuple[NuanceItem, ...]
    fulfillment_overrides: tuple[FulfillmentOverride, ...] = ()
    thinking_process: str = ""

    def __post_init__(self) -> None:
        for name in ("foundational", "bonuses", "penalties", "fulfillment_overrides"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.thinking_process or not self.thinking_process.strip():
            raise ValueError("assessment requires a thinking_process")

    def to_dict(self) -> dict:
        return {
            "foundational": [i.to_dict() for i in self.foundational],
            "bonuses": [i.to_dict() for i in self.bonuses],
            "penalties": [i.to_dict() for i in self.penalties],
            "fulfillment_overrides": [o.to_dict() for o in self.fulfillment_overrides],
            "thinking_process": self.thinking_process,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NuanceAssessment":
        return cls(
            foundational=tuple(
                NuanceItem(i["label"], float(i["value"])) for i in data.get("foundational", ())
            ),
            bonuses=tuple(
                NuanceItem(i["label"], float(i["value"])) for i in data.get("bonuses", ())
            ),
            penalties=tuple(
                NuanceItem(i["label"], float(i["value"])) for i in data.get("penalties", ())
            ),
            fulfillment_overrides=tuple(
                FulfillmentOverride(
                    expectation_id=o["expectation_id"],
                    question_index=int(o["question_index"]),
                    verdict=bool(o["verdict"]),
                    justification=o["justification"],
                )
                for o in data.get("fulfillment_overrides", ())
            ),
            thinking_process=data["thinking_process"],
        )


_template_cache: dict[str, str] = {}
_schema_cache: dict[str, dict] = {}


def _templates_dir():
    return resources.files(__package__) / "templates"


def template_text(name: str) -> str:
    if name not in _template_cache:
        _template_cache[name] = (_templates_dir() / f"{name}.txt").read_text(
            encoding="utf-8"
        )
    return _template_cache[name]


def load_schema(name: str) -> dict:
    if name not in _schema_cache:
        _schema_cache[name] = json.loads(
            (_templates_dir() / f"{name}.schema.json").read_text(encoding="utf-8")
        )
    return copy.deepcopy(_schema_cache[name])


def template_versions() -> dict[str, str]:
    """Content hash per template and schema file, pinned into run manifests."""
    versions: dict[str, str] = {}
    for name in ALL_TEMPLATES:
        for suffix in (".txt", ".schema.json"):
            path = _templates_dir() / f"{name}{suffix}"
            versions[f"{name}{suffix}"] = sha256(path.read_bytes()).hexdigest()
    return versions


def _fmt(value: float) -> str:
    return f"{value:g}"


def render_system_text(
    name: str, round_no: int, rubric: RubricConstants = DEFAULT_RUBRIC
) -> str:
    """Fill a role template. The round tag makes repeat rounds distinct
    requests even at temperature zero, so each round gets its own cache
    entry."""
    if round_no < 1:
        raise ValueError("round_no must be >= 1")
    mapping = {
        "round": str(round_no),
        "floor": _fmt(rubric.score_floor),
        "ceiling": _fmt(rubric.score_ceiling),
        "critical_floor": _fmt(rubric.critical_floor),
        "penalty_high": _fmt(rubric.penalty_table[3]),
        "penalty_medium": _fmt(rubric.penalty_table[2]),
        "penalty_low": _fmt(rubric.penalty_table[1]),
        "foundational_lo": _fmt(rubric.foundational_bounds[0]),
        "foundational_hi": _fmt(rubric.foundational_bounds[1]),
        "bonus_lo": _fmt(rubric.bonus_bounds[0]),
        "bonus_hi": _fmt(rubric.bonus_bounds[1]),
        "penalty_lo": _fmt(rubric.penalty_bounds[0]),
        "penalty_hi": _fmt(rubric.penalty_bounds[1]),
    }
    return string.Template(template_text(name)).substitute(mapping)


def _check_expectations(doc: dict) -> None:
    for i, item in enumerate(doc["expectations"]):
        text = item["text"]
        if is_bare_process_claim(text):
            raise SchemaCheckFailed(
                f"expectations[{i}].text {text!r} is a bare process claim;"
                " describe the static visible trace instead"
            )


def _check_questions(doc: dict) -> None:
    seen_state = False
    for i, item in enumerate(doc["questions"]):
        qtype = item["type"]
        if qtype == QuestionType.STATE.value:
            seen_state = True
        elif seen_state:
            raise SchemaCheckFailed(
                f"questions[{i}] is an Existence question after a State question;"
                " list every Existence question first"
            )


def expectations_schema() -> SchemaSpec:
    return SchemaSpec(
        SCHEMA_EXPECTATIONS, load_schema(SCHEMA_EXPECTATIONS), _check_expectations
    )


def questions_schema() -> SchemaSpec:
    return SchemaSpec(SCHEMA_QUESTIONS, load_schema(SCHEMA_QUESTIONS), _check_questions)


def perception_schema() -> SchemaSpec:
    return SchemaSpec(SCHEMA_PERCEPTION, load_schema(SCHEMA_PERCEPTION))


def judgment_schema(rubric: RubricConstants = DEFAULT_RUBRIC) -> SchemaSpec:
    """Judgment schema with value bounds taken from the rubric in force."""
    schema = load_schema(SCHEMA_JUDGMENT)
    bounds = {
        "foundational": rubric.foundational_bounds,
        "bonuses": rubric.bonus_bounds,
        "penalties": rubric.penalty_bounds,
    }
    for key, (lo, hi) in bounds.items():
        value_schema = schema["properties"][key]["items"]["properties"]["value"]
        value_schema["minimum"] = lo
        value_schema["maximum"] = hi
    return SchemaSpec(SCHEMA_JUDGMENT, schema)


def direct_schema(rubric: RubricConstants = DEFAULT_RUBRIC) -> SchemaSpec:
    schema = load_schema(SCHEMA_DIRECT)
    for key in ("layer1", "layer2", "layer3"):
        schema["properties"][key]["minimum"] = rubric.score_floor
        schema["properties"][key]["maximum"] = rubric.score_ceiling
    return SchemaSpec(SCHEMA_DIRECT, schema)


def parse_expectations(doc: Mapping) -> list[Expectation]:
    out = []
    for i, item in enumerate(doc["expectations"], start=1):
        out.append(
            Expectation(
                id=f"e{i}",
                text=item["text"].strip(),
                rationale=item["rationale"].strip(),
                importance=Importance.parse(item["importance"]),
            )
        )
    return out


def parse_questions(expectation_id: str, doc: Mapping) -> list[VisualQuestion]:
    return [
        VisualQuestion(
            expectation_id=expectation_id,
            index=i,
            qtype=QuestionType(item["type"]),
            text=item["text"].strip(),
        )
        for i, item in enumerate(doc["questions"])
    ]


def extract_expectations(
    gateway: Gateway,
    cfg: EndpointConfig,
    prompt,
    round_no: int = 1,
) -> list[Expectation]:
    """Decompose a prompt into expectations. Image-blind by contract."""
    req = ChatRequest(
        system_text=render_system_text(SCHEMA_EXPECTATIONS, round_no),
        user_parts=(TextPart(prompt.text),),
        response_format_hint=SCHEMA_EXPECTATIONS,
    )
    resp = gateway.complete_structured(cfg, req, expectations_schema())
    expectations = parse_expectations(resp.parsed)
    if not expectations:
        raise StageError(SCHEMA_EXPECTATIONS, "empty expectation list")
    return expectations


def formulate_questions(
    gateway: Gateway,
    cfg: EndpointConfig,
    expectation: Expectation,
    round_no: int = 1,
) -> list[VisualQuestion]:
    """One expectation in, its typed questions out, Existence first."""
    req = ChatRequest(
        system_text=render_system_text(SCHEMA_QUESTIONS, round_no),
        user_parts=(TextPart(expectation.text),),
        response_format_hint=SCHEMA_QUESTIONS,
    )
    resp = gateway.complete_structured(cfg, req, questions_schema())
    questions = parse_questions(expectation.id, resp.parsed)
    if not questions:
        raise StageError(SCHEMA_QUESTIONS, f"no questions for {expectation.id}")
    return questions


def perceive(
    gateway: Gateway,
    cfg: EndpointConfig,
    image: ImagePart,
    question: VisualQuestion,
    round_no: int = 1,
) -> Answer:
    """Answer one question from the image alone.

    The request carries the image and the question text, nothing else; the
    perceiver never sees the original prompt. Out-of-range confidence is
    clamped with a warning rather than rejected.
    """
    req = ChatRequest(
        system_text=render_system_text(SCHEMA_PERCEPTION, round_no),
        user_parts=(image, TextPart(question.text)),
        response_format_hint=SCHEMA_PERCEPTION,
    )
    resp = gateway.complete_structured(cfg, req, perception_schema())
    doc = resp.parsed
    confidence = float(doc["confidence"])
    clamped = min(1.0, max(0.0, confidence))
    if clamped != confidence:
        logger.warning(
            "confidence %s outside [0, 1] for %s/q%d, clamped to %s",
            confidence,
            question.expectation_id,
            question.index,
            clamped,
        )
    return Answer(
        expectation_id=question.expectation_id,
        question_index=question.index,
        question=question,
        detail=doc["detail"],
        verdict=bool(doc["verdict"]),
        confidence=clamped,
    )


def merge_facts(
    expectation: Expectation, answers: Sequence[Answer], image_ref: str
) -> FactBundle:
    """Group one expectation's answers, preserving question order."""
    ordered = tuple(sorted(answers, key=lambda a: a.question_index))
    return FactBundle(expectation=expectation, answers=ordered, image_ref=image_ref)


def _facts_payload(bundles: Sequence[FactBundle]) -> str:
    facts = [
        {
            "expectation_id": b.expectation.id,
            "expectation": b.expectation.text,
            "rationale": b.expectation.rationale,
            "importance": int(b.expectation.importance),
            "answers": [
                {
                    "question_index": a.question_index,
                    "type": a.question.qtype.value,
                    "question": a.question.text,
                    "verdict": a.verdict,
                    "confidence": a.confidence,
                    "detail": a.detail,
                }
                for a in b.answers
            ],
        }
        for b in bundles
    ]
    return json.dumps(facts, indent=2, ensure_ascii=False)


def judge(
    gateway: Gateway,
    cfg: EndpointConfig,
    bundles: Sequence[FactBundle],
    image: ImagePart,
    rubric: RubricConstants = DEFAULT_RUBRIC,
    round_no: int = 1,
) -> NuanceAssessment:
    """Audit the merged facts and emit the itemized nuance assessment.

    The reply is structured items only; any scalar score it might try to
    sneak in is ignored by the schema and recomputation happens downstream.
    """
    if not bundles:
        raise StageError(SCHEMA_JUDGMENT, "nothing to judge: no fact bundles")
    req = ChatRequest(
        system_text=render_system_text(SCHEMA_JUDGMENT, round_no, rubric),
        user_parts=(image, TextPart(_facts_payload(bundles))),
        response_format_hint=SCHEMA_JUDGMENT,
    )
    resp = gateway.complete_structured(cfg, req, judgment_schema(rubric))
    return NuanceAssessment.from_dict(resp.parsed)


def direct_judge(
    gateway: Gateway,
    cfg: EndpointConfig,
    prompt,
    image: ImagePart,
    rubric: RubricConstants = DEFAULT_RUBRIC,
    round_no: int = 1,
) -> LayerScores:
    """Single-step scoring baseline: same rubric text, one request.

    The model asserts the three layer scores directly; only the weighted
    blend is recomputed locally. Used for comparison against the staged
    pipeline, not for primary evaluation.
    """
    req = ChatRequest(
        system_text=render_system_text(SCHEMA_DIRECT, round_no, rubric),
        user_parts=(image, TextPart(prompt.text)),
        response_format_hint=SCHEMA_DIRECT,
    )
    resp = gateway.complete_structured(cfg, req, direct_schema(rubric))
    doc = resp.parsed
    s1, s2, s3 = float(doc["layer1"]), float(doc["layer2"]), float(doc["layer3"])
    ledger = tuple(
        LedgerEntry("-", f"layer {i} as asserted by single-step judge", s)
        for i, s in enumerate((s1, s2, s3), start=1)
    )
    return LayerScores(
        s1=s1,
        s2=s2,
        s3=s3,
        s_pw=aggregate(s1, s2, s3, rubric),
        ledger=ledger,
        thinking_process=doc["thinking_process"],
    )
