"""Deterministic three-layer rubric scoring over perception fact lines.

Scores are never taken from a model verbatim. The judge emits structured
items (fact verdicts, nuance values) and every number here is recomputed
from those items, so a score can always be audited back to its inputs.

Layer 1 measures instruction adherence from Existence-type lines, layer 2
measures physical and logical realism from State-type lines, layer 3 adds
detail and nuance from the judge's itemized assessment. The overall score
is a fixed weighted blend of the three.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence


class QuestionType(str, Enum):
    """Partition of visual questions: presence checks vs condition checks."""

    EXISTENCE = "Existence"
    STATE = "State"


class Importance(IntEnum):
    """Expectation weight; also the per-line weight in layers 1 and 2."""

    HIGH = 3
    MEDIUM = 2
    LOW = 1

    @classmethod
    def parse(cls, value: object) -> "Importance":
        """Accept the numeric weight or its label, case-insensitive."""
        if isinstance(value, str):
            try:
                return {"high": cls.HIGH, "medium": cls.MEDIUM, "low": cls.LOW}[value.lower()]
            except KeyError:
                raise ValueError(f"unknown importance label {value!r}") from None
        if isinstance(value, bool):
            raise ValueError(f"importance must be 1, 2 or 3, got {value!r}")
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise ValueError(f"importance must be 1, 2 or 3, got {value!r}") from None


@dataclass(frozen=True)
class RubricConstants:
    """Single source of truth for every scoring constant.

    All layer computations, the CLI rubric text, and the judge response
    bounds read from one instance of this class; nothing else may restate
    these numbers.
    """

    penalty_table: Mapping[int, float] = field(
        default_factory=lambda: {3: 5.0, 2: 3.0, 1: 1.0}
    )
    layer_weights: tuple[float, float, float] = (0.25, 0.5, 0.25)
    score_floor: float = 0.0
    score_ceiling: float = 10.0
    critical_floor: float = 1.0
    foundational_bounds: tuple[float, float] = (0.0, 2.0)
    bonus_bounds: tuple[float, float] = (0.0, 1.0)
    penalty_bounds: tuple[float, float] = (0.0, 2.0)

    def __post_init__(self) -> None:
        if set(self.penalty_table) != {3, 2, 1}:
            raise ValueError("penalty_table must map exactly the importance weights 3, 2, 1")
        if any(v < 0 for v in self.penalty_table.values()):
            raise ValueError("penalties must be non-negative")
        if len(self.layer_weights) != 3:
            raise ValueError("layer_weights must hold exactly three weights")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be non-negative")
        if not math.isclose(sum(self.layer_weights), 1.0, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError("layer weights must sum to 1.0")
        if not self.score_floor < self.score_ceiling:
            raise ValueError("score_floor must be below score_ceiling")
        for lo, hi in (self.foundational_bounds, self.bonus_bounds, self.penalty_bounds):
            if lo > hi:
                raise ValueError("nuance bounds must be ordered (lo, hi)")

    def as_dict(self) -> dict:
        """JSON-friendly form, stored in run manifests."""
        return {
            "penalty_table": {str(k): v for k, v in sorted(self.penalty_table.items())},
            "layer_weights": list(self.layer_weights),
            "score_floor": self.score_floor,
            "score_ceiling": self.score_ceiling,
            "critical_floor": self.critical_floor,
            "foundational_bounds": list(self.foundational_bounds),
            "bonus_bounds": list(self.bonus_bounds),
            "penalty_bounds": list(self.penalty_bounds),
        }


DEFAULT_RUBRIC = RubricConstants()


@dataclass(frozen=True)
class FactLine:
    """One scored line: a single question-level fact about the image.

    importance is inherited from the owning expectation, fulfilled is the
    perception verdict unless a judge override flipped it, confidence is
    the perceiver's self-reported confidence in [0, 1].
    """

    expectation_id: str
    question_index: int
    qtype: QuestionType
    importance: Importance
    fulfilled: bool
    confidence: float
    overridden: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "qtype", QuestionType(self.qtype))
        object.__setattr__(self, "importance", Importance.parse(self.importance))
        if not self.expectation_id:
            raise ValueError("fact line needs an expectation id")
        if self.question_index < 0:
            raise ValueError("question_index must be >= 0")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence!r} outside [0, 1]")

    @property
    def ref(self) -> str:
        return f"{self.expectation_id}/q{self.question_index}"

    def to_dict(self) -> dict:
        return {
            "expectation_id": self.expectation_id,
            "question_index": self.question_index,
            "qtype": self.qtype.value,
            "importance": int(self.importance),
            "fulfilled": self.fulfilled,
            "confidence": self.confidence,
            "overridden": self.overridden,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FactLine":
        return cls(
            expectation_id=data["expectation_id"],
            question_index=int(data["question_index"]),
            qtype=QuestionType(data["qtype"]),
            importance=Importance.parse(data["importance"]),
            fulfilled=bool(data["fulfilled"]),
            confidence=float(data["confidence"]),
            overridden=bool(data.get("overridden", False)),
        )


@dataclass(frozen=True)
class LedgerEntry:
    """One auditable contribution to a layer score."""

    ref: str
    rule: str
    amount: float

    def to_dict(self) -> dict:
        return {"ref": self.ref, "rule": self.rule, "amount": round(self.amount, 4)}


@dataclass(frozen=True)
class LayerScores:
    """The three layer scores, their weighted blend, and the audit trail."""

    s1: float
    s2: float
    s3: float
    s_pw: float
    ledger: tuple[LedgerEntry, ...]
    thinking_process: str

    def to_dict(self) -> dict:
        return {
            "s1": round(self.s1, 4),
            "s2": round(self.s2, 4),
            "s3": round(self.s3, 4),
            "s_pw": round(self.s_pw, 4),
            "ledger": [entry.to_dict() for entry in self.ledger],
            "thinking_process": self.thinking_process,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LayerScores":
        return cls(
            s1=float(data["s1"]),
            s2=float(data["s2"]),
            s3=float(data["s3"]),
            s_pw=float(data["s_pw"]),
            ledger=tuple(
                LedgerEntry(e["ref"], e["rule"], float(e["amount"])) for e in data.get("ledger", ())
            ),
            thinking_process=data.get("thinking_process", ""),
        )


def extract_fact_lines(bundles: Sequence, overrides: Iterable = ()) -> list[FactLine]:
    """Flatten fact bundles into one line per (expectation, question).

    Each line inherits the expectation's importance; the fulfillment
    indicator defaults to the perception verdict. Judge overrides replace
    the verdict for the referenced line and mark it as overridden. An
    override that references no existing line is an error, never ignored.
    """
    lines: list[FactLine] = []
    position: dict[tuple[str, int], int] = {}
    for bundle in bundles:
        importance = Importance.parse(bundle.expectation.importance)
        for answer in bundle.answers:
            line = FactLine(
                expectation_id=bundle.expectation.id,
                question_index=answer.question_index,
                qtype=QuestionType(answer.question.qtype),
                importance=importance,
                fulfilled=bool(answer.verdict),
                confidence=float(answer.confidence),
            )
            position[(line.expectation_id, line.question_index)] = len(lines)
            lines.append(line)
    for override in overrides:
        key = (override.expectation_id, override.question_index)
        if key not in position:
            raise ValueError(
                f"override references unknown fact {key[0]}/q{key[1]}"
            )
        idx = position[key]
        lines[idx] = replace(lines[idx], fulfilled=bool(override.verdict), overridden=True)
    return lines


def score_layer1(
    lines: Sequence[FactLine], rubric: RubricConstants = DEFAULT_RUBRIC
) -> tuple[float, list[LedgerEntry]]:
    """Instruction adherence from Existence-type lines.

    Failed existence lines deduct from the ceiling per the penalty table,
    clamped at the floor; no failures means a full score. A failed
    High-importance line short-circuits the layer to the critical floor.
    Note the floor asymmetry this inherits from the rubric definition: a
    single critical failure scores 1.0 while enough medium failures can
    reach 0.0, so the layer is not monotone across that boundary.
    """
    ledger: list[LedgerEntry] = []
    failed = [
        line
        for line in lines
        if line.qtype is QuestionType.EXISTENCE and not line.fulfilled
    ]
    for line in failed:
        penalty = rubric.penalty_table[int(line.importance)]
        ledger.append(
            LedgerEntry(
                line.ref,
                f"existence failure, importance {int(line.importance)}",
                -penalty,
            )
        )
    if any(line.importance is Importance.HIGH for line in failed):
        ledger.append(
            LedgerEntry(
                next(l.ref for l in failed if l.importance is Importance.HIGH),
                "critical existence failure floors layer 1",
                rubric.critical_floor,
            )
        )
        return rubric.critical_floor, ledger
    total_penalty = math.fsum(rubric.penalty_table[int(line.importance)] for line in failed)
    if total_penalty > 0.0:
        score = max(rubric.score_floor, rubric.score_ceiling - total_penalty)
    else:
        score = rubric.score_ceiling
    return score, ledger


def score_layer2(
    lines: Sequence[FactLine], rubric: RubricConstants = DEFAULT_RUBRIC
) -> tuple[float, list[LedgerEntry]]:
    """Physical and logical realism from State-type lines.

    The score is the ceiling times the importance- and confidence-weighted
    fraction of fulfilled state lines; the denominator counts every state
    line, fulfilled or not. An unfulfilled High-importance line
    short-circuits to the critical floor. With no state lines at all the
    layer is vacuously full, which is recorded in the ledger.
    """
    ledger: list[LedgerEntry] = []
    state = [line for line in lines if line.qtype is QuestionType.STATE]
    critical = [
        line for line in state if line.importance is Importance.HIGH and not line.fulfilled
    ]
    if critical:
        ledger.append(
            LedgerEntry(
                critical[0].ref,
                "critical state failure floors layer 2",
                rubric.critical_floor,
            )
        )
        return rubric.critical_floor, ledger
    if not state:
        ledger.append(
            LedgerEntry("-", "no state lines, layer vacuously full", rubric.score_ceiling)
        )
        return rubric.score_ceiling, ledger
    numerator = math.fsum(
        int(line.importance) * line.confidence * (1.0 if line.fulfilled else 0.0)
        for line in state
    )
    denominator = float(sum(int(line.importance) for line in state))
    score = rubric.score_ceiling * (numerator / denominator)
    ledger.append(
        LedgerEntry(
            "-",
            f"weighted fulfillment {numerator:g} over total weight {denominator:g}",
            score,
        )
    )
    return score, ledger


def score_layer3(
    assessment, rubric: RubricConstants = DEFAULT_RUBRIC
) -> tuple[float, list[LedgerEntry]]:
    """Detail and nuance from the judge's itemized assessment.

    Foundational values and bonuses add, penalties subtract, and the raw
    sum is clamped to the score range. Per-item bounds are validated here
    again even though the parse layer enforces them, so a hand-built
    assessment cannot smuggle out-of-range values in.
    """
    ledger: list[LedgerEntry] = []
    groups = (
        ("foundational", assessment.foundational, rubric.foundational_bounds, 1.0),
        ("bonus", assessment.bonuses, rubric.bonus_bounds, 1.0),
        ("penalty", assessment.penalties, rubric.penalty_bounds, -1.0),
    )
    signed: list[float] = []
    for kind, items, (lo, hi), sign in groups:
        for item in items:
            value = float(item.value)
            if not lo <= value <= hi:
                raise ValueError(
                    f"{kind} item {item.label!r} value {value} outside [{lo}, {hi}]"
                )
            signed.append(sign * value)
            ledger.append(LedgerEntry("-", f"{kind}: {item.label}", sign * value))
    raw = math.fsum(signed)
    score = min(rubric.score_ceiling, max(rubric.score_floor, raw))
    return score, ledger


def aggregate(
    s1: float, s2: float, s3: float, rubric: RubricConstants = DEFAULT_RUBRIC
) -> float:
    """Weighted blend of the three layer scores."""
    for name, value in (("s1", s1), ("s2", s2), ("s3", s3)):
        if not rubric.score_floor <= value <= rubric.score_ceiling:
            raise ValueError(
                f"{name}={value!r} outside [{rubric.score_floor}, {rubric.score_ceiling}]"
            )
    w1, w2, w3 = rubric.layer_weights
    return w1 * s1 + w2 * s2 + w3 * s3


def score_all(
    lines: Sequence[FactLine],
    assessment,
    rubric: RubricConstants = DEFAULT_RUBRIC,
) -> LayerScores:
    """Compute all three layers plus the blend from already-merged inputs.

    ``lines`` must already reflect any fulfillment overrides (see
    extract_fact_lines); overridden lines get an explicit ledger entry so
    the flip is visible in the audit trail.
    """
    s1, ledger1 = score_layer1(lines, rubric)
    s2, ledger2 = score_layer2(lines, rubric)
    s3, ledger3 = score_layer3(assessment, rubric)
    override_entries = [
        LedgerEntry(line.ref, "perception verdict overridden by judge", 0.0)
        for line in lines
        if line.overridden
    ]
    return LayerScores(
        s1=s1,
        s2=s2,
        s3=s3,
        s_pw=aggregate(s1, s2, s3, rubric),
        ledger=tuple(override_entries + ledger1 + ledger2 + ledger3),
        thinking_process=getattr(assessment, "thinking_process", ""),
    )
