"""Prompt catalog: taxonomy, line-delimited file format, counts, sampling.

A catalog file holds one JSON object per line with the fields ``id``,
``prompt``, ``category`` and ``subcategory``. Categories form a fixed
two-level taxonomy of three categories with three subcategories each;
records carrying a subcategory outside its category are rejected at load
time with the offending line number.
"""
from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import CatalogError


class Category(str, Enum):
    PHYSICAL_WORLD = "PhysicalWorld"
    ABSTRACT_KNOWLEDGE = "AbstractKnowledge"
    LOGIC_COMMONSENSE = "LogicCommonsense"


class Subcategory(str, Enum):
    MECHANICS_DYNAMICS = "MechanicsDynamics"
    LIGHT_ELECTROMAGNETISM = "LightElectromagnetism"
    STATES = "States"
    STEM = "STEM"
    CULTURE = "Culture"
    SYMBOL = "Symbol"
    CAUSALITY_TEMPORALITY = "CausalityTemporality"
    SPACE_RELATIONS = "SpaceRelations"
    INTEGRATED_REASONING = "IntegratedReasoning"


CATEGORY_SUBCATEGORIES: dict[Category, tuple[Subcategory, ...]] = {
    Category.PHYSICAL_WORLD: (
        Subcategory.MECHANICS_DYNAMICS,
        Subcategory.LIGHT_ELECTROMAGNETISM,
        Subcategory.STATES,
    ),
    Category.ABSTRACT_KNOWLEDGE: (
        Subcategory.STEM,
        Subcategory.CULTURE,
        Subcategory.SYMBOL,
    ),
    Category.LOGIC_COMMONSENSE: (
        Subcategory.CAUSALITY_TEMPORALITY,
        Subcategory.SPACE_RELATIONS,
        Subcategory.INTEGRATED_REASONING,
    ),
}

SUBCATEGORY_CATEGORY: dict[Subcategory, Category] = {
    sub: cat for cat, subs in CATEGORY_SUBCATEGORIES.items() for sub in subs
}


@dataclass(frozen=True)
class PromptRecord:
    """One benchmark prompt with its taxonomy placement."""

    id: str
    text: str
    category: Category
    subcategory: Subcategory

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "subcategory", Subcategory(self.subcategory))
        if not self.id or not self.id.strip():
            raise ValueError("prompt id must be non-blank")
        if not self.text or not self.text.strip():
            raise ValueError("prompt text must be non-blank")
        if SUBCATEGORY_CATEGORY[self.subcategory] is not self.category:
            raise ValueError(
                f"subcategory {self.subcategory.value} does not belong to"
                f" category {self.category.value}"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "prompt": self.text,
            "category": self.category.value,
            "subcategory": self.subcategory.value,
        }


@dataclass(frozen=True)
class CatalogCounts:
    total: int
    categories: Mapping[Category, int]
    subcategories: Mapping[Subcategory, int]


@dataclass(frozen=True)
class Catalog:
    """Ordered, duplicate-free collection of prompt records."""

    records: tuple[PromptRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for record in self.records:
            if record.id in seen:
                raise CatalogError(f"duplicate prompt id {record.id!r}")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PromptRecord]:
        return iter(self.records)

    def counts(self) -> CatalogCounts:
        """Tallies are always derived from the records, never stored."""
        by_category: Counter = Counter(r.category for r in self.records)
        by_subcategory: Counter = Counter(r.subcategory for r in self.records)
        return CatalogCounts(
            total=len(self.records),
            categories={cat: by_category.get(cat, 0) for cat in Category},
            subcategories={sub: by_subcategory.get(sub, 0) for sub in Subcategory},
        )

    def digest(self) -> str:
        """Content hash used to pin a run to the exact catalog it saw."""
        h = hashlib.sha256()
        for record in self.records:
            h.update(json.dumps(record.to_dict(), sort_keys=True).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def by_id(self, prompt_id: str) -> PromptRecord:
        for record in self.records:
            if record.id == prompt_id:
                return record
        raise CatalogError(f"no prompt with id {prompt_id!r}")


_REQUIRED_FIELDS = ("id", "prompt", "category", "subcategory")


def load_catalog(path: str | Path) -> Catalog:
    """Parse a line-delimited catalog file, citing line numbers on errors."""
    records: list[PromptRecord] = []
    seen: dict[str, int] = {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise CatalogError(f"{path}:{lineno}: expected a JSON object")
        missing = [name for name in _REQUIRED_FIELDS if name not in row]
        if missing:
            raise CatalogError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        try:
            record = PromptRecord(
                id=str(row["id"]),
                text=str(row["prompt"]),
                category=Category(row["category"]),
                subcategory=Subcategory(row["subcategory"]),
            )
        except ValueError as exc:
            raise CatalogError(f"{path}:{lineno}: {exc}") from exc
        if record.id in seen:
            raise CatalogError(
                f"{path}:{lineno}: duplicate prompt id {record.id!r}"
                f" (first seen on line {seen[record.id]})"
            )
        seen[record.id] = lineno
        records.append(record)
    return Catalog(tuple(records))


def write_catalog(catalog: Catalog, path: str | Path) -> None:
    lines = [json.dumps(r.to_dict(), ensure_ascii=False) for r in catalog.records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


@dataclass(frozen=True)
class ExpectedCounts:
    """Count constraints for validate_counts.

    Only the constraints actually present are enforced; the benchmark's
    published split fixes category totals, per-subcategory totals are left
    open unless the caller supplies them.
    """

    total: int | None = None
    categories: Mapping[Category, int] = field(default_factory=dict)
    subcategories: Mapping[Subcategory, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExpectedCounts":
        try:
            return cls(
                total=int(data["total"]) if data.get("total") is not None else None,
                categories={
                    Category(k): int(v) for k, v in (data.get("categories") or {}).items()
                },
                subcategories={
                    Subcategory(k): int(v)
                    for k, v in (data.get("subcategories") or {}).items()
                },
            )
        except ValueError as exc:
            raise CatalogError(f"bad expected-counts table: {exc}") from exc


OFFICIAL_SPLIT = ExpectedCounts(
    total=1100,
    categories={
        Category.PHYSICAL_WORLD: 550,
        Category.ABSTRACT_KNOWLEDGE: 200,
        Category.LOGIC_COMMONSENSE: 350,
    },
)


@dataclass(frozen=True)
class CountRow:
    name: str
    kind: str  # "total", "category" or "subcategory"
    actual: int
    expected: int | None

    @property
    def matches(self) -> bool:
        return self.expected is None or self.actual == self.expected


@dataclass(frozen=True)
class CountReport:
    rows: tuple[CountRow, ...]

    @property
    def mismatches(self) -> tuple[CountRow, ...]:
        return tuple(row for row in self.rows if not row.matches)

    @property
    def passed(self) -> bool:
        return not self.mismatches


def validate_counts(catalog: Catalog, expected: ExpectedCounts) -> CountReport:
    """Compare derived tallies against an expected-count table.

    The report always lists every category and subcategory; rows without an
    expectation are informational and cannot fail the check.
    """
    counts = catalog.counts()
    rows: list[CountRow] = []
    if expected.total is not None:
        rows.append(CountRow("total", "total", counts.total, expected.total))
    for cat in Category:
        rows.append(
            CountRow(
                cat.value, "category", counts.categories[cat], expected.categories.get(cat)
            )
        )
    for sub in Subcategory:
        rows.append(
            CountRow(
                sub.value,
                "subcategory",
                counts.subcategories[sub],
                expected.subcategories.get(sub),
            )
        )
    return CountReport(tuple(rows))


def sample(catalog: Catalog, n: int, seed: int) -> Catalog:
    """Deterministic sample of ``n`` records, stratified by subcategory.

    Quotas follow the largest-remainder method over subcategory shares, so
    each stratum receives its proportional share rounded up or down by at
    most one. The result preserves the original catalog order.
    """
    if n <= 0:
        raise CatalogError(f"sample size must be positive, got {n}")
    if n > len(catalog):
        raise CatalogError(f"sample size {n} exceeds catalog size {len(catalog)}")
    strata: dict[Subcategory, list[int]] = {}
    for index, record in enumerate(catalog.records):
        strata.setdefault(record.subcategory, []).append(index)
    order = [sub for sub in Subcategory if sub in strata]
    total = len(catalog)
    shares = {sub: n * len(strata[sub]) / total for sub in order}
    quotas = {sub: int(shares[sub]) for sub in order}
    remainders = sorted(
        order, key=lambda sub: (-(shares[sub] - quotas[sub]), list(Subcategory).index(sub))
    )
    short = n - sum(quotas.values())
    for sub in remainders[:short]:
        quotas[sub] += 1
    # A stratum cannot supply more than it holds; push the excess onto the
    # next strata with spare capacity, in taxonomy order.
    excess = 0
    for sub in order:
        if quotas[sub] > len(strata[sub]):
            excess += quotas[sub] - len(strata[sub])
            quotas[sub] = len(strata[sub])
    while excess > 0:
        progressed = False
        for sub in order:
            if excess == 0:
                break
            if quotas[sub] < len(strata[sub]):
                quotas[sub] += 1
                excess -= 1
                progressed = True
        if not progressed:  # unreachable while n <= len(catalog)
            raise CatalogError("cannot satisfy sample quotas")
    rng = random.Random(seed)
    chosen: list[int] = []
    for sub in order:
        indices = list(strata[sub])
        rng.shuffle(indices)
        chosen.extend(indices[: quotas[sub]])
    chosen.sort()
    return Catalog(tuple(catalog.records[i] for i in chosen))


def sample_catalog_path() -> Path:
    """Location of the small catalog shipped with the package."""
    return Path(str(resources.files(__package__) / "data" / "sample_catalog.jsonl"))


def load_sample_catalog() -> Catalog:
    return load_catalog(sample_catalog_path())
