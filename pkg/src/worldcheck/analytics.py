"""Cross-run reports: leaderboards, human-agreement rate, distributions.

Everything here is pure arithmetic over persisted records; nothing touches
the network. Failed records never contribute to a mean, only to counts.
"""
from __future__ import annotations

import csv
import io
import statistics
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .catalog import Subcategory
from .errors import AnalyticsError
from .pipeline import RunStore

HISTOGRAM_BINS = 10


@dataclass(frozen=True)
class LeaderboardRow:
    label: str
    cells: Mapping[Subcategory, float | None]
    overall: float | None
    record_count: int


def _complete_scores(store: RunStore) -> list[tuple[Subcategory, float]]:
    out = []
    for record in store.records():
        if record.status.complete and record.scores is not None:
            out.append((record.prompt.subcategory, record.scores.s_pw))
    return out


def leaderboard(
    runs: Mapping[str, RunStore | str | Path], overall: str = "records"
) -> list[LeaderboardRow]:
    """One row per run, one column per subcategory, plus an overall mean.

    ``overall="records"`` averages over every completed record, so
    subcategories weigh in proportion to their record counts;
    ``overall="cells"`` averages the subcategory means instead. All runs
    must have judged the same catalog or the comparison is meaningless,
    which is enforced via the manifest's catalog digest.
    """
    if overall not in ("records", "cells"):
        raise AnalyticsError(f"unknown overall convention {overall!r}")
    stores = {
        label: store if isinstance(store, RunStore) else RunStore.open(store)
        for label, store in runs.items()
    }
    digests = {label: s.manifest().get("catalog_digest") for label, s in stores.items()}
    if len(set(digests.values())) > 1:
        raise AnalyticsError(f"runs judged different catalogs: {digests}")
    rows = []
    for label, store in stores.items():
        scored = _complete_scores(store)
        by_sub: dict[Subcategory, list[float]] = {}
        for sub, score in scored:
            by_sub.setdefault(sub, []).append(score)
        cells = {
            sub: (statistics.fmean(by_sub[sub]) if sub in by_sub else None)
            for sub in Subcategory
        }
        if overall == "records":
            overall_mean = statistics.fmean(s for _, s in scored) if scored else None
        else:
            present = [v for v in cells.values() if v is not None]
            overall_mean = statistics.fmean(present) if present else None
        rows.append(
            LeaderboardRow(
                label=label, cells=cells, overall=overall_mean, record_count=len(scored)
            )
        )
    return rows


def render_leaderboard(rows: Sequence[LeaderboardRow], fmt: str = "table") -> str:
    header = ["model", *(sub.value for sub in Subcategory), "overall", "records"]
    grid = [header]
    for row in rows:
        grid.append(
            [
                row.label,
                *(
                    f"{row.cells[sub]:.4f}" if row.cells[sub] is not None else ""
                    for sub in Subcategory
                ),
                f"{row.overall:.4f}" if row.overall is not None else "",
                str(row.record_count),
            ]
        )
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(grid)
        return buf.getvalue()
    if fmt != "table":
        raise AnalyticsError(f"unknown leaderboard format {fmt!r}")
    widths = [max(len(line[i]) for line in grid) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip()
        for line in grid
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PairwisePreference:
    """One annotator's forced choice between image A and image B."""

    prompt_id: str
    annotator_id: str
    chosen: str  # "A" or "B"

    def __post_init__(self) -> None:
        if self.chosen not in ("A", "B"):
            raise ValueError(f"chosen must be 'A' or 'B', got {self.chosen!r}")


def load_preferences(path: str | Path) -> list[PairwisePreference]:
    """Tab-separated lines: prompt id, annotator id, choice."""
    prefs = []
    path = Path(path)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise AnalyticsError(
                f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        try:
            prefs.append(PairwisePreference(parts[0], parts[1], parts[2]))
        except ValueError as exc:
            raise AnalyticsError(f"{path}:{lineno}: {exc}") from exc
    return prefs


@dataclass(frozen=True)
class PromptAgreement:
    prompt_id: str
    votes_a: int
    votes_b: int
    majority: str | None  # None when no choice has a strict majority
    score_a: float
    score_b: float
    agree: bool | None  # None when excluded (no majority, policy "exclude")


@dataclass(frozen=True)
class AgreementReport:
    rows: tuple[PromptAgreement, ...]
    rate: float
    prompts: int
    with_majority: int
    agreed: int
    split_policy: str


def agreement(
    prefs: Sequence[PairwisePreference],
    scores_a: Mapping[str, float],
    scores_b: Mapping[str, float],
    split_policy: str = "exclude",
) -> AgreementReport:
    """Rate at which the harness picks the annotators' majority choice.

    A prompt agrees when a strict vote majority exists and that image's
    score is strictly higher; score ties always disagree. Prompts without
    a strict majority are excluded from the denominator by default, or
    counted as disagreements with ``split_policy="disagree"``.
    """
    if split_policy not in ("exclude", "disagree"):
        raise AnalyticsError(f"unknown split policy {split_policy!r}")
    votes: dict[str, Counter] = {}
    seen: set[tuple[str, str]] = set()
    for pref in prefs:
        key = (pref.prompt_id, pref.annotator_id)
        if key in seen:
            raise AnalyticsError(
                f"annotator {pref.annotator_id!r} voted twice on {pref.prompt_id!r}"
            )
        seen.add(key)
        votes.setdefault(pref.prompt_id, Counter())[pref.chosen] += 1
    rows = []
    agreed = 0
    with_majority = 0
    for prompt_id in sorted(votes):
        if prompt_id not in scores_a or prompt_id not in scores_b:
            raise AnalyticsError(f"no scores for voted prompt {prompt_id!r}")
        tally = votes[prompt_id]
        a, b = tally.get("A", 0), tally.get("B", 0)
        if a >= 2 and a > b:
            majority = "A"
        elif b >= 2 and b > a:
            majority = "B"
        else:
            majority = None
        score_a, score_b = scores_a[prompt_id], scores_b[prompt_id]
        if majority is None:
            agree = False if split_policy == "disagree" else None
        else:
            with_majority += 1
            winner_score, loser_score = (
                (score_a, score_b) if majority == "A" else (score_b, score_a)
            )
            agree = winner_score > loser_score
            if agree:
                agreed += 1
        rows.append(
            PromptAgreement(
                prompt_id=prompt_id,
                votes_a=a,
                votes_b=b,
                majority=majority,
                score_a=score_a,
                score_b=score_b,
                agree=agree,
            )
        )
    denominator = len(votes) if split_policy == "disagree" else with_majority
    if denominator == 0:
        raise AnalyticsError("no prompts with a vote majority to compare against")
    return AgreementReport(
        rows=tuple(rows),
        rate=agreed / denominator,
        prompts=len(votes),
        with_majority=with_majority,
        agreed=agreed,
        split_policy=split_policy,
    )


@dataclass(frozen=True)
class DistributionStats:
    count: int
    mean: float
    variance: float  # population variance
    histogram: tuple[int, ...]  # unit bins over the score range


def distribution_stats(scores: Sequence[float], ceiling: float = 10.0) -> DistributionStats:
    """Mean, population variance, and a fixed 10-bin histogram.

    The top edge is inclusive so a perfect score lands in the last bin.
    """
    values = [float(s) for s in scores]
    if len(values) < 2:
        raise AnalyticsError("need at least 2 scores for a distribution")
    for v in values:
        if not 0.0 <= v <= ceiling:
            raise AnalyticsError(f"score {v} outside [0, {ceiling}]")
    bins = [0] * HISTOGRAM_BINS
    width = ceiling / HISTOGRAM_BINS
    for v in values:
        bins[min(int(v / width), HISTOGRAM_BINS - 1)] += 1
    return DistributionStats(
        count=len(values),
        mean=statistics.fmean(values),
        variance=statistics.pvariance(values),
        histogram=tuple(bins),
    )


def render_distribution(stats: DistributionStats, label: str = "") -> str:
    lines = []
    if label:
        lines.append(f"[{label}]")
    lines.append(f"count     {stats.count}")
    lines.append(f"mean      {stats.mean:.4f}")
    lines.append(f"variance  {stats.variance:.4f}")
    for i, n in enumerate(stats.histogram):
        lo = i
        hi = i + 1
        edge = "]" if i == HISTOGRAM_BINS - 1 else ")"
        lines.append(f"[{lo},{hi}{edge}  {n}")
    return "\n".join(lines) + "\n"


class PreferenceChoice(str, Enum):
    METHOD_A = "MethodA"
    METHOD_B = "MethodB"
    TIE = "Tie"


@dataclass(frozen=True)
class PreferenceCounts:
    method_a: int
    method_b: int
    tie: int

    @property
    def total(self) -> int:
        return self.method_a + self.method_b + self.tie


def preference_tally(choices: Iterable[PreferenceChoice | str]) -> PreferenceCounts:
    """Count a study's per-comparison choices between two scoring methods."""
    counter: Counter = Counter(PreferenceChoice(c) for c in choices)
    return PreferenceCounts(
        method_a=counter.get(PreferenceChoice.METHOD_A, 0),
        method_b=counter.get(PreferenceChoice.METHOD_B, 0),
        tie=counter.get(PreferenceChoice.TIE, 0),
    )
