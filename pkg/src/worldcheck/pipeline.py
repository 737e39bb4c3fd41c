"""End-to-end orchestration and persistence.

evaluate_image runs the staged roles for one (prompt, image, round) and
always returns a record: stage failures are captured in the record's
status, never raised, so one bad image cannot take down a batch.
evaluate_batch fans records out over a worker pool, appends them to an
append-only run store in deterministic task order, and skips work that a
previous interrupted run already persisted.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image, UnidentifiedImageError

from . import agents
from .agents import (
    Answer,
    Expectation,
    FactBundle,
    NuanceAssessment,
    VisualQuestion,
)
from .catalog import Catalog, PromptRecord
from .errors import GatewayError, ImageError, RunConfigError, StageError
from .gateway import EndpointConfig, Gateway, ImagePart
from .scoring import (
    DEFAULT_RUBRIC,
    LayerScores,
    RubricConstants,
    extract_fact_lines,
    FactLine,
    score_all,
)

logger = logging.getLogger("worldcheck.pipeline")

RECORD_SCHEMA_VERSION = 1

STAGE_IMAGE = "image"
STAGE_EXPECTATIONS = "expectations"
STAGE_QUESTIONS = "questions"
STAGE_PERCEPTION = "perception"
STAGE_JUDGMENT = "judgment"
STAGE_SCORING = "scoring"
STAGE_DIRECT = "direct"

MEDIA_TYPES = {
    "PNG": "image/png",
    "JPEG": "image/jpeg",
    "WEBP": "image/webp",
}

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".webp")


@dataclass(frozen=True)
class ImageRef:
    path: str
    sha256: str

    def to_dict(self) -> dict:
        return {"path": self.path, "sha256": self.sha256}


@dataclass(frozen=True)
class Status:
    state: str  # "complete" or "failed"
    stage: str | None = None
    reason: str | None = None

    @property
    def complete(self) -> bool:
        return self.state == "complete"

    @classmethod
    def ok(cls) -> "Status":
        return cls(state="complete")

    @classmethod
    def failed(cls, stage: str, reason: str) -> "Status":
        return cls(state="failed", stage=stage, reason=reason)

    def to_dict(self) -> dict:
        return {"state": self.state, "stage": self.stage, "reason": self.reason}


@dataclass(frozen=True)
class EvaluationRecord:
    """Everything observed while judging one image in one round."""

    prompt: PromptRecord
    image: ImageRef
    round_no: int
    status: Status
    mode: str = "agentic"
    expectations: tuple[Expectation, ...] = ()
    questions: tuple[VisualQuestion, ...] = ()
    answers: tuple[Answer, ...] = ()
    fact_lines: tuple[FactLine, ...] = ()
    nuance: NuanceAssessment | None = None
    scores: LayerScores | None = None
    timing: Mapping[str, dict] = field(default_factory=dict)

    def key(self) -> tuple[str, int]:
        return (self.prompt.id, self.round_no)

    def to_dict(self) -> dict:
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "mode": self.mode,
            "prompt": self.prompt.to_dict(),
            "image": self.image.to_dict(),
            "round": self.round_no,
            "status": self.status.to_dict(),
            "expectations": [e.to_dict() for e in self.expectations],
            "questions": [q.to_dict() for q in self.questions],
            "answers": [a.to_dict() for a in self.answers],
            "fact_lines": [l.to_dict() for l in self.fact_lines],
            "nuance": self.nuance.to_dict() if self.nuance else None,
            "scores": self.scores.to_dict() if self.scores else None,
            "timing": {k: dict(v) for k, v in self.timing.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvaluationRecord":
        prompt = data["prompt"]
        status = data["status"]
        return cls(
            prompt=PromptRecord(
                id=prompt["id"],
                text=prompt["prompt"],
                category=prompt["category"],
                subcategory=prompt["subcategory"],
            ),
            image=ImageRef(path=data["image"]["path"], sha256=data["image"]["sha256"]),
            round_no=int(data["round"]),
            status=Status(
                state=status["state"],
                stage=status.get("stage"),
                reason=status.get("reason"),
            ),
            mode=data.get("mode", "agentic"),
            expectations=tuple(Expectation.from_dict(e) for e in data.get("expectations", ())),
            questions=tuple(VisualQuestion.from_dict(q) for q in data.get("questions", ())),
            answers=tuple(Answer.from_dict(a) for a in data.get("answers", ())),
            fact_lines=tuple(FactLine.from_dict(l) for l in data.get("fact_lines", ())),
            nuance=(
                NuanceAssessment.from_dict(data["nuance"]) if data.get("nuance") else None
            ),
            scores=LayerScores.from_dict(data["scores"]) if data.get("scores") else None,
            timing=data.get("timing", {}),
        )


def canonical_record_line(record_dict: Mapping, include_timing: bool = True) -> str:
    """Stable one-line JSON form; the unit of byte-level determinism."""
    payload = dict(record_dict)
    if not include_timing:
        payload.pop("timing", None)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def load_image(path: str | Path) -> tuple[ImagePart, ImageRef]:
    """Read and verify an image file; digest computed once per call."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format
            img.verify()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    media_type = MEDIA_TYPES.get(fmt or "", "application/octet-stream")
    ref = ImageRef(path=str(path), sha256=hashlib.sha256(data).hexdigest())
    return ImagePart(media_type=media_type, data=data), ref


class ImageManifest:
    """Maps prompt ids to image files.

    Either an explicit JSON mapping {prompt_id: path} (relative paths are
    resolved against the mapping file) or a directory searched for
    <prompt_id> plus a known image extension.
    """

    def __init__(self, root: Path | None = None, mapping: dict[str, Path] | None = None):
        self._root = root
        self._mapping = mapping

    @classmethod
    def from_path(cls, path: str | Path) -> "ImageManifest":
        path = Path(path)
        if path.is_dir():
            return cls(root=path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ImageError(f"cannot read image manifest {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ImageError(f"image manifest {path} must be a JSON object")
        base = path.parent
        mapping = {
            str(k): (base / v if not Path(v).is_absolute() else Path(v))
            for k, v in raw.items()
        }
        return cls(mapping=mapping)

    def resolve(self, prompt_id: str) -> Path | None:
        if self._mapping is not None:
            path = self._mapping.get(prompt_id)
            return path if path is not None and path.exists() else None
        assert self._root is not None
        for ext in IMAGE_EXTENSIONS:
            candidate = self._root / f"{prompt_id}{ext}"
            if candidate.exists():
                return candidate
        return None


class _StageTimer:
    def __init__(self) -> None:
        self.timing: dict[str, dict] = {}

    def stage(self, name: str):
        timer = self

        class _Scope:
            def __enter__(self):
                timer.timing[name] = {"start": time.perf_counter()}
                return self

            def __exit__(self, exc_type, exc, tb):
                timer.timing[name]["end"] = time.perf_counter()
                return False

        return _Scope()


# Failures of these kinds are evaluation outcomes, not bugs: they become
# Failed records. Anything else propagates and aborts the batch.
_STAGE_FAILURES = (GatewayError, StageError, ValueError, KeyError, TypeError)


def evaluate_image(
    gateway: Gateway,
    cfg: EndpointConfig,
    rubric: RubricConstants,
    prompt: PromptRecord,
    image: ImagePart,
    image_ref: ImageRef,
    round_no: int,
) -> EvaluationRecord:
    """Run the staged judge for one (prompt, image, round).

    Stages run in a fixed order; perception requests for distinct questions
    may run concurrently, bounded by the endpoint's request cap. Question
    order in the record is always the formulation order regardless of
    completion order.
    """
    timer = _StageTimer()
    stage = STAGE_EXPECTATIONS
    expectations: list[Expectation] = []
    questions: list[VisualQuestion] = []
    answers: list[Answer] = []
    fact_lines: list[FactLine] = []
    nuance: NuanceAssessment | None = None
    scores: LayerScores | None = None
    try:
        with timer.stage(STAGE_EXPECTATIONS):
            expectations = agents.extract_expectations(gateway, cfg, prompt, round_no)

        stage = STAGE_QUESTIONS
        per_expectation: dict[str, list[VisualQuestion]] = {}
        with timer.stage(STAGE_QUESTIONS):
            for expectation in expectations:
                qs = agents.formulate_questions(gateway, cfg, expectation, round_no)
                per_expectation[expectation.id] = qs
                questions.extend(qs)

        stage = STAGE_PERCEPTION
        with timer.stage(STAGE_PERCEPTION):
            if cfg.max_concurrent_requests > 1 and len(questions) > 1:
                workers = min(len(questions), cfg.max_concurrent_requests)
                with ThreadPoolExecutor(max_workers=workers) as executor:
                    answers = list(
                        executor.map(
                            lambda q: agents.perceive(gateway, cfg, image, q, round_no),
                            questions,
                        )
                    )
            else:
                answers = [
                    agents.perceive(gateway, cfg, image, q, round_no) for q in questions
                ]
        answered: dict[str, list[Answer]] = {}
        for answer in answers:
            answered.setdefault(answer.expectation_id, []).append(answer)
        bundles = [
            agents.merge_facts(e, answered.get(e.id, ()), image_ref.sha256)
            for e in expectations
        ]

        stage = STAGE_JUDGMENT
        with timer.stage(STAGE_JUDGMENT):
            nuance = agents.judge(gateway, cfg, bundles, image, rubric, round_no)

        stage = STAGE_SCORING
        with timer.stage(STAGE_SCORING):
            fact_lines = extract_fact_lines(bundles, nuance.fulfillment_overrides)
            scores = score_all(fact_lines, nuance, rubric)
        status = Status.ok()
    except _STAGE_FAILURES as exc:
        reason = f"{type(exc).__name__}: {exc}"
        logger.warning("prompt %s round %d failed at %s: %s", prompt.id, round_no, stage, reason)
        status = Status.failed(stage, reason)
    return EvaluationRecord(
        prompt=prompt,
        image=image_ref,
        round_no=round_no,
        status=status,
        mode="agentic",
        expectations=tuple(expectations),
        questions=tuple(questions),
        answers=tuple(answers),
        fact_lines=tuple(fact_lines),
        nuance=nuance,
        scores=scores,
        timing=timer.timing,
    )


def evaluate_direct(
    gateway: Gateway,
    cfg: EndpointConfig,
    rubric: RubricConstants,
    prompt: PromptRecord,
    image: ImagePart,
    image_ref: ImageRef,
    round_no: int,
) -> EvaluationRecord:
    """Single-request scoring; record shape matches the staged pipeline
    minus the evidence fields."""
    timer = _StageTimer()
    scores: LayerScores | None = None
    try:
        with timer.stage(STAGE_DIRECT):
            scores = agents.direct_judge(gateway, cfg, prompt, image, rubric, round_no)
        status = Status.ok()
    except _STAGE_FAILURES as exc:
        reason = f"{type(exc).__name__}: {exc}"
        logger.warning("prompt %s round %d failed at direct: %s", prompt.id, round_no, reason)
        status = Status.failed(STAGE_DIRECT, reason)
    return EvaluationRecord(
        prompt=prompt,
        image=image_ref,
        round_no=round_no,
        status=status,
        mode="direct",
        scores=scores,
        timing=timer.timing,
    )


class RunStore:
    """Append-only record store for one run directory.

    Layout: manifest.json (run identity), records.jsonl (one record per
    line, appended as results arrive), index.tsv (prompt id and round per
    line, a human-greppable sidecar). The records file is the source of
    truth; completed keys are rescanned from it on open so a torn write
    from a killed process is sealed and ignored rather than trusted.
    """

    MANIFEST = "manifest.json"
    RECORDS = "records.jsonl"
    INDEX = "index.tsv"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._records_path = self.root / self.RECORDS
        self._index_path = self.root / self.INDEX
        self._seal_partial_tail()

    @classmethod
    def create_or_resume(cls, root: str | Path, manifest: Mapping) -> "RunStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest_path = root / cls.MANIFEST
        if manifest_path.exists():
            existing = json.loads(manifest_path.read_text(encoding="utf-8"))
            if existing.get("run_id") != manifest["run_id"]:
                raise RunConfigError(
                    f"{root} belongs to run {existing.get('run_id')!r},"
                    f" refusing to mix in run {manifest['run_id']!r}"
                )
        else:
            tmp = manifest_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
            os.replace(tmp, manifest_path)
        return cls(root)

    @classmethod
    def open(cls, root: str | Path) -> "RunStore":
        root = Path(root)
        if not (root / cls.MANIFEST).exists():
            raise RunConfigError(f"{root} is not a run directory (no {cls.MANIFEST})")
        return cls(root)

    def manifest(self) -> dict:
        path = self.root / self.MANIFEST
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def _seal_partial_tail(self) -> None:
        # A crash can leave a record line without its newline. Appending
        # after it would merge two records, so terminate it now; the scan
        # then skips it as malformed instead of silently resuming wrong.
        if not self._records_path.exists():
            return
        with open(self._records_path, "rb+") as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            if size == 0:
                return
            fh.seek(size - 1)
            if fh.read(1) != b"\n":
                fh.write(b"\n")

    def append(self, record: EvaluationRecord) -> None:
        line = canonical_record_line(record.to_dict())
        with self._lock:
            with open(self._records_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            with open(self._index_path, "a", encoding="utf-8") as fh:
                fh.write(f"{record.prompt.id}\t{record.round_no}\n")

    def record_dicts(self) -> list[dict]:
        if not self._records_path.exists():
            return []
        out: list[dict] = []
        with open(self._records_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    logger.warning(
                        "%s:%d: unparseable record line skipped", self._records_path, lineno
                    )
        return out

    def records(self) -> list[EvaluationRecord]:
        return [EvaluationRecord.from_dict(d) for d in self.record_dicts()]

    def completed_keys(self) -> set[tuple[str, int]]:
        return {(d["prompt"]["id"], int(d["round"])) for d in self.record_dicts()}

    def canonical_lines(self, include_timing: bool = False) -> list[str]:
        return [
            canonical_record_line(d, include_timing=include_timing)
            for d in self.record_dicts()
        ]


def build_manifest(
    cfg: EndpointConfig,
    rubric: RubricConstants,
    catalog: Catalog,
    rounds: int,
    mode: str,
    label: str | None = None,
) -> dict:
    """Run manifest; run_id pins everything that shapes record content."""
    template_versions = agents.template_versions()
    identity = {
        "schema_version": RECORD_SCHEMA_VERSION,
        "catalog_digest": catalog.digest(),
        "endpoint_fingerprint": cfg.fingerprint(),
        "rubric": rubric.as_dict(),
        "rounds": rounds,
        "mode": mode,
        "template_versions": template_versions,
    }
    run_id = hashlib.sha256(
        json.dumps(identity, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]
    return {
        "run_id": run_id,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "label": label,
        "base_url": cfg.base_url,
        "model_name": cfg.model_name,
        "temperature": cfg.temperature,
        **identity,
    }


@dataclass(frozen=True)
class BatchResult:
    store: RunStore
    new_complete: int
    new_failed: int
    skipped: tuple[str, ...]
    already_done: int


class _ImageLoader:
    """Loads and digests each image file once, shared across workers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._cache: dict[str, tuple[ImagePart, ImageRef]] = {}

    def load(self, path: Path) -> tuple[ImagePart, ImageRef]:
        key = str(path)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        loaded = load_image(path)
        with self._lock:
            self._cache[key] = loaded
        return loaded


def evaluate_batch(
    gateway: Gateway,
    cfg: EndpointConfig,
    rubric: RubricConstants,
    catalog: Catalog,
    images: ImageManifest,
    *,
    out_dir: str | Path,
    rounds: int = 4,
    concurrency: int = 4,
    label: str | None = None,
    mode: str = "agentic",
) -> BatchResult:
    """Evaluate every (prompt, round) not already persisted in out_dir.

    Results are appended in task submission order, so repeated hermetic
    runs produce identical stores regardless of worker count. A crash
    mid-batch loses only unwritten results; rerunning with the same
    configuration picks up exactly the missing keys.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if mode not in ("agentic", "direct"):
        raise ValueError(f"unknown mode {mode!r}")
    manifest = build_manifest(cfg, rubric, catalog, rounds, mode, label)
    store = RunStore.create_or_resume(out_dir, manifest)
    done = store.completed_keys()

    resolved: dict[str, Path] = {}
    skipped: list[str] = []
    for prompt in catalog:
        path = images.resolve(prompt.id)
        if path is None:
            logger.warning("no image found for prompt %s, skipping", prompt.id)
            skipped.append(prompt.id)
        else:
            resolved[prompt.id] = path

    tasks = [
        (prompt, round_no)
        for prompt in catalog
        if prompt.id in resolved
        for round_no in range(1, rounds + 1)
        if (prompt.id, round_no) not in done
    ]
    loader = _ImageLoader()

    def work(prompt: PromptRecord, round_no: int) -> EvaluationRecord:
        try:
            image, ref = loader.load(resolved[prompt.id])
        except ImageError as exc:
            return EvaluationRecord(
                prompt=prompt,
                image=ImageRef(path=str(resolved[prompt.id]), sha256=""),
                round_no=round_no,
                status=Status.failed(STAGE_IMAGE, str(exc)),
                mode=mode,
            )
        if mode == "direct":
            return evaluate_direct(gateway, cfg, rubric, prompt, image, ref, round_no)
        return evaluate_image(gateway, cfg, rubric, prompt, image, ref, round_no)

    new_complete = 0
    new_failed = 0
    with ThreadPoolExecutor(max_workers=concurrency) as executor:
        futures = [executor.submit(work, prompt, round_no) for prompt, round_no in tasks]
        for future in futures:
            record = future.result()
            store.append(record)
            if record.status.complete:
                new_complete += 1
            else:
                new_failed += 1
    return BatchResult(
        store=store,
        new_complete=new_complete,
        new_failed=new_failed,
        skipped=tuple(skipped),
        already_done=len(done),
    )


@dataclass(frozen=True)
class RoundSummary:
    prompt_id: str
    rounds_complete: int
    rounds_failed: int
    mean_s1: float
    mean_s2: float
    mean_s3: float
    mean_s_pw: float


def summarize_rounds(records: Sequence[EvaluationRecord]) -> RoundSummary:
    """Per-prompt means over completed rounds; failures only counted."""
    if not records:
        raise ValueError("no records to summarize")
    prompt_ids = {r.prompt.id for r in records}
    if len(prompt_ids) != 1:
        raise ValueError(f"records span multiple prompts: {sorted(prompt_ids)}")
    complete = [r for r in records if r.status.complete and r.scores is not None]
    failed = len(records) - len(complete)
    if not complete:
        raise ValueError(f"no complete rounds for prompt {next(iter(prompt_ids))!r}")
    return RoundSummary(
        prompt_id=next(iter(prompt_ids)),
        rounds_complete=len(complete),
        rounds_failed=failed,
        mean_s1=statistics.fmean(r.scores.s1 for r in complete),
        mean_s2=statistics.fmean(r.scores.s2 for r in complete),
        mean_s3=statistics.fmean(r.scores.s3 for r in complete),
        mean_s_pw=statistics.fmean(r.scores.s_pw for r in complete),
    )


def round_mean_overall(store: RunStore) -> dict[str, float]:
    """Per-prompt mean overall score across completed rounds."""
    by_prompt: dict[str, list[float]] = {}
    for record in store.records():
        if record.status.complete and record.scores is not None:
            by_prompt.setdefault(record.prompt.id, []).append(record.scores.s_pw)
    return {pid: statistics.fmean(values) for pid, values in sorted(by_prompt.items())}
