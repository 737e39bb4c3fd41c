"""Shared fixtures: tiny images, the melting-ice mock script, catalogs."""
from __future__ import annotations

import json
from pathlib import Path

import pytest
from PIL import Image

from worldcheck.catalog import (
    SUBCATEGORY_CATEGORY,
    Catalog,
    Category,
    PromptRecord,
    Subcategory,
)
from worldcheck.gateway import EndpointConfig, Gateway, MockBackend
from worldcheck.pipeline import EvaluationRecord, ImageRef, RunStore, Status
from worldcheck.scoring import LayerScores


def make_png(path: Path, color=(200, 30, 40), size=(6, 4)) -> Path:
    Image.new("RGB", size, color).save(path, format="PNG")
    return path


@pytest.fixture
def tiny_png(tmp_path: Path) -> Path:
    return make_png(tmp_path / "img.png")


def mock_cfg(concurrency: int = 4, max_retries: int = 2) -> EndpointConfig:
    return EndpointConfig(
        base_url="mock://local",
        model_name="mock-judge",
        max_retries=max_retries,
        max_concurrent_requests=concurrency,
        retry_backoff=0.0,
    )


# --- Melting-ice fixture ---------------------------------------------------
# One prompt, two expectations, three questions, three answers, one
# judgment. Expected scores, computed by hand:
#   layer 1: no failed Existence lines -> 10.0
#   layer 2: 10 * (3*0.8 + 2*1.0) / (3 + 2) = 8.8
#   layer 3: 1.5 + 1.5 + 0.5 = 3.5
#   overall: 0.25*10 + 0.5*8.8 + 0.25*3.5 = 7.775
# Gateway calls per round: 1 + 2 + 3 + 1 = 7.

ICE_PROMPT = PromptRecord(
    id="pw-states-0001",
    text="a lit candle beside a plate of ice cubes",
    category=Category.PHYSICAL_WORLD,
    subcategory=Subcategory.STATES,
)

ICE_EXPECTATIONS = {
    "expectations": [
        {
            "text": "ice cubes on the plate show rounded edges with a small puddle around them",
            "rationale": "heat from the nearby flame melts exposed ice over time",
            "importance": "High",
        },
        {
            "text": "melted water forming a flat pool on the plate surface",
            "rationale": "liquid water settles flat under gravity",
            "importance": "Medium",
        },
    ]
}

ICE_QUESTIONS_E1 = {
    "questions": [
        {"type": "Existence", "text": "Are there ice cubes on a plate?"},
        {"type": "State", "text": "Do the ice cube edges appear rounded rather than sharp?"},
    ]
}

ICE_QUESTIONS_E2 = {
    "questions": [
        {"type": "State", "text": "Is there a pool of liquid water on the plate around the ice cubes?"}
    ]
}

ICE_PERCEPTION = {
    "Are there ice cubes": {
        "verdict": True,
        "confidence": 0.95,
        "detail": "several translucent cubes sit on a white ceramic plate",
    },
    "rounded rather than sharp": {
        "verdict": True,
        "confidence": 0.8,
        "detail": "the cube corners look softened and glossy",
    },
    "pool of liquid water": {
        "verdict": True,
        "confidence": 1.0,
        "detail": "a thin sheet of water surrounds the cubes",
    },
}

ICE_JUDGMENT = {
    "foundational": [
        {"label": "candle flame glow rendered plausibly", "value": 1.5},
        {"label": "ice translucency consistent with real ice", "value": 1.5},
    ],
    "bonuses": [{"label": "flame reflection visible on the wet plate", "value": 0.5}],
    "penalties": [],
    "thinking_process": "melt traces near the flame are consistent; reflections line up",
}

ICE_S1 = 10.0
ICE_S2 = 8.8
ICE_S3 = 3.5
ICE_S_PW = 7.775
ICE_CALLS_PER_ROUND = 7


def ice_script() -> dict:
    rules = [
        {"schema": "expectations", "responses": [ICE_EXPECTATIONS], "repeat": True},
        {
            "schema": "questions",
            "contains": "rounded edges",
            "responses": [ICE_QUESTIONS_E1],
            "repeat": True,
        },
        {
            "schema": "questions",
            "contains": "flat pool",
            "responses": [ICE_QUESTIONS_E2],
            "repeat": True,
        },
    ]
    for marker, payload in ICE_PERCEPTION.items():
        rules.append(
            {"schema": "perception", "contains": marker, "responses": [payload], "repeat": True}
        )
    rules.append({"schema": "judgment", "responses": [ICE_JUDGMENT], "repeat": True})
    return {"rules": rules}


def ice_backend() -> MockBackend:
    return MockBackend.from_script(ice_script())


def ice_gateway() -> tuple[Gateway, MockBackend]:
    backend = ice_backend()
    return Gateway(backend), backend


DIRECT_SCRIPT = {
    "rules": [
        {
            "schema": "direct_judgment",
            "responses": [
                {"layer1": 8, "layer2": 6, "layer3": 4, "thinking_process": "single step"}
            ],
            "repeat": True,
        }
    ]
}


def ice_catalog(n: int = 1) -> Catalog:
    """1 to 3 prompts; the ice mock rules answer any of them."""
    extra = (
        PromptRecord(
            id="pw-mech-0001",
            text="a cork and an iron nail in a bucket of water",
            category=Category.PHYSICAL_WORLD,
            subcategory=Subcategory.MECHANICS_DYNAMICS,
        ),
        PromptRecord(
            id="lc-caus-0001",
            text="a wet umbrella standing opened on a polished wooden floor",
            category=Category.LOGIC_COMMONSENSE,
            subcategory=Subcategory.CAUSALITY_TEMPORALITY,
        ),
    )
    return Catalog((ICE_PROMPT, *extra[: n - 1]))


def image_dir_for(tmp_path: Path, catalog: Catalog) -> Path:
    root = tmp_path / "images"
    root.mkdir(exist_ok=True)
    for i, prompt in enumerate(catalog):
        make_png(root / f"{prompt.id}.png", color=(40 * i + 10, 80, 120))
    return root


def write_script(tmp_path: Path, script: dict, name: str = "script.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(script), encoding="utf-8")
    return path


# --- Synthetic official-sized catalog ---------------------------------------
# The real 1,100-prompt set is not published; tests that need official-shaped
# counts build this stand-in with a fixed per-subcategory split that sums to
# the published 550/200/350 category totals.

SYNTH_SPLIT: dict[Subcategory, int] = {
    Subcategory.MECHANICS_DYNAMICS: 200,
    Subcategory.LIGHT_ELECTROMAGNETISM: 150,
    Subcategory.STATES: 200,
    Subcategory.STEM: 100,
    Subcategory.CULTURE: 50,
    Subcategory.SYMBOL: 50,
    Subcategory.CAUSALITY_TEMPORALITY: 150,
    Subcategory.SPACE_RELATIONS: 100,
    Subcategory.INTEGRATED_REASONING: 100,
}


def synthetic_official_catalog() -> Catalog:
    records = []
    i = 0
    for sub, count in SYNTH_SPLIT.items():
        for _ in range(count):
            i += 1
            records.append(
                PromptRecord(
                    id=f"p{i:04d}",
                    text=f"synthetic prompt {i} exercising {sub.value}",
                    category=SUBCATEGORY_CATEGORY[sub],
                    subcategory=sub,
                )
            )
    return Catalog(tuple(records))


# --- Hand-built run stores ---------------------------------------------------


def make_record(
    prompt: PromptRecord,
    round_no: int,
    s_pw: float | None,
    mode: str = "agentic",
) -> EvaluationRecord:
    """Minimal record: complete with the given overall score, or failed."""
    if s_pw is None:
        return EvaluationRecord(
            prompt=prompt,
            image=ImageRef(path=f"{prompt.id}.png", sha256="0" * 64),
            round_no=round_no,
            status=Status.failed("judgment", "scripted failure"),
            mode=mode,
        )
    scores = LayerScores(
        s1=s_pw, s2=s_pw, s3=s_pw, s_pw=s_pw, ledger=(), thinking_process="fixture"
    )
    return EvaluationRecord(
        prompt=prompt,
        image=ImageRef(path=f"{prompt.id}.png", sha256="0" * 64),
        round_no=round_no,
        status=Status.ok(),
        mode=mode,
        scores=scores,
    )


def make_store(
    root: Path,
    records: list[EvaluationRecord],
    catalog_digest: str = "d" * 64,
    run_id: str = "a" * 16,
    label: str | None = None,
) -> RunStore:
    manifest = {
        "run_id": run_id,
        "catalog_digest": catalog_digest,
        "label": label,
        "rounds": 4,
        "mode": "agentic",
    }
    store = RunStore.create_or_resume(root, manifest)
    for record in records:
        store.append(record)
    return store
