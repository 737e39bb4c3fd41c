"""Pipeline orchestration: staged runs, persistence, resume, determinism."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from worldcheck.errors import ImageError, RunConfigError
from worldcheck.gateway import Gateway, MockBackend, ResponseCache
from worldcheck.pipeline import (
    EvaluationRecord,
    ImageManifest,
    ImageRef,
    RunStore,
    Status,
    build_manifest,
    canonical_record_line,
    evaluate_batch,
    evaluate_image,
    load_image,
    round_mean_overall,
    summarize_rounds,
)
from worldcheck.scoring import DEFAULT_RUBRIC

from conftest import (
    ICE_CALLS_PER_ROUND,
    ICE_PROMPT,
    ICE_S1,
    ICE_S2,
    ICE_S3,
    ICE_S_PW,
    DIRECT_SCRIPT,
    ice_backend,
    ice_catalog,
    ice_gateway,
    image_dir_for,
    make_png,
    make_record,
    make_store,
    mock_cfg,
)

STAGE_ORDER = ("expectations", "questions", "perception", "judgment", "scoring")


def run_ice_once(tmp_path: Path):
    gw, backend = ice_gateway()
    image, ref = load_image(make_png(tmp_path / "ice.png"))
    record = evaluate_image(gw, mock_cfg(), DEFAULT_RUBRIC, ICE_PROMPT, image, ref, round_no=1)
    return record, backend


# --- Single image, staged ------------------------------------------------------


def test_staged_run_scores_and_evidence(tmp_path: Path) -> None:
    record, backend = run_ice_once(tmp_path)
    assert record.status.complete
    assert record.mode == "agentic"
    assert record.scores is not None
    assert record.scores.s1 == pytest.approx(ICE_S1)
    assert record.scores.s2 == pytest.approx(ICE_S2)
    assert record.scores.s3 == pytest.approx(ICE_S3)
    assert record.scores.s_pw == pytest.approx(ICE_S_PW)
    assert len(record.expectations) == 2
    assert len(record.questions) == 3
    assert len(record.answers) == 3
    assert len(record.fact_lines) == 3
    assert record.nuance is not None
    assert record.scores.thinking_process == record.nuance.thinking_process
    assert len(backend.requests) == ICE_CALLS_PER_ROUND


def test_staged_run_call_census_breakdown(tmp_path: Path) -> None:
    record, backend = run_ice_once(tmp_path)
    hints = [r.schema_hint for r in backend.requests]
    n_exp = len(record.expectations)
    n_q = len(record.questions)
    assert hints.count("expectations") == 1
    assert hints.count("questions") == n_exp
    assert hints.count("perception") == n_q
    assert hints.count("judgment") == 1
    assert len(hints) == 2 + n_exp + n_q


def test_stage_timing_keys_and_order(tmp_path: Path) -> None:
    record, _ = run_ice_once(tmp_path)
    assert set(record.timing) == set(STAGE_ORDER)
    for name in STAGE_ORDER:
        stamp = record.timing[name]
        assert stamp["end"] >= stamp["start"]
    for earlier, later in zip(STAGE_ORDER, STAGE_ORDER[1:]):
        assert record.timing[earlier]["end"] <= record.timing[later]["start"]


def test_perception_is_prompt_blind(tmp_path: Path) -> None:
    record, backend = run_ice_once(tmp_path)
    for req in backend.requests:
        if req.schema_hint == "perception":
            assert req.image is not None
            assert len(req.texts) == 1
            assert ICE_PROMPT.text not in req.texts[0]
        if req.schema_hint == "expectations":
            assert req.image is None


def test_failed_stage_becomes_failed_record(tmp_path: Path) -> None:
    backend = MockBackend.from_script(
        {"rules": [{"schema": "expectations", "responses": ['{"expectations": []}'], "repeat": True}]}
    )
    gw = Gateway(backend)
    image, ref = load_image(make_png(tmp_path / "ice.png"))
    record = evaluate_image(gw, mock_cfg(max_retries=0), DEFAULT_RUBRIC, ICE_PROMPT, image, ref, 1)
    assert not record.status.complete
    assert record.status.stage == "expectations"
    assert record.status.reason
    assert record.scores is None


def test_record_round_trip(tmp_path: Path) -> None:
    record, _ = run_ice_once(tmp_path)
    restored = EvaluationRecord.from_dict(record.to_dict())
    assert restored.to_dict() == record.to_dict()
    assert restored.key() == (ICE_PROMPT.id, 1)


def test_canonical_line_strips_timing(tmp_path: Path) -> None:
    record, _ = run_ice_once(tmp_path)
    with_timing = canonical_record_line(record.to_dict())
    without = canonical_record_line(record.to_dict(), include_timing=False)
    assert "timing" in with_timing
    assert "timing" not in without
    assert json.loads(without)["prompt"]["id"] == ICE_PROMPT.id


# --- Images ------------------------------------------------------------------------


def test_load_image_digest_and_media_type(tmp_path: Path) -> None:
    path = make_png(tmp_path / "x.png")
    part, ref = load_image(path)
    assert part.media_type == "image/png"
    assert ref.sha256 == hashlib.sha256(path.read_bytes()).hexdigest()
    assert ref.path == str(path)


def test_load_image_rejects_garbage(tmp_path: Path) -> None:
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(ImageError, match="decode"):
        load_image(bad)


def test_load_image_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ImageError, match="read"):
        load_image(tmp_path / "absent.png")


def test_image_manifest_directory_lookup(tmp_path: Path) -> None:
    catalog = ice_catalog(2)
    root = image_dir_for(tmp_path, catalog)
    manifest = ImageManifest.from_path(root)
    assert manifest.resolve(ICE_PROMPT.id) == root / f"{ICE_PROMPT.id}.png"
    assert manifest.resolve("nope") is None


def test_image_manifest_json_mapping(tmp_path: Path) -> None:
    (tmp_path / "nested").mkdir()
    make_png(tmp_path / "nested" / "pic.png")
    mapping_file = tmp_path / "map.json"
    mapping_file.write_text(json.dumps({ICE_PROMPT.id: "nested/pic.png"}), encoding="utf-8")
    manifest = ImageManifest.from_path(mapping_file)
    assert manifest.resolve(ICE_PROMPT.id) == tmp_path / "nested" / "pic.png"
    assert manifest.resolve("other") is None


def test_image_manifest_rejects_non_object(tmp_path: Path) -> None:
    bad = tmp_path / "map.json"
    bad.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ImageError, match="JSON object"):
        ImageManifest.from_path(bad)


# --- Batch evaluation ----------------------------------------------------------------


def test_batch_full_grid(tmp_path: Path) -> None:
    catalog = ice_catalog(3)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    gw, _ = ice_gateway()
    result = evaluate_batch(
        gw,
        mock_cfg(),
        DEFAULT_RUBRIC,
        catalog,
        images,
        out_dir=tmp_path / "run",
        rounds=4,
        concurrency=2,
    )
    assert result.new_complete == 12
    assert result.new_failed == 0
    assert result.skipped == ()
    assert result.already_done == 0
    records = result.store.records()
    assert len(records) == 12
    assert {r.key() for r in records} == {
        (p.id, n) for p in catalog for n in range(1, 5)
    }
    for record in records:
        assert record.scores.s_pw == pytest.approx(ICE_S_PW)


def test_batch_rerun_is_idempotent(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    gw, _ = ice_gateway()
    first = evaluate_batch(
        gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "run", rounds=2
    )
    assert first.new_complete == 2
    gw2, backend2 = ice_gateway()
    second = evaluate_batch(
        gw2, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "run", rounds=2
    )
    assert second.new_complete == 0
    assert second.already_done == 2
    assert backend2.requests == []
    assert len(second.store.records()) == 2


def test_batch_missing_image_skipped(tmp_path: Path) -> None:
    catalog = ice_catalog(2)
    root = tmp_path / "images"
    root.mkdir()
    make_png(root / f"{ICE_PROMPT.id}.png")
    gw, _ = ice_gateway()
    result = evaluate_batch(
        gw,
        mock_cfg(),
        DEFAULT_RUBRIC,
        catalog,
        ImageManifest.from_path(root),
        out_dir=tmp_path / "run",
        rounds=1,
    )
    assert result.skipped == ("pw-mech-0001",)
    assert result.new_complete == 1
    assert {r.prompt.id for r in result.store.records()} == {ICE_PROMPT.id}


def test_batch_unreadable_image_is_failed_record(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    root = tmp_path / "images"
    root.mkdir()
    (root / f"{ICE_PROMPT.id}.png").write_bytes(b"junk")
    gw, _ = ice_gateway()
    result = evaluate_batch(
        gw,
        mock_cfg(),
        DEFAULT_RUBRIC,
        catalog,
        ImageManifest.from_path(root),
        out_dir=tmp_path / "run",
        rounds=1,
    )
    assert result.new_failed == 1
    record = result.store.records()[0]
    assert record.status.stage == "image"


def test_batch_validates_arguments(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    gw, _ = ice_gateway()
    with pytest.raises(ValueError, match="rounds"):
        evaluate_batch(
            gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "r", rounds=0
        )
    with pytest.raises(ValueError, match="concurrency"):
        evaluate_batch(
            gw,
            mock_cfg(),
            DEFAULT_RUBRIC,
            catalog,
            images,
            out_dir=tmp_path / "r",
            rounds=1,
            concurrency=0,
        )
    with pytest.raises(ValueError, match="mode"):
        evaluate_batch(
            gw,
            mock_cfg(),
            DEFAULT_RUBRIC,
            catalog,
            images,
            out_dir=tmp_path / "r",
            rounds=1,
            mode="hybrid",
        )


# --- Determinism across worker counts ---------------------------------------------------


def test_concurrency_does_not_change_bytes(tmp_path: Path) -> None:
    catalog = ice_catalog(3)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    lines: list[list[str]] = []
    for workers in (1, 8):
        gw, _ = ice_gateway()
        result = evaluate_batch(
            gw,
            mock_cfg(),
            DEFAULT_RUBRIC,
            catalog,
            images,
            out_dir=tmp_path / f"run-{workers}",
            rounds=2,
            concurrency=workers,
        )
        lines.append(result.store.canonical_lines(include_timing=False))
    assert lines[0] == lines[1]
    assert len(lines[0]) == 6


# --- Cache replay --------------------------------------------------------------------------


def test_cached_rerun_needs_no_backend(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    cache_dir = tmp_path / "cache"
    gw = Gateway(ice_backend(), ResponseCache(cache_dir))
    first = evaluate_batch(
        gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "a", rounds=2
    )
    empty = MockBackend([])
    replay = evaluate_batch(
        Gateway(empty, ResponseCache(cache_dir)),
        mock_cfg(),
        DEFAULT_RUBRIC,
        catalog,
        images,
        out_dir=tmp_path / "b",
        rounds=2,
    )
    assert empty.requests == []
    assert replay.new_complete == 2
    assert first.store.canonical_lines() == replay.store.canonical_lines()


def test_rounds_are_distinct_cache_entries(tmp_path: Path) -> None:
    # Same request content per round except for the round tag, so a cached
    # round 1 must not short-circuit round 2.
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    backend = ice_backend()
    gw = Gateway(backend, ResponseCache(tmp_path / "cache"))
    evaluate_batch(
        gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "run", rounds=2
    )
    assert len(backend.requests) == 2 * ICE_CALLS_PER_ROUND


# --- Crash and resume ------------------------------------------------------------------------


class CrashingBackend:
    """Delegates to a mock until the fuse burns, then raises RuntimeError."""

    def __init__(self, inner: MockBackend, crash_after: int):
        self.inner = inner
        self.crash_after = crash_after
        self.calls = 0

    def complete(self, cfg, req) -> str:
        self.calls += 1
        if self.calls > self.crash_after:
            raise RuntimeError("simulated process crash")
        return self.inner.complete(cfg, req)


def test_crash_mid_batch_then_resume(tmp_path: Path) -> None:
    catalog = ice_catalog(3)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    out = tmp_path / "run"
    crashing = Gateway(CrashingBackend(ice_backend(), crash_after=10))
    with pytest.raises(RuntimeError, match="simulated"):
        evaluate_batch(
            crashing,
            mock_cfg(),
            DEFAULT_RUBRIC,
            catalog,
            images,
            out_dir=out,
            rounds=2,
            concurrency=1,
        )
    survivors = RunStore.open(out).completed_keys()
    assert len(survivors) == 1

    gw, _ = ice_gateway()
    resumed = evaluate_batch(
        gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=out, rounds=2, concurrency=1
    )
    assert resumed.already_done == 1
    assert resumed.new_complete == 5
    keys = {r.key() for r in resumed.store.records()}
    assert keys == {(p.id, n) for p in catalog for n in (1, 2)}
    assert len(resumed.store.records()) == 6


def test_resume_rejects_different_run_config(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    gw, _ = ice_gateway()
    evaluate_batch(
        gw, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "run", rounds=1
    )
    gw2, _ = ice_gateway()
    with pytest.raises(RunConfigError, match="refusing"):
        evaluate_batch(
            gw2, mock_cfg(), DEFAULT_RUBRIC, catalog, images, out_dir=tmp_path / "run", rounds=3
        )


# --- RunStore --------------------------------------------------------------------------------


def test_store_open_requires_manifest(tmp_path: Path) -> None:
    with pytest.raises(RunConfigError, match="manifest"):
        RunStore.open(tmp_path)


def test_store_seals_torn_tail(tmp_path: Path) -> None:
    store = make_store(tmp_path / "run", [make_record(ICE_PROMPT, 1, 7.5)])
    with open(store.root / RunStore.RECORDS, "a", encoding="utf-8") as fh:
        fh.write('{"prompt": {"id": "torn"')  # no newline: simulated crash
    reopened = RunStore.open(store.root)
    assert reopened.completed_keys() == {(ICE_PROMPT.id, 1)}
    reopened.append(make_record(ICE_PROMPT, 2, 8.0))
    assert reopened.completed_keys() == {(ICE_PROMPT.id, 1), (ICE_PROMPT.id, 2)}


def test_store_skips_blank_and_malformed_lines(tmp_path: Path) -> None:
    store = make_store(tmp_path / "run", [make_record(ICE_PROMPT, 1, 7.5)])
    with open(store.root / RunStore.RECORDS, "a", encoding="utf-8") as fh:
        fh.write("\n{broken}\n")
    assert len(RunStore.open(store.root).record_dicts()) == 1


# --- Manifest identity -----------------------------------------------------------------------


def test_run_id_tracks_configuration() -> None:
    catalog = ice_catalog(1)
    base = build_manifest(mock_cfg(), DEFAULT_RUBRIC, catalog, rounds=4, mode="agentic")
    same = build_manifest(mock_cfg(), DEFAULT_RUBRIC, catalog, rounds=4, mode="agentic")
    assert base["run_id"] == same["run_id"]
    more_rounds = build_manifest(mock_cfg(), DEFAULT_RUBRIC, catalog, rounds=5, mode="agentic")
    assert base["run_id"] != more_rounds["run_id"]
    direct = build_manifest(mock_cfg(), DEFAULT_RUBRIC, catalog, rounds=4, mode="direct")
    assert base["run_id"] != direct["run_id"]
    labeled = build_manifest(
        mock_cfg(), DEFAULT_RUBRIC, catalog, rounds=4, mode="agentic", label="sdxl"
    )
    assert base["run_id"] == labeled["run_id"]
    assert labeled["label"] == "sdxl"
    assert len(base["run_id"]) == 16


# --- Direct mode ------------------------------------------------------------------------------


def test_direct_mode_batch(tmp_path: Path) -> None:
    catalog = ice_catalog(2)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    backend = MockBackend.from_script(DIRECT_SCRIPT)
    result = evaluate_batch(
        Gateway(backend),
        mock_cfg(),
        DEFAULT_RUBRIC,
        catalog,
        images,
        out_dir=tmp_path / "run",
        rounds=2,
        mode="direct",
    )
    assert result.new_complete == 4
    assert len(backend.requests) == 4
    for record in result.store.records():
        assert record.mode == "direct"
        assert record.expectations == ()
        assert record.questions == ()
        assert record.fact_lines == ()
        assert record.nuance is None
        assert record.scores.s_pw == pytest.approx(6.0)
        assert set(record.timing) == {"direct"}


def test_direct_mode_out_of_range_reply_fails_record(tmp_path: Path) -> None:
    catalog = ice_catalog(1)
    images = ImageManifest.from_path(image_dir_for(tmp_path, catalog))
    backend = MockBackend.from_script(
        {
            "rules": [
                {
                    "schema": "direct_judgment",
                    "responses": [
                        {"layer1": 15, "layer2": 5, "layer3": 5, "thinking_process": "x"}
                    ],
                    "repeat": True,
                }
            ]
        }
    )
    result = evaluate_batch(
        Gateway(backend),
        mock_cfg(max_retries=0),
        DEFAULT_RUBRIC,
        catalog,
        images,
        out_dir=tmp_path / "run",
        rounds=1,
        mode="direct",
    )
    assert result.new_failed == 1
    assert result.store.records()[0].status.stage == "direct"


# --- Round summaries --------------------------------------------------------------------------


def test_summarize_rounds_means() -> None:
    records = [make_record(ICE_PROMPT, n, s) for n, s in enumerate((8.0, 8.0, 8.0, 8.0), 1)]
    summary = summarize_rounds(records)
    assert summary.rounds_complete == 4
    assert summary.rounds_failed == 0
    assert summary.mean_s_pw == pytest.approx(8.0)

    mixed = [make_record(ICE_PROMPT, 1, 6.0), make_record(ICE_PROMPT, 2, 8.0)]
    assert summarize_rounds(mixed).mean_s_pw == pytest.approx(7.0)


def test_summarize_rounds_counts_failures() -> None:
    records = [
        make_record(ICE_PROMPT, 1, 6.0),
        make_record(ICE_PROMPT, 2, 7.0),
        make_record(ICE_PROMPT, 3, 8.0),
        make_record(ICE_PROMPT, 4, None),
    ]
    summary = summarize_rounds(records)
    assert summary.rounds_complete == 3
    assert summary.rounds_failed == 1
    assert summary.mean_s_pw == pytest.approx(7.0)


def test_summarize_rounds_rejects_bad_input() -> None:
    with pytest.raises(ValueError, match="no records"):
        summarize_rounds([])
    with pytest.raises(ValueError, match="no complete rounds"):
        summarize_rounds([make_record(ICE_PROMPT, 1, None)])
    other = list(ice_catalog(2))[1]
    records = [make_record(ICE_PROMPT, 1, 5.0), make_record(other, 1, 5.0)]
    with pytest.raises(ValueError, match="multiple prompts"):
        summarize_rounds(records)


def test_round_mean_overall_by_prompt(tmp_path: Path) -> None:
    catalog = ice_catalog(2)
    other = list(catalog)[1]
    store = make_store(
        tmp_path / "run",
        [
            make_record(ICE_PROMPT, 1, 6.0),
            make_record(ICE_PROMPT, 2, 8.0),
            make_record(other, 1, 4.0),
            make_record(other, 2, None),
        ],
    )
    means = round_mean_overall(store)
    assert means == {ICE_PROMPT.id: pytest.approx(7.0), other.id: pytest.approx(4.0)}


def test_status_helpers() -> None:
    ok = Status.ok()
    assert ok.complete and ok.stage is None
    failed = Status.failed("judgment", "boom")
    assert not failed.complete
    assert failed.to_dict() == {"state": "failed", "stage": "judgment", "reason": "boom"}
