"""Command-line entry points.

Exit codes: 0 success, 1 completed with evaluation failures, 2 usage or
configuration error, 3 transport/endpoint error. Logs go to stderr,
reports to stdout. Every subcommand runs offline given --mock or file
inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from . import analytics
from .analytics import agreement, leaderboard, load_preferences, render_distribution, render_leaderboard
from .catalog import ExpectedCounts, OFFICIAL_SPLIT, load_catalog, validate_counts
from .errors import (
    AnalyticsError,
    CatalogError,
    ImageError,
    RunConfigError,
    TransportError,
    WorldcheckError,
)
from .gateway import (
    BASE_URL_ENV,
    CACHE_DIR_ENV,
    EndpointConfig,
    Gateway,
    HttpBackend,
    MockBackend,
    ResponseCache,
)
from .pipeline import ImageManifest, RunStore, evaluate_batch, round_mean_overall
from .scoring import (
    DEFAULT_RUBRIC,
    FactLine,
    RubricConstants,
    score_all,
)
from .agents import NuanceAssessment

logger = logging.getLogger("worldcheck.cli")

EXIT_OK = 0
EXIT_EVAL_FAILURES = 1
EXIT_USAGE = 2
EXIT_TRANSPORT = 3


class UsageError(Exception):
    pass


def _first(*values):
    return next((v for v in values if v is not None), None)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def _endpoint_config(args, config: dict) -> EndpointConfig:
    """Flags win over environment, environment over the config file."""
    mock = getattr(args, "mock", None)
    base_url = _first(
        getattr(args, "endpoint", None),
        os.environ.get(BASE_URL_ENV),
        config.get("base_url"),
        "mock://script" if mock else None,
    )
    if base_url is None:
        raise UsageError("no endpoint configured (use --endpoint, env, config, or --mock)")
    model = _first(
        getattr(args, "model", None),
        config.get("model"),
        "mock-judge" if mock else None,
    )
    if model is None:
        raise UsageError("no model configured (use --model or config)")
    try:
        return EndpointConfig(
            base_url=base_url,
            model_name=model,
            api_key=config.get("api_key"),
            timeout=float(_first(getattr(args, "timeout", None), config.get("timeout"), 120.0)),
            max_retries=int(
                _first(getattr(args, "max_retries", None), config.get("max_retries"), 2)
            ),
            temperature=float(
                _first(getattr(args, "temperature", None), config.get("temperature"), 0.0)
            ),
            max_concurrent_requests=int(
                _first(getattr(args, "concurrency", None), config.get("concurrency"), 4)
            ),
            retry_backoff=float(config.get("retry_backoff", 0.5)),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _build_gateway(args, config: dict) -> Gateway:
    mock = getattr(args, "mock", None)
    if mock:
        try:
            script = json.loads(Path(mock).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read mock script {mock}: {exc}") from exc
        backend = MockBackend.from_script(script)
    else:
        backend = HttpBackend()
    cache = None
    if not getattr(args, "no_cache", False):
        cache_dir = _first(
            getattr(args, "cache", None),
            os.environ.get(CACHE_DIR_ENV),
            config.get("cache_dir"),
        )
        if cache_dir:
            cache = ResponseCache(cache_dir)
    return Gateway(backend, cache)


def cmd_validate_catalog(args) -> int:
    cat = load_catalog(args.catalog)
    counts = cat.counts()
    if args.expected:
        try:
            expected = ExpectedCounts.from_dict(
                json.loads(Path(args.expected).read_text(encoding="utf-8"))
            )
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read expected counts {args.expected}: {exc}") from exc
    elif args.official:
        expected = OFFICIAL_SPLIT
    else:
        print(f"{args.catalog}: {counts.total} records, well-formed")
        for cat_name, n in counts.categories.items():
            print(f"  {cat_name.value}: {n}")
        return EXIT_OK
    report = validate_counts(cat, expected)
    for row in report.rows:
        want = "-" if row.expected is None else str(row.expected)
        status = "ok" if row.matches else "MISMATCH"
        print(f"{row.kind:<12} {row.name:<24} actual={row.actual:<6} expected={want:<6} {status}")
    if not report.passed:
        print(f"{len(report.mismatches)} mismatched row(s)", file=sys.stderr)
        return EXIT_USAGE
    print("counts match")
    return EXIT_OK


def _run_batch(args, mode: str) -> int:
    config = _load_config(args.config)
    cat = load_catalog(args.catalog)
    images = ImageManifest.from_path(args.images)
    cfg = _endpoint_config(args, config)
    gateway = _build_gateway(args, config)
    rounds = int(_first(args.rounds, config.get("rounds"), 4))
    concurrency = cfg.max_concurrent_requests
    result = evaluate_batch(
        gateway,
        cfg,
        DEFAULT_RUBRIC,
        cat,
        images,
        out_dir=args.out,
        rounds=rounds,
        concurrency=concurrency,
        label=args.label,
        mode=mode,
    )
    records = result.store.records()
    complete = sum(1 for r in records if r.status.complete)
    failed = len(records) - complete
    by_prompt: dict[str, list] = {}
    for record in records:
        by_prompt.setdefault(record.prompt.id, []).append(record)
    for prompt in cat:
        rows = by_prompt.get(prompt.id)
        if not rows:
            continue
        done = [r for r in rows if r.status.complete and r.scores is not None]
        if done:
            mean = statistics.fmean(r.scores.s_pw for r in done)
            print(
                f"{prompt.id}: {len(done)}/{len(rows)} round(s) complete,"
                f" mean score {mean:.4f}"
            )
        else:
            print(f"{prompt.id}: 0/{len(rows)} round(s) complete")
    print(
        f"{args.out}: {complete} complete, {failed} failed,"
        f" {len(result.skipped)} prompt(s) skipped,"
        f" {result.already_done} record(s) carried over"
    )
    for prompt_id in result.skipped:
        print(f"skipped {prompt_id}: no image", file=sys.stderr)
    return EXIT_EVAL_FAILURES if failed else EXIT_OK


def cmd_evaluate(args) -> int:
    return _run_batch(args, "agentic")


def cmd_direct_judge(args) -> int:
    return _run_batch(args, "direct")


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad {what}: {exc}") from exc


def _rubric_from_args(args) -> RubricConstants:
    kwargs = {}
    if args.weights:
        w = _parse_floats(args.weights, 3, "--weights")
        kwargs["layer_weights"] = (w[0], w[1], w[2])
    if args.penalties:
        p = _parse_floats(args.penalties, 3, "--penalties")
        kwargs["penalty_table"] = {3: p[0], 2: p[1], 1: p[2]}
    try:
        return RubricConstants(**kwargs) if kwargs else DEFAULT_RUBRIC
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_score(args) -> int:
    """Offline rescoring from serialized fact lines, no network involved."""
    rubric = _rubric_from_args(args)
    try:
        text = Path(args.facts).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read facts file {args.facts}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            lines = [FactLine.from_dict(d) for d in doc["fact_lines"]]
            if not doc.get("nuance"):
                raise ValueError("missing nuance assessment")
            nuance = NuanceAssessment.from_dict(doc["nuance"])
        except (json.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{args.facts}:{lineno}: {exc}") from exc
        scores = score_all(lines, nuance, rubric)
        out = {"id": doc.get("id")} if doc.get("id") else {}
        out.update(scores.to_dict())
        print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _labeled_stores(run_dirs) -> dict[str, RunStore]:
    stores: dict[str, RunStore] = {}
    for run_dir in run_dirs:
        store = RunStore.open(run_dir)
        label = store.manifest().get("label") or Path(run_dir).name
        base = label
        n = 2
        while label in stores:
            label = f"{base}#{n}"
            n += 1
        stores[label] = store
    return stores


def cmd_report(args) -> int:
    stores = _labeled_stores(args.runs)
    rows = leaderboard(stores, overall=args.overall)
    sys.stdout.write(render_leaderboard(rows, fmt=args.format))
    if args.dist:
        for label, store in stores.items():
            scores = [
                r.scores.s_pw
                for r in store.records()
                if r.status.complete and r.scores is not None
            ]
            stats = analytics.distribution_stats(scores)
            sys.stdout.write("\n" + render_distribution(stats, label=label))
    return EXIT_OK


def cmd_agree(args) -> int:
    prefs = load_preferences(args.prefs)
    scores_a = round_mean_overall(RunStore.open(args.run_a))
    scores_b = round_mean_overall(RunStore.open(args.run_b))
    report = agreement(prefs, scores_a, scores_b, split_policy=args.split_policy)
    for row in report.rows:
        if row.agree is None:
            verdict = "excluded (no majority)"
        elif row.agree:
            verdict = "agree"
        else:
            verdict = "disagree"
        majority = row.majority or "-"
        print(
            f"{row.prompt_id}\tvotes A={row.votes_a} B={row.votes_b}"
            f"\tmajority={majority}"
            f"\tscore A={row.score_a:.4f} B={row.score_b:.4f}"
            f"\t{verdict}"
        )
    denominator = report.prompts if report.split_policy == "disagree" else report.with_majority
    print(
        f"agreement rate {report.rate:.4f}"
        f" ({report.agreed}/{denominator}, policy={report.split_policy})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="worldcheck",
        description="Evidence-grounded evaluation of text-to-image models",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-catalog", help="check a catalog file and its counts")
    p.add_argument("catalog", help="line-delimited catalog file")
    p.add_argument("--official", action="store_true", help="check the published category split")
    p.add_argument("--expected", help="JSON file with expected counts")
    p.set_defaults(func=cmd_validate_catalog)

    def add_batch_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--catalog", required=True, help="catalog file")
        p.add_argument("--images", required=True, help="image directory or JSON manifest")
        p.add_argument("--out", required=True, help="run directory (created or resumed)")
        p.add_argument("--rounds", type=int, default=None, help="scoring rounds per image (default 4)")
        p.add_argument("--concurrency", type=int, default=None, help="parallel requests (default 4)")
        p.add_argument("--label", default=None, help="model label for reports")
        p.add_argument("--endpoint", default=None, help="judge endpoint base URL")
        p.add_argument("--model", default=None, help="judge model name")
        p.add_argument("--temperature", type=float, default=None)
        p.add_argument("--timeout", type=float, default=None, help="request timeout seconds")
        p.add_argument("--max-retries", type=int, default=None, dest="max_retries")
        p.add_argument("--mock", default=None, help="mock script file, run fully offline")
        p.add_argument("--cache", default=None, help="response cache directory")
        p.add_argument("--no-cache", action="store_true", dest="no_cache")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("evaluate", help="run the staged judge over a catalog")
    add_batch_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("direct-judge", help="run the single-step judge baseline")
    add_batch_flags(p)
    p.set_defaults(func=cmd_direct_judge)

    p = sub.add_parser("score", help="rescore serialized fact lines offline")
    p.add_argument("--facts", required=True, help="line-delimited facts file")
    p.add_argument("--weights", default=None, help="layer weights, e.g. 0.25,0.5,0.25")
    p.add_argument("--penalties", default=None, help="existence penalties high,medium,low")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="leaderboard over one or more runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--overall", choices=("records", "cells"), default="records")
    p.add_argument("--dist", action="store_true", help="append distribution stats per run")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("agree", help="human-agreement rate between votes and two runs")
    p.add_argument("--prefs", required=True, help="TSV votes: prompt, annotator, choice")
    p.add_argument("--run-a", required=True, dest="run_a")
    p.add_argument("--run-b", required=True, dest="run_b")
    p.add_argument(
        "--split-policy",
        choices=("exclude", "disagree"),
        default="exclude",
        dest="split_policy",
    )
    p.set_defaults(func=cmd_agree)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (
        UsageError,
        CatalogError,
        RunConfigError,
        AnalyticsError,
        ImageError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WorldcheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
