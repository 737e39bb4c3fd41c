"""Evidence-grounded evaluation harness for text-to-image models.

The pipeline decomposes each prompt into checkable expectations, turns
them into typed visual questions, answers the questions from the image
alone, and recomputes layered scores from the recorded evidence so every
number can be audited offline.
"""
from __future__ import annotations

from .agents import (
    Answer,
    Expectation,
    FactBundle,
    FulfillmentOverride,
    NuanceAssessment,
    NuanceItem,
    VisualQuestion,
    direct_judge,
    extract_expectations,
    formulate_questions,
    judge,
    merge_facts,
    perceive,
    template_versions,
)
from .analytics import (
    AgreementReport,
    DistributionStats,
    LeaderboardRow,
    PairwisePreference,
    PreferenceChoice,
    PreferenceCounts,
    agreement,
    distribution_stats,
    leaderboard,
    load_preferences,
    preference_tally,
    render_distribution,
    render_leaderboard,
)
from .catalog import (
    Catalog,
    Category,
    ExpectedCounts,
    OFFICIAL_SPLIT,
    PromptRecord,
    Subcategory,
    load_catalog,
    load_sample_catalog,
    sample,
    validate_counts,
    write_catalog,
)
from .errors import (
    AnalyticsError,
    CatalogError,
    GatewayError,
    ImageError,
    PayloadTooLargeError,
    RunConfigError,
    SchemaViolationError,
    ScriptExhaustedError,
    StageError,
    TransportError,
    WorldcheckError,
)
from .gateway import (
    ChatRequest,
    EndpointConfig,
    Gateway,
    HttpBackend,
    ImagePart,
    MockBackend,
    ResponseCache,
    SchemaSpec,
    StructuredResponse,
    TextPart,
    cache_key,
    extract_json_payload,
)
from .pipeline import (
    BatchResult,
    EvaluationRecord,
    ImageManifest,
    ImageRef,
    RunStore,
    Status,
    build_manifest,
    evaluate_batch,
    evaluate_direct,
    evaluate_image,
    load_image,
    round_mean_overall,
    summarize_rounds,
)
from .scoring import (
    DEFAULT_RUBRIC,
    FactLine,
    Importance,
    LayerScores,
    LedgerEntry,
    QuestionType,
    RubricConstants,
    aggregate,
    extract_fact_lines,
    score_all,
    score_layer1,
    score_layer2,
    score_layer3,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Answer",
    "Expectation",
    "FactBundle",
    "FulfillmentOverride",
    "NuanceAssessment",
    "NuanceItem",
    "VisualQuestion",
    "direct_judge",
    "extract_expectations",
    "formulate_questions",
    "judge",
    "merge_facts",
    "perceive",
    "template_versions",
    "AgreementReport",
    "DistributionStats",
    "LeaderboardRow",
    "PairwisePreference",
    "PreferenceChoice",
    "PreferenceCounts",
    "agreement",
    "distribution_stats",
    "leaderboard",
    "load_preferences",
    "preference_tally",
    "render_distribution",
    "render_leaderboard",
    "Catalog",
    "Category",
    "ExpectedCounts",
    "OFFICIAL_SPLIT",
    "PromptRecord",
    "Subcategory",
    "load_catalog",
    "load_sample_catalog",
    "sample",
    "validate_counts",
    "write_catalog",
    "AnalyticsError",
    "CatalogError",
    "GatewayError",
    "ImageError",
    "PayloadTooLargeError",
    "RunConfigError",
    "SchemaViolationError",
    "ScriptExhaustedError",
    "StageError",
    "TransportError",
    "WorldcheckError",
    "ChatRequest",
    "EndpointConfig",
    "Gateway",
    "HttpBackend",
    "ImagePart",
    "MockBackend",
    "ResponseCache",
    "SchemaSpec",
    "StructuredResponse",
    "TextPart",
    "cache_key",
    "extract_json_payload",
    "BatchResult",
    "EvaluationRecord",
    "ImageManifest",
    "ImageRef",
    "RunStore",
    "Status",
    "build_manifest",
    "evaluate_batch",
    "evaluate_direct",
    "evaluate_image",
    "load_image",
    "round_mean_overall",
    "summarize_rounds",
    "DEFAULT_RUBRIC",
    "FactLine",
    "Importance",
    "LayerScores",
    "LedgerEntry",
    "QuestionType",
    "RubricConstants",
    "aggregate",
    "extract_fact_lines",
    "score_all",
    "score_layer1",
    "score_layer2",
    "score_layer3",
]
