"""Two-stage classification cascade with an entropy gate.

A cheap base scorer's probability distribution is gated on Shannon entropy:
confident items exit early with the argmax, uncertain items are refined by
an expensive candidate-constrained second stage. The package covers the
numeric core, the orchestration engine, interchangeable refinement backends
(test oracle, record/replay, remote chat-completion endpoints), dataset
ingestion with planted synthetic data, and the full evaluation harness
(threshold and candidate-count sweeps, margin buckets, error buckets,
option-order ablations).
"""

from .backends import (
    EndpointConfig,
    FirstCandidateRefiner,
    OracleRefiner,
    RefineContext,
    Refiner,
    RefinerResponse,
    RemoteRefiner,
    ReplayRefiner,
)
from .core import (
    CandidateSet,
    LabelSet,
    entropy,
    margin,
    normalize_label,
    softmax,
    top1_index,
    top_k,
)
from .data import (
    DatasetManifest,
    ScoreRecord,
    build_exemplar_bank,
    load_dataset,
    load_exemplar_listing,
    load_label_set,
    load_manifest,
    load_scores,
    save_label_set,
    save_scores,
    synthesize_dataset,
    synthesize_exemplar_listing,
)
from .engine import (
    CascadeConfig,
    GateDecision,
    Prediction,
    classify_batch,
    classify_item,
    gate,
    item_rng,
    item_seed,
    read_predictions,
    write_predictions,
)
from .errors import (
    CascadeKitError,
    DigestMismatchError,
    MissingRecordingError,
    RefinerError,
    RemoteHTTPError,
    RemoteProtocolError,
    RemoteTimeoutError,
    ValidationError,
)
from .evaluation import (
    CostModel,
    ErrorBuckets,
    EvalReport,
    MarginBucket,
    SweepPoint,
    base_accuracies,
    emit_report,
    error_analysis,
    evaluate,
    margin_analysis,
    order_sensitivity,
    report_from_dict,
    report_to_dict,
    sweep_k,
    sweep_tau,
)
from .prompts import (
    ExemplarBank,
    PromptBundle,
    parse_response,
    prompt_digest,
    render_explanation,
    render_few_shot,
    render_zero_shot,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "CascadeConfig",
    "CascadeKitError",
    "CostModel",
    "DatasetManifest",
    "DigestMismatchError",
    "EndpointConfig",
    "ErrorBuckets",
    "EvalReport",
    "ExemplarBank",
    "FirstCandidateRefiner",
    "GateDecision",
    "LabelSet",
    "MarginBucket",
    "MissingRecordingError",
    "OracleRefiner",
    "Prediction",
    "PromptBundle",
    "RefineContext",
    "Refiner",
    "RefinerError",
    "RefinerResponse",
    "RemoteHTTPError",
    "RemoteProtocolError",
    "RemoteRefiner",
    "RemoteTimeoutError",
    "ReplayRefiner",
    "ScoreRecord",
    "SweepPoint",
    "ValidationError",
    "base_accuracies",
    "build_exemplar_bank",
    "classify_batch",
    "classify_item",
    "emit_report",
    "entropy",
    "error_analysis",
    "evaluate",
    "gate",
    "item_rng",
    "item_seed",
    "load_dataset",
    "load_exemplar_listing",
    "load_label_set",
    "load_manifest",
    "load_scores",
    "margin",
    "margin_analysis",
    "normalize_label",
    "order_sensitivity",
    "parse_response",
    "prompt_digest",
    "read_predictions",
    "render_explanation",
    "render_few_shot",
    "render_zero_shot",
    "report_from_dict",
    "report_to_dict",
    "save_label_set",
    "save_scores",
    "softmax",
    "sweep_k",
    "sweep_tau",
    "synthesize_dataset",
    "synthesize_exemplar_listing",
    "top1_index",
    "top_k",
    "write_predictions",
]
