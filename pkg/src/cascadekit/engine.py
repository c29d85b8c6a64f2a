"""Per-item cascade orchestration and deterministic batch execution.

The pipeline per item: softmax over the raw base scores, entropy gate,
then either an early exit with the base argmax or a single refinement call
over the top-k candidates. Every random choice (option shuffling, oracle
draws) consumes an independent per-item stream derived from the run seed
and the item id, so results are reproducible item-by-item and independent
of batch partitioning or concurrency.
"""

from __future__ import annotations

import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .backends import RefineContext, Refiner
from .core import CandidateSet, LabelSet, entropy, margin, softmax, top1_index, top_k
from .data import ScoreRecord
from .errors import RefinerError, ValidationError
from .prompts import (
    ExemplarBank,
    parse_response,
    prompt_digest,
    render_few_shot,
    render_zero_shot,
)

CANDIDATE_ORDERS = ("sorted_desc", "shuffled", "reversed")

STAGE_BASE = "base"
STAGE_REFINED = "refined"

OUTCOME_EARLY_EXIT = "early_exit"
OUTCOME_REFINE = "refine"

_PARSE_POLICIES = ("exact", "normalized", "normalized_then_substring")


@dataclass(frozen=True)
class CascadeConfig:
    """Everything that shapes a run, hashable and snapshot-friendly.

    ``tau`` is the entropy threshold in nats; ``tau=0`` disables early exit
    entirely (entropy is never negative), which is the gate-off default.
    """

    k: int = 5
    tau: float = 0.0
    temperature: float = 1.0
    few_shot: bool = False
    shots_per_class: int = 0
    candidate_order: str = "sorted_desc"
    seed: int = 0
    refiner_ref: str = "oracle"
    parse_policy: str = "normalized_then_substring"
    template_id: str | None = None
    subject: str = "class"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.tau < 0:
            raise ValidationError(f"tau must be >= 0, got {self.tau}")
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if self.candidate_order not in CANDIDATE_ORDERS:
            raise ValidationError(
                f"candidate_order must be one of {CANDIDATE_ORDERS}, got {self.candidate_order!r}"
            )
        if self.parse_policy not in _PARSE_POLICIES:
            raise ValidationError(
                f"parse_policy must be one of {_PARSE_POLICIES}, got {self.parse_policy!r}"
            )
        if self.few_shot and self.shots_per_class < 1:
            raise ValidationError("few_shot requires shots_per_class >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@dataclass(frozen=True)
class GateDecision:
    """Outcome of the entropy gate for one item.

    Early exit happens iff entropy is strictly below tau; the exit label is
    the distribution argmax. A refine decision carries the canonical
    (descending-probability) candidate set plus the label indices in the
    order they will be presented to the refiner.
    """

    entropy: float
    outcome: str
    label_index: int | None = None
    candidates: CandidateSet | None = None
    presented: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.outcome == OUTCOME_EARLY_EXIT:
            if self.label_index is None or self.candidates is not None:
                raise ValidationError("early exit carries a label index and no candidates")
        elif self.outcome == OUTCOME_REFINE:
            if self.candidates is None or self.presented is None:
                raise ValidationError("refine carries candidates and a presentation order")
            if sorted(self.presented) != sorted(self.candidates.indices):
                raise ValidationError("presentation order must permute the candidate indices")
        else:
            raise ValidationError(f"unknown gate outcome {self.outcome!r}")


@dataclass(frozen=True)
class Prediction:
    """Final label for one item with full provenance."""

    item_id: str
    predicted: int
    truth: int
    stage: str
    entropy: float
    margin: float
    candidates: CandidateSet | None = None
    presented: tuple[int, ...] | None = None
    raw_refiner_text: str | None = None
    parse_outcome: str | None = None
    truth_absent_from_candidates: bool | None = None
    latency_base_ms: float | None = None
    latency_refine_ms: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.stage == STAGE_BASE:
            if self.candidates is not None or self.raw_refiner_text is not None:
                raise ValidationError("base-stage predictions carry no candidates or refiner text")
        elif self.stage == STAGE_REFINED:
            if self.candidates is None:
                raise ValidationError("refined predictions must carry their candidate set")
            if self.predicted not in self.candidates.indices:
                raise ValidationError(
                    f"refined prediction {self.predicted} is outside the candidate set"
                )
        else:
            raise ValidationError(f"unknown stage {self.stage!r}")

    @property
    def correct(self) -> bool:
        return self.predicted == self.truth

    @property
    def base_argmax(self) -> int:
        """The base scorer's argmax, recoverable from either stage."""
        if self.stage == STAGE_BASE:
            return self.predicted
        assert self.candidates is not None
        return self.candidates.indices[0]


def item_seed(run_seed: int, item_id: str, stream: str) -> int:
    """Stable 64-bit per-item seed mixing the run seed, item id, and a
    stream tag, so option shuffling and oracle draws never share state."""
    digest = hashlib.sha256(f"{run_seed}\x1f{item_id}\x1f{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def item_rng(run_seed: int, item_id: str, stream: str) -> random.Random:
    return random.Random(item_seed(run_seed, item_id, stream))


def arrange_candidates(
    candidates: CandidateSet, order: str, rng: random.Random | None = None
) -> tuple[int, ...]:
    """Label indices in presentation order for the given ordering policy."""
    indices = list(candidates.indices)
    if order == "sorted_desc":
        return tuple(indices)
    if order == "reversed":
        return tuple(reversed(indices))
    if order == "shuffled":
        if rng is None:
            raise ValidationError("shuffled candidate order requires an rng")
        rng.shuffle(indices)
        return tuple(indices)
    raise ValidationError(f"unknown candidate order {order!r}")


def gate(
    dist: "Sequence[float]",
    labels: LabelSet,
    config: CascadeConfig,
    order_rng: random.Random | None = None,
) -> GateDecision:
    """Entropy-gate one distribution: exit early or select candidates."""
    h = entropy(dist)
    if h < config.tau:
        return GateDecision(entropy=h, outcome=OUTCOME_EARLY_EXIT, label_index=top1_index(dist))
    candidates = top_k(dist, labels, config.k)
    presented = arrange_candidates(candidates, config.candidate_order, order_rng)
    return GateDecision(
        entropy=h, outcome=OUTCOME_REFINE, candidates=candidates, presented=presented
    )


def classify_item(
    record: ScoreRecord,
    labels: LabelSet,
    config: CascadeConfig,
    refiner: Refiner,
    exemplars: ExemplarBank | None = None,
) -> Prediction:
    """Run the full cascade for one item.

    A refiner failure (after the backend's own retries) does not raise: the
    prediction degrades to the highest-probability candidate with
    ``parse_outcome="fallback_top1"`` and the error recorded, so long remote
    runs survive transient outages without distorting the report silently.
    """
    if len(record.raw_scores) != len(labels):
        raise ValidationError(
            f"item {record.item_id!r}: {len(record.raw_scores)} scores for {len(labels)} labels"
        )
    dist = softmax(record.raw_scores, config.temperature)
    h = entropy(dist)
    m = margin(dist)

    order_rng = (
        item_rng(config.seed, record.item_id, "order")
        if config.candidate_order == "shuffled"
        else None
    )
    decision = gate(dist, labels, config, order_rng)
    if decision.outcome == OUTCOME_EARLY_EXIT:
        return Prediction(
            item_id=record.item_id,
            predicted=decision.label_index,
            truth=record.truth,
            stage=STAGE_BASE,
            entropy=h,
            margin=m,
        )

    assert decision.candidates is not None and decision.presented is not None
    presented_labels = tuple(labels[i] for i in decision.presented)
    image_ref = record.image_ref or f"item://{record.item_id}"
    if config.few_shot:
        if exemplars is None:
            raise ValidationError(
                f"item {record.item_id!r}: few-shot run requires an exemplar bank"
            )
        bundle = render_few_shot(
            presented_labels,
            exemplars,
            image_ref,
            template_id=config.template_id or "fewshot",
            subject=config.subject,
        )
    else:
        bundle = render_zero_shot(
            presented_labels,
            image_ref,
            template_id=config.template_id or "prompt2",
            subject=config.subject,
        )
    ctx = RefineContext(
        item_id=record.item_id,
        prompt_digest=prompt_digest(bundle),
        truth_label=labels[record.truth],
        rng=item_rng(config.seed, record.item_id, "oracle"),
    )
    error: str | None = None
    raw_text: str | None = None
    latency: float | None = None
    try:
        response = refiner.refine(bundle, ctx)
        raw_text = response.text
        latency = response.latency_ms
        predicted, outcome = parse_response(
            response.text, decision.candidates, labels, config.parse_policy
        )
    except RefinerError as exc:
        predicted = decision.candidates.indices[0]
        outcome = "fallback_top1"
        error = f"{type(exc).__name__}: {exc}"

    return Prediction(
        item_id=record.item_id,
        predicted=predicted,
        truth=record.truth,
        stage=STAGE_REFINED,
        entropy=h,
        margin=m,
        candidates=decision.candidates,
        presented=decision.presented,
        raw_refiner_text=raw_text,
        parse_outcome=outcome,
        truth_absent_from_candidates=record.truth not in decision.candidates.indices,
        latency_refine_ms=latency,
        error=error,
    )


def classify_batch(
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    config: CascadeConfig,
    refiner: Refiner,
    exemplars: ExemplarBank | None = None,
    max_in_flight: int = 1,
    on_progress: Callable[[int, int], None] | None = None,
) -> list[Prediction]:
    """Classify a batch; output order always matches input order.

    Items may be processed concurrently up to ``max_in_flight`` (useful for
    remote backends); per-item seeding keeps results identical to sequential
    execution. Any item-level validation error aborts the whole batch,
    naming the item.
    """
    if not records:
        raise ValidationError("record batch is empty")
    if max_in_flight < 1:
        raise ValidationError(f"max_in_flight must be >= 1, got {max_in_flight}")
    ids = [record.item_id for record in records]
    if len(set(ids)) != len(ids):
        duplicate = next(i for i in ids if ids.count(i) > 1)
        raise ValidationError(f"duplicate item_id in batch: {duplicate!r}")

    def one(record: ScoreRecord) -> Prediction:
        try:
            return classify_item(record, labels, config, refiner, exemplars)
        except ValidationError as exc:
            raise ValidationError(f"item {record.item_id!r}: {exc}") from exc

    total = len(records)
    predictions: list[Prediction] = []
    if max_in_flight == 1:
        for i, record in enumerate(records):
            predictions.append(one(record))
            if on_progress is not None:
                on_progress(i + 1, total)
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            for i, prediction in enumerate(pool.map(one, records)):
                predictions.append(prediction)
                if on_progress is not None:
                    on_progress(i + 1, total)
    return predictions


def prediction_to_dict(prediction: Prediction, labels: LabelSet | None = None) -> dict:
    """JSON-ready projection of a prediction; label strings are included for
    readability when a label set is supplied."""
    out: dict = {
        "item_id": prediction.item_id,
        "predicted": prediction.predicted,
        "truth": prediction.truth,
        "stage": prediction.stage,
        "entropy": prediction.entropy,
        "margin": prediction.margin,
        "candidates": [[i, p] for i, p in prediction.candidates.entries]
        if prediction.candidates
        else None,
        "presented": list(prediction.presented) if prediction.presented else None,
        "raw_refiner_text": prediction.raw_refiner_text,
        "parse_outcome": prediction.parse_outcome,
        "truth_absent_from_candidates": prediction.truth_absent_from_candidates,
        "latency_base_ms": prediction.latency_base_ms,
        "latency_refine_ms": prediction.latency_refine_ms,
        "error": prediction.error,
    }
    if labels is not None:
        out["predicted_label"] = labels[prediction.predicted]
        out["truth_label"] = labels[prediction.truth]
    return out


def prediction_from_dict(obj: dict) -> Prediction:
    candidates = None
    if obj.get("candidates"):
        entries = tuple((int(i), float(p)) for i, p in obj["candidates"])
        candidates = CandidateSet(entries=entries, k=len(entries))
    return Prediction(
        item_id=obj["item_id"],
        predicted=int(obj["predicted"]),
        truth=int(obj["truth"]),
        stage=obj["stage"],
        entropy=float(obj["entropy"]),
        margin=float(obj["margin"]),
        candidates=candidates,
        presented=tuple(int(i) for i in obj["presented"]) if obj.get("presented") else None,
        raw_refiner_text=obj.get("raw_refiner_text"),
        parse_outcome=obj.get("parse_outcome"),
        truth_absent_from_candidates=obj.get("truth_absent_from_candidates"),
        latency_base_ms=obj.get("latency_base_ms"),
        latency_refine_ms=obj.get("latency_refine_ms"),
        error=obj.get("error"),
    )


def write_predictions(
    predictions: Sequence[Prediction], path: str | Path, labels: LabelSet | None = None
) -> None:
    """Persist predictions as newline-delimited JSON (one object per item)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for prediction in predictions:
            handle.write(json.dumps(prediction_to_dict(prediction, labels), sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"predictions file not found: {path}")
    predictions: list[Prediction] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                predictions.append(prediction_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: invalid prediction record: {exc}") from exc
    if not predictions:
        raise ValidationError(f"{path}: predictions file is empty")
    return predictions


def with_tau(config: CascadeConfig, tau: float) -> CascadeConfig:
    return replace(config, tau=tau)


def with_k(config: CascadeConfig, k: int) -> CascadeConfig:
    return replace(config, k=k)


def with_order(config: CascadeConfig, candidate_order: str) -> CascadeConfig:
    return replace(config, candidate_order=candidate_order)
