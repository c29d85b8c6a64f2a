"""Metrics, sweeps, and analyses over prediction sequences.

Everything aggregates immutable predictions with counts and sums only, so
results are order-insensitive and exact: accuracies are stored as rational
counts alongside floats, which is what makes the identity checks (cascade
equals top-k under a perfect refiner, gate-off equals top-1) testable as
equalities rather than tolerances.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backends import Refiner
from .core import LabelSet, softmax
from .data import ScoreRecord
from .engine import (
    STAGE_BASE,
    STAGE_REFINED,
    CascadeConfig,
    Prediction,
    classify_batch,
)
from .errors import ValidationError
from .prompts import ExemplarBank

REPORT_SCHEMA_VERSION = 1

MARGIN_BUCKET_COUNT = 5


@dataclass(frozen=True)
class CostModel:
    """Two-parameter latency model for throughput estimates.

    Wall-clock speed depends on serving hardware we do not reproduce, so
    throughput is estimated from declared (or measured) mean stage latencies
    instead: every item pays the base latency, refined items additionally
    pay the refine latency.
    """

    latency_base_ms: float = 5.0
    latency_refine_ms: float = 500.0

    def __post_init__(self) -> None:
        if self.latency_base_ms <= 0 or self.latency_refine_ms < 0:
            raise ValidationError("cost model latencies must be positive")

    def est_throughput(self, fraction_refined: float) -> float:
        """Estimated items/second at a given refined fraction."""
        return 1000.0 / (self.latency_base_ms + fraction_refined * self.latency_refine_ms)


@dataclass(frozen=True)
class SweepPoint:
    param: float
    accuracy: float
    fraction_refined: float
    est_throughput: float
    refiner_calls: int
    n_correct: int
    n_items: int


@dataclass(frozen=True)
class MarginBucket:
    """One margin interval with base and cascade accuracy side by side."""

    lo: float
    hi: float
    n: int
    base_correct: int
    cascade_correct: int

    @property
    def base_acc(self) -> float | None:
        return self.base_correct / self.n if self.n else None

    @property
    def cascade_acc(self) -> float | None:
        return self.cascade_correct / self.n if self.n else None

    @property
    def gap(self) -> float | None:
        if not self.n:
            return None
        return (self.cascade_correct - self.base_correct) / self.n


@dataclass(frozen=True)
class ErrorBuckets:
    """Mutually exclusive decomposition of every erroneous prediction."""

    base_wrong_early_exit: int
    refined_wrong_truth_absent: int
    refined_wrong_truth_present: int

    @property
    def total(self) -> int:
        return (
            self.base_wrong_early_exit
            + self.refined_wrong_truth_absent
            + self.refined_wrong_truth_present
        )


@dataclass
class EvalReport:
    """Aggregated metrics, curves, and bucket tables for one run."""

    run_config: CascadeConfig
    cost_model: CostModel
    n_items: int
    counts: dict[str, int]
    top1_base: float
    topk_base: float
    cascade_accuracy: float
    fraction_refined: float
    refiner_calls: int
    mean_latency_base_ms: float | None
    mean_latency_refine_ms: float | None
    margin_buckets: list[MarginBucket]
    error_buckets: ErrorBuckets
    sweep_curves: dict[str, list[SweepPoint]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def truth_ranks(
    records: Sequence[ScoreRecord], labels: LabelSet, temperature: float = 1.0
) -> np.ndarray:
    """0-based rank of each item's truth under the engine's exact ordering
    (descending softmax probability, ties by ascending label index)."""
    ranks = np.empty(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        if len(record.raw_scores) != len(labels):
            raise ValidationError(
                f"item {record.item_id!r}: {len(record.raw_scores)} scores for {len(labels)} labels"
            )
        dist = softmax(record.raw_scores, temperature)
        order = np.argsort(-dist, kind="stable")
        ranks[i] = int(np.flatnonzero(order == record.truth)[0])
    return ranks


def base_accuracies(
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    temperature: float = 1.0,
    ks: Sequence[int] = (1,),
) -> dict[int, float]:
    """Base-scorer top-k accuracy for each requested k."""
    for k in ks:
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
    ranks = truth_ranks(records, labels, temperature)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def _pair_predictions(
    predictions: Sequence[Prediction], records: Sequence[ScoreRecord]
) -> None:
    if len(predictions) != len(records):
        raise ValidationError(
            f"{len(predictions)} predictions for {len(records)} records"
        )
    for prediction, record in zip(predictions, records):
        if prediction.item_id != record.item_id:
            raise ValidationError(
                f"prediction/record id mismatch: {prediction.item_id!r} vs {record.item_id!r}"
            )


def margin_analysis(
    predictions: Sequence[Prediction], n_buckets: int = MARGIN_BUCKET_COUNT
) -> list[MarginBucket]:
    """Bucket all items by their base-scorer margin over [0, 1].

    Intervals are half-open except the last, which closes at 1.0, so bucket
    sizes always partition the item count. Each bucket reports base accuracy
    (argmax vs truth) and cascade accuracy side by side; empty buckets carry
    null accuracies rather than dividing by zero.
    """
    if n_buckets < 1:
        raise ValidationError(f"n_buckets must be >= 1, got {n_buckets}")
    width = 1.0 / n_buckets
    n = [0] * n_buckets
    base_correct = [0] * n_buckets
    cascade_correct = [0] * n_buckets
    for prediction in predictions:
        bucket = min(int(prediction.margin / width), n_buckets - 1)
        n[bucket] += 1
        base_correct[bucket] += int(prediction.base_argmax == prediction.truth)
        cascade_correct[bucket] += int(prediction.correct)
    return [
        MarginBucket(
            lo=i * width,
            hi=(i + 1) * width if i < n_buckets - 1 else 1.0,
            n=n[i],
            base_correct=base_correct[i],
            cascade_correct=cascade_correct[i],
        )
        for i in range(n_buckets)
    ]


def error_analysis(predictions: Sequence[Prediction]) -> ErrorBuckets:
    """Split every error into three exclusive buckets: wrong early exits,
    refined misses where the truth never made the candidate list, and
    refined misses where it did but the refiner picked something else."""
    base_wrong = 0
    absent = 0
    present = 0
    for prediction in predictions:
        if prediction.correct:
            continue
        if prediction.stage == STAGE_BASE:
            base_wrong += 1
        elif prediction.truth_absent_from_candidates:
            absent += 1
        else:
            present += 1
    return ErrorBuckets(
        base_wrong_early_exit=base_wrong,
        refined_wrong_truth_absent=absent,
        refined_wrong_truth_present=present,
    )


def evaluate(
    predictions: Sequence[Prediction],
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    config: CascadeConfig,
    cost_model: CostModel | None = None,
) -> EvalReport:
    """Aggregate one run into a report; predictions must align 1:1 with
    records by item id."""
    _pair_predictions(predictions, records)
    cost_model = cost_model or CostModel()
    n = len(predictions)
    cascade_correct = sum(1 for p in predictions if p.correct)
    refined = [p for p in predictions if p.stage == STAGE_REFINED]
    refiner_calls = len(refined)
    ranks = truth_ranks(records, labels, config.temperature)
    top1_correct = int(np.sum(ranks < 1))
    topk_correct = int(np.sum(ranks < config.k))
    refine_latencies = [p.latency_refine_ms for p in refined if p.latency_refine_ms is not None]
    fraction_refined = refiner_calls / n
    return EvalReport(
        run_config=config,
        cost_model=cost_model,
        n_items=n,
        counts={
            "cascade_correct": cascade_correct,
            "base_top1_correct": top1_correct,
            "base_topk_correct": topk_correct,
            "refiner_calls": refiner_calls,
            "errors": n - cascade_correct,
        },
        top1_base=top1_correct / n,
        topk_base=topk_correct / n,
        cascade_accuracy=cascade_correct / n,
        fraction_refined=fraction_refined,
        refiner_calls=refiner_calls,
        mean_latency_base_ms=cost_model.latency_base_ms,
        mean_latency_refine_ms=(
            sum(refine_latencies) / len(refine_latencies) if refine_latencies else None
        ),
        margin_buckets=margin_analysis(predictions),
        error_buckets=error_analysis(predictions),
    )


def _sweep_point(
    param: float,
    predictions: Sequence[Prediction],
    cost_model: CostModel,
) -> SweepPoint:
    n = len(predictions)
    n_correct = sum(1 for p in predictions if p.correct)
    refiner_calls = sum(1 for p in predictions if p.stage == STAGE_REFINED)
    fraction = refiner_calls / n
    return SweepPoint(
        param=param,
        accuracy=n_correct / n,
        fraction_refined=fraction,
        est_throughput=cost_model.est_throughput(fraction),
        refiner_calls=refiner_calls,
        n_correct=n_correct,
        n_items=n,
    )


def sweep_tau(
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    taus: Sequence[float],
    config: CascadeConfig,
    refiner: Refiner,
    exemplars: ExemplarBank | None = None,
    cost_model: CostModel | None = None,
    max_in_flight: int = 1,
) -> list[SweepPoint]:
    """One full cascade run per threshold; the refined fraction is
    non-increasing along the (ascending) grid by construction."""
    if not taus:
        raise ValidationError("tau grid is empty")
    if list(taus) != sorted(taus):
        raise ValidationError("tau grid must be sorted ascending")
    cost_model = cost_model or CostModel()
    points = []
    for tau in taus:
        predictions = classify_batch(
            records, labels, replace(config, tau=float(tau)), refiner, exemplars, max_in_flight
        )
        points.append(_sweep_point(float(tau), predictions, cost_model))
    return points


def sweep_k(
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    ks: Sequence[int],
    config: CascadeConfig,
    refiner: Refiner,
    exemplars: ExemplarBank | None = None,
    cost_model: CostModel | None = None,
    max_in_flight: int = 1,
) -> list[SweepPoint]:
    """One full cascade run per candidate-list size."""
    if not ks:
        raise ValidationError("k grid is empty")
    if list(ks) != sorted(ks) or any(k < 1 for k in ks):
        raise ValidationError("k grid must be ascending integers >= 1")
    cost_model = cost_model or CostModel()
    points = []
    for k in ks:
        predictions = classify_batch(
            records, labels, replace(config, k=int(k)), refiner, exemplars, max_in_flight
        )
        points.append(_sweep_point(float(k), predictions, cost_model))
    return points


def order_sensitivity(
    records: Sequence[ScoreRecord],
    labels: LabelSet,
    config: CascadeConfig,
    refiner: Refiner,
    orders: Sequence[str],
    exemplars: ExemplarBank | None = None,
    max_in_flight: int = 1,
) -> dict[str, float]:
    """Cascade accuracy per candidate presentation order.

    With an order-insensitive refiner (the oracle) all orders score exactly
    the same, which is the null-effect control; order-biased refiners reveal
    how much the presentation arrangement matters.
    """
    accuracies: dict[str, float] = {}
    for order in orders:
        predictions = classify_batch(
            records,
            labels,
            replace(config, candidate_order=order),
            refiner,
            exemplars,
            max_in_flight,
        )
        accuracies[order] = sum(1 for p in predictions if p.correct) / len(predictions)
    return accuracies


# --- serialization ------------------------------------------------------

def _bucket_dict(bucket: MarginBucket) -> dict:
    return {
        "lo": bucket.lo,
        "hi": bucket.hi,
        "n": bucket.n,
        "base_correct": bucket.base_correct,
        "cascade_correct": bucket.cascade_correct,
        "base_acc": bucket.base_acc,
        "cascade_acc": bucket.cascade_acc,
        "gap": bucket.gap,
    }


def report_to_dict(report: EvalReport) -> dict:
    """JSON-ready projection of a report, stable key order.

    Floats are kept at full precision so a JSON round-trip reproduces the
    report exactly and the rational-count identities survive; the CSV bundle
    applies display formatting instead.
    """
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_config": asdict(report.run_config),
        "cost_model": asdict(report.cost_model),
        "n_items": report.n_items,
        "counts": dict(report.counts),
        "top1_base": report.top1_base,
        "topk_base": report.topk_base,
        "cascade_accuracy": report.cascade_accuracy,
        "fraction_refined": report.fraction_refined,
        "refiner_calls": report.refiner_calls,
        "mean_latency_base_ms": report.mean_latency_base_ms,
        "mean_latency_refine_ms": report.mean_latency_refine_ms,
        "sweep_curves": {
            name: [asdict(point) for point in points]
            for name, points in report.sweep_curves.items()
        },
        "margin_buckets": [_bucket_dict(bucket) for bucket in report.margin_buckets],
        "error_buckets": {
            "base_wrong_early_exit": report.error_buckets.base_wrong_early_exit,
            "refined_wrong_truth_absent": report.error_buckets.refined_wrong_truth_absent,
            "refined_wrong_truth_present": report.error_buckets.refined_wrong_truth_present,
        },
        "metadata": dict(report.metadata),
    }


def report_from_dict(obj: Mapping) -> EvalReport:
    if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported report schema version {obj.get('schema_version')!r}, "
            f"expected {REPORT_SCHEMA_VERSION}"
        )
    return EvalReport(
        run_config=CascadeConfig(**obj["run_config"]),
        cost_model=CostModel(**obj["cost_model"]),
        n_items=obj["n_items"],
        counts=dict(obj["counts"]),
        top1_base=obj["top1_base"],
        topk_base=obj["topk_base"],
        cascade_accuracy=obj["cascade_accuracy"],
        fraction_refined=obj["fraction_refined"],
        refiner_calls=obj["refiner_calls"],
        mean_latency_base_ms=obj["mean_latency_base_ms"],
        mean_latency_refine_ms=obj["mean_latency_refine_ms"],
        margin_buckets=[
            MarginBucket(
                lo=b["lo"],
                hi=b["hi"],
                n=b["n"],
                base_correct=b["base_correct"],
                cascade_correct=b["cascade_correct"],
            )
            for b in obj["margin_buckets"]
        ],
        error_buckets=ErrorBuckets(
            base_wrong_early_exit=obj["error_buckets"]["base_wrong_early_exit"],
            refined_wrong_truth_absent=obj["error_buckets"]["refined_wrong_truth_absent"],
            refined_wrong_truth_present=obj["error_buckets"]["refined_wrong_truth_present"],
        ),
        sweep_curves={
            name: [SweepPoint(**point) for point in points]
            for name, points in obj.get("sweep_curves", {}).items()
        },
        metadata=dict(obj.get("metadata", {})),
    )


def _fmt(value) -> str:
    """CSV cell formatting: floats at 6 significant digits, None blank."""
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def emit_report(
    report: EvalReport, path: str | Path, format: str = "json"
) -> list[Path]:
    """Write a report as one JSON document or a directory of CSV tables.

    Emission is deterministic: two emissions of the same report are
    byte-identical. Returns the written paths.
    """
    path = Path(path)
    if format == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8"
        )
        return [path]
    if format != "csv_bundle":
        raise ValidationError(f"unknown report format {format!r}; expected 'json' or 'csv_bundle'")

    path.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def write_csv(name: str, header: list[str], rows: list[list]) -> None:
        target = path / name
        with target.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(cell) for cell in row])
        written.append(target)

    write_csv(
        "summary.csv",
        [
            "n_items",
            "cascade_accuracy",
            "top1_base",
            "topk_base",
            "fraction_refined",
            "refiner_calls",
            "mean_latency_base_ms",
            "mean_latency_refine_ms",
        ],
        [[
            report.n_items,
            report.cascade_accuracy,
            report.top1_base,
            report.topk_base,
            report.fraction_refined,
            report.refiner_calls,
            report.mean_latency_base_ms,
            report.mean_latency_refine_ms,
        ]],
    )
    sweep_header = [
        "param",
        "accuracy",
        "fraction_refined",
        "est_throughput",
        "refiner_calls",
        "n_correct",
        "n_items",
    ]
    for name in ("tau", "k"):
        points = report.sweep_curves.get(name, [])
        write_csv(
            f"sweep_{name}.csv",
            sweep_header,
            [
                [
                    p.param,
                    p.accuracy,
                    p.fraction_refined,
                    p.est_throughput,
                    p.refiner_calls,
                    p.n_correct,
                    p.n_items,
                ]
                for p in points
            ],
        )
    write_csv(
        "margin_buckets.csv",
        ["lo", "hi", "n", "base_correct", "cascade_correct", "base_acc", "cascade_acc", "gap"],
        [
            [b.lo, b.hi, b.n, b.base_correct, b.cascade_correct, b.base_acc, b.cascade_acc, b.gap]
            for b in report.margin_buckets
        ],
    )
    write_csv(
        "error_buckets.csv",
        ["base_wrong_early_exit", "refined_wrong_truth_absent", "refined_wrong_truth_present"],
        [[
            report.error_buckets.base_wrong_early_exit,
            report.error_buckets.refined_wrong_truth_absent,
            report.error_buckets.refined_wrong_truth_present,
        ]],
    )
    return written
