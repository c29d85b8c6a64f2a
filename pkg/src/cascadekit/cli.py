"""Command-line entry point: validate, run, sweep, analyze.

A run is fully described by one YAML config file; every flag is an override
of a config key. Exit codes are a stable contract for scripting: 0 success,
1 validation failure, 2 runtime/backend failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .backends import (
    EndpointConfig,
    FirstCandidateRefiner,
    OracleRefiner,
    Refiner,
    RemoteRefiner,
    ReplayRefiner,
)
from .core import LabelSet, entropy, softmax
from .data import (
    DatasetManifest,
    ScoreRecord,
    build_exemplar_bank,
    load_dataset,
    load_exemplar_listing,
    load_manifest,
)
from .engine import (
    CascadeConfig,
    classify_batch,
    read_predictions,
    write_predictions,
)
from .errors import CascadeKitError, RefinerError, ValidationError
from .evaluation import (
    CostModel,
    EvalReport,
    emit_report,
    error_analysis,
    evaluate,
    margin_analysis,
    report_from_dict,
    sweep_k,
    sweep_tau,
)
from .prompts import ExemplarBank

BACKEND_KINDS = ("oracle", "replay", "remote", "first_candidate")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class RunConfig:
    """Parsed and validated run configuration."""

    def __init__(
        self,
        manifest_path: Path,
        cascade: CascadeConfig,
        backend_kind: str,
        backend_options: dict[str, Any],
        taus: list[float],
        ks: list[int],
        cost_model: CostModel,
        output_dir: Path,
        max_in_flight: int,
    ):
        self.manifest_path = manifest_path
        self.cascade = cascade
        self.backend_kind = backend_kind
        self.backend_options = backend_options
        self.taus = taus
        self.ks = ks
        self.cost_model = cost_model
        self.output_dir = output_dir
        self.max_in_flight = max_in_flight


def load_run_config(path: str | Path, overrides: argparse.Namespace | None = None) -> RunConfig:
    """Read the YAML config, apply CLI overrides, validate structure."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a mapping")

    base = path.parent
    if "manifest" not in raw:
        raise ValidationError(f"{path}: config missing 'manifest'")
    manifest_path = (base / str(raw["manifest"])).resolve()

    cascade_section = dict(raw.get("cascade", {}))
    backend_section = raw.get("backend", {})
    if not isinstance(backend_section, dict) or len(backend_section) != 1:
        raise ValidationError(
            f"{path}: exactly one backend section required, got {sorted(backend_section) if isinstance(backend_section, dict) else backend_section!r}"
        )
    backend_kind = next(iter(backend_section))
    if backend_kind not in BACKEND_KINDS:
        raise ValidationError(f"{path}: unknown backend {backend_kind!r}; expected one of {BACKEND_KINDS}")
    backend_options = dict(backend_section[backend_kind] or {})

    evaluation_section = dict(raw.get("evaluation", {}))
    taus = [float(t) for t in evaluation_section.get("taus", [])]
    ks = [int(k) for k in evaluation_section.get("ks", [])]
    cost_model = CostModel(
        latency_base_ms=float(evaluation_section.get("latency_base_ms", 5.0)),
        latency_refine_ms=float(evaluation_section.get("latency_refine_ms", 500.0)),
    )
    output_dir = (base / str(raw.get("output_dir", "out"))).resolve()
    max_in_flight = int(raw.get("max_in_flight", 1))

    if overrides is not None:
        if getattr(overrides, "seed", None) is not None:
            cascade_section["seed"] = overrides.seed
        if getattr(overrides, "tau", None) is not None:
            cascade_section["tau"] = overrides.tau
        if getattr(overrides, "k", None) is not None:
            cascade_section["k"] = overrides.k
        if getattr(overrides, "out", None) is not None:
            output_dir = Path(overrides.out).resolve()
        if getattr(overrides, "max_in_flight", None) is not None:
            max_in_flight = overrides.max_in_flight
        if getattr(overrides, "backend", None) is not None:
            requested = overrides.backend
            if requested not in BACKEND_KINDS:
                raise ValidationError(f"unknown backend {requested!r}; expected one of {BACKEND_KINDS}")
            if requested != backend_kind:
                if requested in ("oracle", "first_candidate"):
                    backend_kind, backend_options = requested, {}
                else:
                    raise ValidationError(
                        f"--backend {requested} needs a backend.{requested} section in the config"
                    )

    cascade_section.setdefault("refiner_ref", backend_kind)
    try:
        cascade = CascadeConfig(**cascade_section)
    except TypeError as exc:
        raise ValidationError(f"{path}: bad cascade section: {exc}") from exc

    # Backend-specific paths resolve relative to the config file.
    if backend_kind == "replay":
        if "path" not in backend_options:
            raise ValidationError(f"{path}: backend.replay requires 'path'")
        backend_options["path"] = str((base / str(backend_options["path"])).resolve())
    if backend_kind == "remote":
        for key in ("endpoint_url", "model"):
            if key not in backend_options:
                raise ValidationError(f"{path}: backend.remote requires {key!r}")
        if backend_options.get("record_path"):
            backend_options["record_path"] = str((base / str(backend_options["record_path"])).resolve())

    return RunConfig(
        manifest_path=manifest_path,
        cascade=cascade,
        backend_kind=backend_kind,
        backend_options=backend_options,
        taus=taus,
        ks=ks,
        cost_model=cost_model,
        output_dir=output_dir,
        max_in_flight=max_in_flight,
    )


def build_refiner(kind: str, options: dict[str, Any]) -> Refiner:
    if kind == "oracle":
        return OracleRefiner(in_candidate_accuracy=float(options.get("in_candidate_accuracy", 1.0)))
    if kind == "first_candidate":
        return FirstCandidateRefiner()
    if kind == "replay":
        return ReplayRefiner(options["path"])
    if kind == "remote":
        return RemoteRefiner(
            EndpointConfig(
                endpoint_url=options["endpoint_url"],
                model=options["model"],
                max_tokens=int(options.get("max_tokens", 32)),
                timeout_ms=float(options.get("timeout_ms", 30000.0)),
                max_retries=int(options.get("max_retries", 3)),
                record_path=options.get("record_path"),
                api_key_env=options.get("api_key_env", "CASCADEKIT_API_KEY"),
            )
        )
    raise ValidationError(f"unknown backend kind {kind!r}")


def _load_inputs(
    run: RunConfig,
) -> tuple[DatasetManifest, LabelSet, list[ScoreRecord], ExemplarBank | None]:
    manifest = load_manifest(run.manifest_path)
    labels, records = load_dataset(manifest)
    exemplars = None
    if run.cascade.few_shot:
        if manifest.exemplars_path is None:
            raise ValidationError(
                f"{run.manifest_path}: few-shot run requires an exemplar listing in the manifest"
            )
        listing = load_exemplar_listing(manifest.exemplars_path)
        exemplars = build_exemplar_bank(
            listing, labels, run.cascade.shots_per_class, run.cascade.seed
        )
    return manifest, labels, records, exemplars


def _progress(done: int, total: int) -> None:
    if done % 1000 == 0 or done == total:
        print(f"  processed {done}/{total}", file=sys.stderr)


def _metadata(run: RunConfig) -> dict:
    # The only place timestamps are allowed; everything else must be
    # byte-reproducible across identical runs.
    return {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "tool": f"cascadekit {__version__}",
        "config_manifest": str(run.manifest_path),
    }


def cmd_validate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args)
    manifest, labels, records, exemplars = _load_inputs(run)
    entropies = np.array(
        [entropy(softmax(r.raw_scores, run.cascade.temperature)) for r in records]
    )
    print(f"config            OK ({args.config})")
    print(f"dataset           {manifest.name} [{manifest.split}]")
    print(f"items             {len(records)}")
    print(f"classes           {len(labels)} (ln N = {math.log(len(labels)):.4f} nats)")
    print(
        "entropy           "
        f"min {entropies.min():.4f} / mean {entropies.mean():.4f} / max {entropies.max():.4f} nats"
    )
    print(f"gate              tau = {run.cascade.tau} (strictly below exits early)")
    print(f"candidates        k = {run.cascade.k}, order = {run.cascade.candidate_order}")
    print(f"backend           {run.backend_kind}")
    if exemplars is not None:
        print(f"exemplars         {run.cascade.shots_per_class} per class for {len(labels)} classes")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args)
    _, labels, records, exemplars = _load_inputs(run)
    refiner = build_refiner(run.backend_kind, run.backend_options)
    predictions = classify_batch(
        records,
        labels,
        run.cascade,
        refiner,
        exemplars,
        run.max_in_flight,
        on_progress=_progress,
    )
    report = evaluate(predictions, records, labels, run.cascade, run.cost_model)
    report.metadata = _metadata(run)

    run.output_dir.mkdir(parents=True, exist_ok=True)
    predictions_path = run.output_dir / "predictions.ndjson"
    write_predictions(predictions, predictions_path, labels)
    report_path = run.output_dir / "report.json"
    emit_report(report, report_path, format="json")

    print(f"items             {report.n_items}")
    print(f"cascade accuracy  {report.cascade_accuracy:.4f} ({report.counts['cascade_correct']}/{report.n_items})")
    print(f"base top-1        {report.top1_base:.4f}")
    print(f"base top-{run.cascade.k:<8d} {report.topk_base:.4f}")
    print(f"fraction refined  {report.fraction_refined:.4f} ({report.refiner_calls} refiner calls)")
    if report.mean_latency_refine_ms is not None:
        print(f"mean refine ms    {report.mean_latency_refine_ms:.1f}")
    print(f"predictions       {predictions_path}")
    print(f"report            {report_path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args)
    _, labels, records, exemplars = _load_inputs(run)
    refiner = build_refiner(run.backend_kind, run.backend_options)

    if args.param == "tau":
        grid = run.taus
        if not grid:
            raise ValidationError("config evaluation.taus is empty; nothing to sweep")
        points = sweep_tau(
            records, labels, grid, run.cascade, refiner, exemplars, run.cost_model, run.max_in_flight
        )
    else:
        grid = run.ks
        if not grid:
            raise ValidationError("config evaluation.ks is empty; nothing to sweep")
        points = sweep_k(
            records, labels, grid, run.cascade, refiner, exemplars, run.cost_model, run.max_in_flight
        )

    # Anchor the report on the base (un-swept) config, attach the curve.
    predictions = classify_batch(records, labels, run.cascade, refiner, exemplars, run.max_in_flight)
    report = evaluate(predictions, records, labels, run.cascade, run.cost_model)
    report.sweep_curves[args.param] = points
    report.metadata = _metadata(run)

    run.output_dir.mkdir(parents=True, exist_ok=True)
    report_path = run.output_dir / "report.json"
    emit_report(report, report_path, format="json")
    csv_paths = emit_report(report, run.output_dir / "tables", format="csv_bundle")

    print(f"{'param':>10}  {'accuracy':>9}  {'refined':>8}  {'items/s':>9}")
    for point in points:
        print(
            f"{point.param:>10.4g}  {point.accuracy:>9.4f}  "
            f"{point.fraction_refined:>8.4f}  {point.est_throughput:>9.2f}"
        )
    print(f"report            {report_path}")
    print(f"tables            {', '.join(str(p) for p in csv_paths)}")
    return EXIT_OK


def _print_margin_table(buckets) -> None:
    print(f"{'margin':>14}  {'n':>7}  {'base_acc':>9}  {'cascade_acc':>11}  {'gap':>8}")
    for bucket in buckets:
        base = f"{bucket.base_acc:.4f}" if bucket.base_acc is not None else "-"
        cascade = f"{bucket.cascade_acc:.4f}" if bucket.cascade_acc is not None else "-"
        gap = f"{bucket.gap:+.4f}" if bucket.gap is not None else "-"
        print(f"[{bucket.lo:4.2f}, {bucket.hi:4.2f})  {bucket.n:>7}  {base:>9}  {cascade:>11}  {gap:>8}")


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.analysis in ("margin", "errors"):
        if len(args.paths) != 1:
            raise ValidationError(f"--analysis {args.analysis} takes exactly one predictions file")
        predictions = read_predictions(args.paths[0])
        if args.analysis == "margin":
            buckets = margin_analysis(predictions)
            _print_margin_table(buckets)
            total = sum(b.n for b in buckets)
            print(f"{'total':>14}  {total:>7}")
        else:
            buckets = error_analysis(predictions)
            errors = sum(1 for p in predictions if not p.correct)
            print(f"base wrong (early exit)        {buckets.base_wrong_early_exit}")
            print(f"refined wrong, truth absent    {buckets.refined_wrong_truth_absent}")
            print(f"refined wrong, truth present   {buckets.refined_wrong_truth_present}")
            print(f"total errors                   {errors}")
        return EXIT_OK

    # orders: one completed run directory per candidate order.
    if len(args.paths) < 2:
        raise ValidationError(
            "--analysis orders needs two or more run directories (each containing "
            "report.json and predictions.ndjson); produce them with `cascadekit run` "
            "using a different cascade.candidate_order per run"
        )
    rows: list[tuple[str, float, int]] = []
    for raw in args.paths:
        run_dir = Path(raw)
        report_path = run_dir / "report.json"
        predictions_path = run_dir / "predictions.ndjson"
        for required in (report_path, predictions_path):
            if not required.exists():
                raise ValidationError(
                    f"{required} is missing; run `cascadekit run --out {run_dir}` first"
                )
        report = report_from_dict(json.loads(report_path.read_text(encoding="utf-8")))
        predictions = read_predictions(predictions_path)
        accuracy = sum(1 for p in predictions if p.correct) / len(predictions)
        rows.append((report.run_config.candidate_order, accuracy, len(predictions)))
    print(f"{'order':>12}  {'accuracy':>9}  {'items':>7}")
    for order, accuracy, n in rows:
        print(f"{order:>12}  {accuracy:>9.4f}  {n:>7}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadekit",
        description="Entropy-gated two-stage classification cascade: validate, run, sweep, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override cascade.seed")
        p.add_argument("--tau", type=float, default=None, help="override cascade.tau (nats)")
        p.add_argument("--k", type=int, default=None, help="override cascade.k")
        p.add_argument("--backend", default=None, help="override backend kind")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--max-in-flight", dest="max_in_flight", type=int, default=None)

    p_validate = sub.add_parser("validate", help="load config and data, run every invariant check")
    add_common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="classify all items, write predictions and report")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the configured tau or k grid")
    add_common(p_sweep)
    p_sweep.add_argument("--param", choices=("tau", "k"), required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_analyze = sub.add_parser(
        "analyze", help="recompute analyses from persisted predictions (no refiner calls)"
    )
    p_analyze.add_argument("paths", nargs="+", help="predictions file, or run directories for orders")
    p_analyze.add_argument("--analysis", choices=("margin", "errors", "orders"), required=True)
    p_analyze.set_defaults(func=cmd_analyze)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RefinerError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CascadeKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
