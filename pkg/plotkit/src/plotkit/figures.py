"""Figure rendering over cascade evaluation reports.

Consumes the report JSON schema only; nothing is recomputed. Every render
writes the image plus a sidecar file holding the exact plotted series, so
golden tests compare sidecars instead of toolchain-dependent image bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

SUPPORTED_SCHEMA_VERSION = 1

FIGURE_KINDS = ("tau_sweep", "k_sweep", "margin_buckets", "error_buckets")

ERROR_BUCKET_LABELS = (
    "base_wrong_early_exit",
    "refined_wrong_truth_absent",
    "refined_wrong_truth_present",
)


class PlotkitError(Exception):
    """Base class for plotkit failures."""


class ReportSchemaError(PlotkitError):
    """Report is unreadable or carries an unsupported schema version."""


class MissingSeriesError(PlotkitError):
    """The requested figure kind's data series is absent from the report."""

    def __init__(self, series: str):
        self.series = series
        super().__init__(f"report has no data for series {series!r}")


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    report_path: str
    out_path: str
    title: str | None = None
    xlabel: str | None = None
    ylabel: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise PlotkitError(f"unknown figure kind {self.kind!r}; expected one of {FIGURE_KINDS}")


def load_report(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ReportSchemaError(f"report not found: {path}")
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ReportSchemaError(f"{path}: not a JSON report: {exc}") from exc
    version = report.get("schema_version")
    if version != SUPPORTED_SCHEMA_VERSION:
        raise ReportSchemaError(
            f"{path}: schema version {version!r} unsupported, expected {SUPPORTED_SCHEMA_VERSION}"
        )
    return report


def _sweep_series(report: Mapping[str, Any], name: str) -> dict:
    points = report.get("sweep_curves", {}).get(name)
    if not points:
        raise MissingSeriesError(f"sweep_curves.{name}")
    return {
        "param": [p["param"] for p in points],
        "accuracy": [p["accuracy"] for p in points],
        "fraction_refined": [p["fraction_refined"] for p in points],
        "est_throughput": [p["est_throughput"] for p in points],
    }


def project_series(report: Mapping[str, Any], kind: str) -> dict:
    """Verbatim projection of the report slice a figure kind plots.

    Values are copied as parsed, never recomputed, so the sidecar is
    byte-comparable against an independent projection of the same report.
    """
    if kind == "tau_sweep":
        return {"kind": kind, "series": _sweep_series(report, "tau")}
    if kind == "k_sweep":
        return {"kind": kind, "series": _sweep_series(report, "k")}
    if kind == "margin_buckets":
        buckets = report.get("margin_buckets")
        if not buckets:
            raise MissingSeriesError("margin_buckets")
        return {
            "kind": kind,
            "series": {
                "lo": [b["lo"] for b in buckets],
                "hi": [b["hi"] for b in buckets],
                "n": [b["n"] for b in buckets],
                "base_acc": [b["base_acc"] for b in buckets],
                "cascade_acc": [b["cascade_acc"] for b in buckets],
                "gap": [b["gap"] for b in buckets],
            },
        }
    if kind == "error_buckets":
        buckets = report.get("error_buckets")
        if buckets is None:
            raise MissingSeriesError("error_buckets")
        missing = [label for label in ERROR_BUCKET_LABELS if label not in buckets]
        if missing:
            raise MissingSeriesError(f"error_buckets.{missing[0]}")
        return {
            "kind": kind,
            "series": {
                "labels": list(ERROR_BUCKET_LABELS),
                "counts": [buckets[label] for label in ERROR_BUCKET_LABELS],
            },
        }
    raise PlotkitError(f"unknown figure kind {kind!r}")


def _heights(values: list) -> list[float]:
    # Empty buckets carry null accuracies; draw them at zero height.
    return [0.0 if v is None else float(v) for v in values]


def _draw_sweep(spec: FigureSpec, series: dict, param_name: str) -> plt.Figure:
    fig, ax_acc = plt.subplots(figsize=(7, 4.5))
    ax_acc.plot(series["param"], series["accuracy"], "o-", color="tab:blue", label="accuracy")
    ax_acc.set_xlabel(spec.xlabel or param_name)
    ax_acc.set_ylabel(spec.ylabel or "accuracy", color="tab:blue")
    ax_acc.tick_params(axis="y", labelcolor="tab:blue")
    ax_acc.grid(True, alpha=0.3)

    ax_thr = ax_acc.twinx()
    ax_thr.plot(
        series["param"], series["est_throughput"], "s--", color="tab:red", label="est. throughput"
    )
    ax_thr.set_ylabel("est. throughput (items/s)", color="tab:red")
    ax_thr.tick_params(axis="y", labelcolor="tab:red")

    lines = ax_acc.get_lines() + ax_thr.get_lines()
    ax_acc.legend(lines, [line.get_label() for line in lines], loc="center right")
    ax_acc.set_title(spec.title or f"accuracy / throughput vs {param_name}")
    fig.tight_layout()
    return fig


def _draw_margin_buckets(spec: FigureSpec, series: dict) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    centers = list(range(len(series["lo"])))
    width = 0.38
    labels = [f"[{lo:.1f}, {hi:.1f})" for lo, hi in zip(series["lo"], series["hi"])]
    ax.bar(
        [c - width / 2 for c in centers],
        _heights(series["base_acc"]),
        width,
        label="base accuracy",
        color="tab:gray",
    )
    ax.bar(
        [c + width / 2 for c in centers],
        _heights(series["cascade_acc"]),
        width,
        label="cascade accuracy",
        color="tab:blue",
    )
    ax.plot(
        centers,
        [float("nan") if g is None else g for g in series["gap"]],
        "o-",
        color="tab:red",
        label="gap (cascade - base)",
    )
    ax.set_xticks(centers)
    ax.set_xticklabels(labels)
    ax.set_xlabel(spec.xlabel or "top1 - top2 margin interval")
    ax.set_ylabel(spec.ylabel or "accuracy")
    ax.set_title(spec.title or "accuracy by base-scorer margin")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return fig


def _draw_error_buckets(spec: FigureSpec, series: dict) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    display = {
        "base_wrong_early_exit": "early exit wrong",
        "refined_wrong_truth_absent": "refined wrong (truth not in options)",
        "refined_wrong_truth_present": "refined wrong (truth in options)",
    }
    colors = ("tab:gray", "tab:orange", "tab:red")
    left = 0.0
    for label, count, color in zip(series["labels"], series["counts"], colors):
        ax.barh([0], [count], left=left, color=color, label=display[label])
        if count:
            ax.text(left + count / 2, 0, str(count), ha="center", va="center", color="white")
        left += count
    ax.set_yticks([])
    ax.set_xlabel(spec.xlabel or "error count")
    ax.set_title(spec.title or "error breakdown")
    ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.25), ncol=1, frameon=False)
    fig.tight_layout()
    return fig


def render(spec: FigureSpec) -> tuple[Path, Path]:
    """Render one figure; returns (image path, sidecar path).

    The sidecar is the byte-stable projection of the plotted series; two
    renders of the same spec and report produce identical sidecars.
    """
    report = load_report(spec.report_path)
    projection = project_series(report, spec.kind)
    series = projection["series"]

    if spec.kind == "tau_sweep":
        fig = _draw_sweep(spec, series, "entropy threshold (nats)")
    elif spec.kind == "k_sweep":
        fig = _draw_sweep(spec, series, "candidate count k")
    elif spec.kind == "margin_buckets":
        fig = _draw_margin_buckets(spec, series)
    else:
        fig = _draw_error_buckets(spec, series)

    out_path = Path(spec.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

    sidecar_path = out_path.with_name(out_path.name + ".series.json")
    sidecar_path.write_text(
        json.dumps(projection, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out_path, sidecar_path
