"""Batch figure rendering for cascade evaluation reports."""

from .figures import (
    FIGURE_KINDS,
    FigureSpec,
    MissingSeriesError,
    PlotkitError,
    ReportSchemaError,
    load_report,
    project_series,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "FIGURE_KINDS",
    "FigureSpec",
    "MissingSeriesError",
    "PlotkitError",
    "ReportSchemaError",
    "load_report",
    "project_series",
    "render",
]
